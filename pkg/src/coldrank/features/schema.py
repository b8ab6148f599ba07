# ===== IMPORTS =====
# === Standard library ===
from dataclasses import dataclass
import enum
import hashlib
import json
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

# === Thirdparty ===
import numpy as np

# === Local ===
from coldrank.exceptions import FeatureRangeError, SchemaError


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
DEFAULT_EMBED_DIM = 16


# ===== CLASSES =====
class Side(str, enum.Enum):
    USER = 'user'
    AD = 'ad'
    CROSS = 'cross'


class Multiplicity(str, enum.Enum):
    SINGLE = 'single'
    MULTI_SUM_POOL = 'multi_sum_pool'


@dataclass(frozen=True)
class FeatureGroup:
    id: str
    side: Side
    cardinality: int
    multiplicity: Multiplicity = Multiplicity.SINGLE
    embed_dim: int = DEFAULT_EMBED_DIM
    # (user group id, ad group id) for cross groups
    source: Optional[Tuple[str, str]] = None

    def __post_init__(self):
        object.__setattr__(self, 'side', Side(self.side))
        object.__setattr__(self, 'multiplicity', Multiplicity(self.multiplicity))
        if self.source is not None:
            object.__setattr__(self, 'source', tuple(self.source))
        if self.cardinality < 1:
            raise SchemaError(f'Group \'{self.id}\' has cardinality {self.cardinality} < 1')
        if self.embed_dim < 1:
            raise SchemaError(f'Group \'{self.id}\' has embed_dim {self.embed_dim} < 1')
        if self.side is Side.CROSS:
            if self.source is None or len(self.source) != 2:
                raise SchemaError(f'Cross group \'{self.id}\' must declare its (user, ad) source pair')
            if self.multiplicity is not Multiplicity.SINGLE:
                raise SchemaError(f'Cross group \'{self.id}\' must be single-valued')
        elif self.source is not None:
            raise SchemaError(f'Only cross groups declare a source, \'{self.id}\' is {self.side.value}')

    @property
    def pooled(self):
        return self.multiplicity is Multiplicity.MULTI_SUM_POOL

    def to_dict(self):
        record = {
            'id': self.id,
            'side': self.side.value,
            'cardinality': self.cardinality,
            'multiplicity': self.multiplicity.value,
            'embed_dim': self.embed_dim,
        }
        if self.source is not None:
            record['source'] = list(self.source)
        return record

    @classmethod
    def from_dict(cls, record):
        return cls(
            id=record['id'],
            side=record['side'],
            cardinality=int(record['cardinality']),
            multiplicity=record.get('multiplicity', Multiplicity.SINGLE.value),
            embed_dim=int(record.get('embed_dim', DEFAULT_EMBED_DIM)),
            source=record.get('source'),
        )


class FeatureSchema:
    """Ordered, validated collection of feature groups."""

    def __init__(self, groups: Iterable[FeatureGroup]):
        self.groups: Tuple[FeatureGroup, ...] = tuple(groups)
        self._index: Dict[str, int] = {}
        for i, group in enumerate(self.groups):
            if group.id in self._index:
                raise SchemaError(f'Duplicate group id \'{group.id}\'')
            self._index[group.id] = i
        for group in self.cross_groups:
            user_id, ad_id = group.source
            for source_id, side in ((user_id, Side.USER), (ad_id, Side.AD)):
                source = self._index.get(source_id)
                if source is None:
                    raise SchemaError(f'Cross group \'{group.id}\' references unknown group \'{source_id}\'')
                source = self.groups[source]
                if source.side is not side:
                    raise SchemaError(
                        f'Cross group \'{group.id}\' expects \'{source_id}\' on the {side.value} side')
                if source.pooled:
                    raise SchemaError(f'Cross group \'{group.id}\' cannot derive from pooled \'{source_id}\'')

    @property
    def M(self):
        return len(self.groups)

    @property
    def ids(self) -> List[str]:
        return [g.id for g in self.groups]

    @property
    def user_groups(self):
        return [g for g in self.groups if g.side is Side.USER]

    @property
    def ad_groups(self):
        return [g for g in self.groups if g.side is Side.AD]

    @property
    def cross_groups(self):
        return [g for g in self.groups if g.side is Side.CROSS]

    def __contains__(self, group_id):
        return group_id in self._index

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)

    def __eq__(self, other):
        return isinstance(other, FeatureSchema) and self.groups == other.groups

    def __hash__(self):
        return hash(self.groups)

    def group(self, group_id) -> FeatureGroup:
        try:
            return self.groups[self._index[group_id]]
        except KeyError:
            raise SchemaError(f'Unknown feature group \'{group_id}\'') from None

    def position(self, group_id) -> int:
        self.group(group_id)
        return self._index[group_id]

    def restrict(self, group_ids: Optional[Iterable[str]] = None) -> List[FeatureGroup]:
        """Groups named in `group_ids`, in schema order (all groups for None)."""
        if group_ids is None:
            return list(self.groups)
        wanted = set(group_ids)
        for group_id in wanted:
            self.group(group_id)
        return [g for g in self.groups if g.id in wanted]

    def input_width(self, group_ids=None):
        return sum(g.embed_dim for g in self.restrict(group_ids))

    def to_dict(self):
        return {'groups': [g.to_dict() for g in self.groups]}

    @classmethod
    def from_dict(cls, record):
        if 'groups' not in record:
            raise SchemaError('Schema descriptor has no \'groups\'')
        return cls(FeatureGroup.from_dict(g) for g in record['groups'])

    def digest(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf8')).hexdigest()


@dataclass
class EmbeddingTable:
    group_id: str
    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise SchemaError(f'Embedding table \'{self.group_id}\' must be 2-D')

    @property
    def cardinality(self):
        return self.weights.shape[0]

    @property
    def embed_dim(self):
        return self.weights.shape[1]

    def check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cardinality):
            raise FeatureRangeError(
                f'Ids for \'{self.group_id}\' outside [0, {self.cardinality}): '
                f'min={ids.min()}, max={ids.max()}')
        return ids

    def lookup(self, ids):
        return self.weights[self.check_ids(ids)]


# ===== FUNCTIONS =====
def check_tables(schema: FeatureSchema, tables, group_ids: Sequence[str]):
    for group in schema.restrict(group_ids):
        table = tables.get(group.id)
        if table is None:
            raise SchemaError(f'No embedding table for group \'{group.id}\'')
        if table.cardinality != group.cardinality or table.embed_dim != group.embed_dim:
            raise SchemaError(
                f'Table \'{group.id}\' is {table.weights.shape}, schema says '
                f'({group.cardinality}, {group.embed_dim})')
