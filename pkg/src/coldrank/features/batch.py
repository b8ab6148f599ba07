# ===== IMPORTS =====
# === Standard library ===
from collections import Counter
from dataclasses import dataclass, field
import logging
from typing import Dict, List, Mapping, Optional, Sequence

# === Thirdparty ===
import numpy as np

# === Local ===
from coldrank.exceptions import DatasetError, FeatureRangeError, SchemaError
from coldrank.features.dataset import AdCandidate, RawExample, UserContext
from coldrank.features.schema import EmbeddingTable, FeatureGroup, FeatureSchema, Side, check_tables


# ===== GLOBALS =====
logger = logging.getLogger(__name__)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


# ===== CLASSES =====
@dataclass
class PooledColumn:
    """CSR layout of B multisets: bag b is ids[offsets[b]:offsets[b + 1]]."""
    offsets: np.ndarray
    ids: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_bags(cls, bags):
        lengths = np.fromiter((len(bag) for bag in bags), dtype=np.int64, count=len(bags))
        offsets = np.zeros(len(bags) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        ids = np.fromiter((i for bag in bags for i, _ in bag), dtype=np.int64, count=int(offsets[-1]))
        counts = np.fromiter((c for bag in bags for _, c in bag), dtype=np.int64, count=int(offsets[-1]))
        return cls(offsets, ids, counts)

    def __len__(self):
        return len(self.offsets) - 1

    def bag(self, b):
        lo, hi = self.offsets[b], self.offsets[b + 1]
        return self.ids[lo:hi], self.counts[lo:hi]


@dataclass
class ColumnarBatch:
    """Column-major features of B candidates; columns follow schema order."""
    size: int
    groups: List[str]
    ids: Dict[str, np.ndarray] = field(default_factory=dict)
    pooled: Dict[str, PooledColumn] = field(default_factory=dict)
    embeddings: Dict[str, np.ndarray] = field(default_factory=dict)
    labels: Optional[np.ndarray] = None
    user_ids: Optional[np.ndarray] = None
    ad_ids: Optional[np.ndarray] = None
    lookup_counts: Counter = field(default_factory=Counter)

    def embedding(self, group_id):
        try:
            return self.embeddings[group_id]
        except KeyError:
            raise SchemaError(f'Batch has no embedding column for \'{group_id}\'') from None


# ===== FUNCTIONS =====
def _mix64(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def cross_hash(user_values, ad_values, cardinality):
    """Vectorized cross-feature id.

    Folds mix64 over the concatenated little-endian 64-bit encodings of (user, ad), then reduces
    modulo `cardinality`; for two words this is mix64(mix64(user) ^ ad).
    """
    encoded = np.stack([np.asarray(user_values, dtype='<i8'), np.asarray(ad_values, dtype='<i8')], axis=-1)
    words = np.ascontiguousarray(encoded).view('<u8').astype(np.uint64)
    h = np.zeros(words.shape[:-1], dtype=np.uint64)
    with np.errstate(over='ignore'):
        for j in range(words.shape[-1]):
            h = _mix64(h ^ words[..., j])
    return (h % np.uint64(cardinality)).astype(np.int64)


def cross_value(user_value, ad_value, cross_group: FeatureGroup) -> int:
    return int(cross_hash(np.array([user_value]), np.array([ad_value]), cross_group.cardinality)[0])


def _weighted_rows(ids, counts, table: EmbeddingTable):
    rows = table.lookup(ids)
    return rows * np.asarray(counts, dtype=np.float32)[:, None]


def sum_pool(ids, table: EmbeddingTable, counts=None) -> np.ndarray:
    """Element-wise sum of embedding rows, accumulated in multiset order."""
    ids = np.asarray(ids, dtype=np.int64)
    if counts is None:
        counts = np.ones(len(ids), dtype=np.int64)
    pooled = np.zeros(table.embed_dim, dtype=np.float32)
    for row in _weighted_rows(ids, counts, table):
        pooled += row
    return pooled


def _pooled_sums(column: PooledColumn, table: EmbeddingTable) -> np.ndarray:
    # same association order as sum_pool, vectorized across bags
    weighted = _weighted_rows(column.ids, column.counts, table)
    starts = column.offsets[:-1]
    lengths = np.diff(column.offsets)
    pooled = np.zeros((len(column), table.embed_dim), dtype=np.float32)
    for j in range(int(lengths.max()) if len(lengths) else 0):
        active = lengths > j
        pooled[active] += weighted[starts[active] + j]
    return pooled


def _value(features, group: FeatureGroup):
    try:
        return features[group.id]
    except KeyError:
        raise DatasetError(f'Missing value for group \'{group.id}\'') from None


def _check_id(value, group: FeatureGroup):
    if not 0 <= value < group.cardinality:
        raise FeatureRangeError(f'Id {value} for \'{group.id}\' outside [0, {group.cardinality})')
    return value


def _cross_source(schema, group, user: UserContext, ad: AdCandidate):
    user_group, ad_group = (schema.group(g) for g in group.source)
    return _value(user.features, user_group), _value(ad.features, ad_group)


def _resolve_groups(schema: FeatureSchema, groups):
    resolved = schema.restrict(groups)
    if groups is not None and not resolved:
        raise SchemaError('Empty feature group selection')
    return resolved


def build_batch_row(schema: FeatureSchema, tables: Mapping[str, EmbeddingTable],
                    user: UserContext, ads: Sequence[AdCandidate], groups=None) -> ColumnarBatch:
    """Row-major traversal: every feature of one ad before moving to the next ad."""
    resolved = _resolve_groups(schema, groups)
    group_ids = [g.id for g in resolved]
    check_tables(schema, tables, group_ids)
    batch = ColumnarBatch(size=len(ads), groups=group_ids)
    batch.ad_ids = np.fromiter((ad.ad_id for ad in ads), dtype=np.int64, count=len(ads))

    single = {g.id: [] for g in resolved if not g.pooled}
    bags = {g.id: [] for g in resolved if g.pooled}
    rows = {g.id: [] for g in resolved}
    for ad in ads:
        for group in resolved:
            table = tables[group.id]
            if group.side is Side.CROSS:
                user_value, ad_value = _cross_source(schema, group, user, ad)
                value = cross_value(user_value, ad_value, group)
            else:
                value = _value(user.features if group.side is Side.USER else ad.features, group)
            batch.lookup_counts[group.id] += 1
            if group.pooled:
                bag = list(value)
                bags[group.id].append(bag)
                ids = np.array([i for i, _ in bag], dtype=np.int64)
                counts = np.array([c for _, c in bag], dtype=np.int64)
                rows[group.id].append(sum_pool(ids, table, counts))
            else:
                single[group.id].append(_check_id(value, group))
                rows[group.id].append(table.weights[value])

    for group in resolved:
        if group.pooled:
            batch.pooled[group.id] = PooledColumn.from_bags(bags[group.id])
        else:
            batch.ids[group.id] = np.array(single[group.id], dtype=np.int64)
        batch.embeddings[group.id] = (
            np.stack(rows[group.id]).astype(np.float32, copy=False) if ads
            else np.zeros((0, group.embed_dim), dtype=np.float32))
    return batch


def build_batch_column(schema: FeatureSchema, tables: Mapping[str, EmbeddingTable],
                       user: UserContext, ads: Sequence[AdCandidate], groups=None) -> ColumnarBatch:
    """Column-major traversal: one feature group for all ads, user columns computed once."""
    resolved = _resolve_groups(schema, groups)
    group_ids = [g.id for g in resolved]
    check_tables(schema, tables, group_ids)
    n_ads = len(ads)
    batch = ColumnarBatch(size=n_ads, groups=group_ids)
    batch.ad_ids = np.fromiter((ad.ad_id for ad in ads), dtype=np.int64, count=n_ads)

    for group in resolved:
        table = tables[group.id]
        if n_ads == 0:
            batch.embeddings[group.id] = np.zeros((0, group.embed_dim), dtype=np.float32)
            if group.pooled:
                batch.pooled[group.id] = PooledColumn.from_bags([])
            else:
                batch.ids[group.id] = np.zeros(0, dtype=np.int64)
            continue

        if group.side is Side.USER:
            value = _value(user.features, group)
            batch.lookup_counts[group.id] += 1
            if group.pooled:
                bag = list(value)
                row = _pooled_sums(PooledColumn.from_bags([bag]), table)[0]
                batch.pooled[group.id] = PooledColumn.from_bags([bag] * n_ads)
            else:
                row = table.weights[_check_id(value, group)]
                batch.ids[group.id] = np.full(n_ads, value, dtype=np.int64)
            batch.embeddings[group.id] = np.repeat(row[None, :], n_ads, axis=0)
            continue

        batch.lookup_counts[group.id] += n_ads
        if group.side is Side.CROSS:
            user_group, ad_group = (schema.group(g) for g in group.source)
            ad_values = np.fromiter((_value(ad.features, ad_group) for ad in ads), dtype=np.int64, count=n_ads)
            ids = cross_hash(np.full(n_ads, _value(user.features, user_group), dtype=np.int64),
                             ad_values, group.cardinality)
        elif group.pooled:
            column = PooledColumn.from_bags([list(_value(ad.features, group)) for ad in ads])
            batch.pooled[group.id] = column
            batch.embeddings[group.id] = _pooled_sums(column, table)
            continue
        else:
            ids = np.fromiter((_value(ad.features, group) for ad in ads), dtype=np.int64, count=n_ads)
        batch.ids[group.id] = ids
        batch.embeddings[group.id] = table.lookup(ids)
    return batch


def encode_examples(schema: FeatureSchema, examples: Sequence[RawExample], groups=None) -> ColumnarBatch:
    """Id columns of logged examples (each with its own user), without lookups."""
    resolved = _resolve_groups(schema, groups)
    n = len(examples)
    batch = ColumnarBatch(size=n, groups=[g.id for g in resolved])
    batch.labels = np.fromiter((e.label for e in examples), dtype=np.int64, count=n)
    batch.user_ids = np.fromiter((e.user_id for e in examples), dtype=np.int64, count=n)
    batch.ad_ids = np.fromiter((e.ad_id for e in examples), dtype=np.int64, count=n)
    for group in resolved:
        if group.side is Side.CROSS:
            user_group, ad_group = group.source
            user_values = np.fromiter((e.features[user_group] for e in examples), dtype=np.int64, count=n)
            ad_values = np.fromiter((e.features[ad_group] for e in examples), dtype=np.int64, count=n)
            batch.ids[group.id] = cross_hash(user_values, ad_values, group.cardinality)
        elif group.pooled:
            batch.pooled[group.id] = PooledColumn.from_bags([e.features[group.id] for e in examples])
        else:
            batch.ids[group.id] = np.fromiter((e.features[group.id] for e in examples), dtype=np.int64, count=n)
    return batch


def lookup_batch(schema: FeatureSchema, tables: Mapping[str, EmbeddingTable], batch: ColumnarBatch):
    """Fills the embedding columns of an id-only batch."""
    check_tables(schema, tables, batch.groups)
    for group_id in batch.groups:
        table = tables[group_id]
        if group_id in batch.pooled:
            batch.embeddings[group_id] = _pooled_sums(batch.pooled[group_id], table)
        else:
            batch.embeddings[group_id] = table.lookup(batch.ids[group_id])
        batch.lookup_counts[group_id] += batch.size
    return batch


def concat_embeddings(batch: ColumnarBatch, selected_groups: Optional[Sequence[str]] = None) -> np.ndarray:
    """B x D_in matrix; column blocks follow the batch (schema) order."""
    if selected_groups is None:
        selected_groups = batch.groups
    selected = set(selected_groups)
    if not selected:
        raise SchemaError('Empty feature group selection')
    unknown = selected - set(batch.groups)
    if unknown:
        raise SchemaError(f'Groups not in batch: {sorted(unknown)}')
    blocks = [batch.embedding(g) for g in batch.groups if g in selected]
    return np.concatenate(blocks, axis=1).astype(np.float32, copy=False)
