# ===== IMPORTS =====
# === Standard library ===
from dataclasses import dataclass, field
import json
import logging
import pathlib
from typing import Dict, Iterable, Iterator, List, Tuple, Union

# === Local ===
import coldrank
from coldrank.exceptions import DatasetError
from coldrank.features.schema import FeatureSchema, Side


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
DATASET_FORMAT = 'coldrank-dataset'
DATASET_VERSION = 1

# single id, or a multiset given as (id, count) pairs
FeatureValue = Union[int, List[Tuple[int, int]]]


# ===== CLASSES =====
@dataclass
class UserContext:
    user_id: int
    features: Dict[str, FeatureValue] = field(default_factory=dict)

    def to_dict(self):
        return {'user_id': self.user_id, 'features': _dump_features(self.features)}

    @classmethod
    def from_dict(cls, record):
        return cls(int(record['user_id']), _load_features(record.get('features', {})))


@dataclass
class AdCandidate:
    ad_id: int
    bid: float = 1.0
    features: Dict[str, FeatureValue] = field(default_factory=dict)

    def to_dict(self):
        return {'ad_id': self.ad_id, 'bid': self.bid, 'features': _dump_features(self.features)}

    @classmethod
    def from_dict(cls, record):
        return cls(int(record['ad_id']), float(record.get('bid', 1.0)),
                   _load_features(record.get('features', {})))


@dataclass
class RawExample:
    user_id: int
    ad_id: int
    features: Dict[str, FeatureValue]
    label: int
    bid: float
    timestamp: int

    def user_context(self, schema: FeatureSchema) -> UserContext:
        return UserContext(self.user_id, {g.id: self.features[g.id] for g in schema.user_groups})

    def ad_candidate(self, schema: FeatureSchema) -> AdCandidate:
        return AdCandidate(self.ad_id, self.bid, {g.id: self.features[g.id] for g in schema.ad_groups})

    def to_dict(self):
        return {
            'user_id': self.user_id,
            'ad_id': self.ad_id,
            'features': _dump_features(self.features),
            'label': self.label,
            'bid': self.bid,
            'timestamp': self.timestamp,
        }

    @classmethod
    def from_dict(cls, record):
        try:
            return cls(
                user_id=int(record['user_id']),
                ad_id=int(record['ad_id']),
                features=_load_features(record['features']),
                label=int(record['label']),
                bid=float(record['bid']),
                timestamp=int(record['timestamp']),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f'Malformed record: {exc}') from exc


# ===== FUNCTIONS =====
def normalize_pooled(value) -> List[Tuple[int, int]]:
    """Multiset as (id, count) pairs; bare ids count once."""
    pairs = []
    for item in value:
        if isinstance(item, (list, tuple)):
            item_id, count = item
        else:
            item_id, count = item, 1
        if int(count) < 0:
            raise DatasetError(f'Negative multiset count {count}')
        pairs.append((int(item_id), int(count)))
    return pairs


def _dump_features(features):
    return {k: ([list(p) for p in v] if isinstance(v, list) else v) for k, v in features.items()}


def _load_features(features):
    return {k: (normalize_pooled(v) if isinstance(v, list) else int(v)) for k, v in features.items()}


def conform_features(schema: FeatureSchema, features, sides=(Side.USER, Side.AD)):
    """Checks presence of every non-cross group and reduces ids modulo cardinality."""
    conformed = {}
    for group in schema.groups:
        if group.side is Side.CROSS:
            if group.id in features:
                raise DatasetError(f'Cross feature \'{group.id}\' must not be stored, it is always computed')
            continue
        if group.side not in sides:
            continue
        if group.id not in features:
            raise DatasetError(f'Missing value for group \'{group.id}\'')
        value = features[group.id]
        if group.pooled:
            if not isinstance(value, list):
                raise DatasetError(f'Group \'{group.id}\' expects a multiset')
            conformed[group.id] = [(i % group.cardinality, c) for i, c in normalize_pooled(value)]
        else:
            if isinstance(value, list):
                raise DatasetError(f'Group \'{group.id}\' expects a single id')
            conformed[group.id] = int(value) % group.cardinality
    return conformed


def conform_example(schema: FeatureSchema, example: RawExample) -> RawExample:
    if example.label not in (0, 1):
        raise DatasetError(f'Label must be 0 or 1, got {example.label}')
    if example.bid < 0:
        raise DatasetError(f'Bid must be non-negative, got {example.bid}')
    example.features = conform_features(schema, example.features)
    return example


def write_dataset(path, schema: FeatureSchema, examples: Iterable[RawExample]):
    path = pathlib.Path(path)
    coldrank.utils.mkdirs(files=[path])
    logger.info('Saving dataset into \'%s\'', path)
    header = {'format': DATASET_FORMAT, 'version': DATASET_VERSION, 'schema': schema.to_dict()}
    n_records = 0
    with path.open('w', encoding='utf8') as out_f:
        out_f.write(json.dumps(header, sort_keys=True) + '\n')
        for example in examples:
            out_f.write(json.dumps(example.to_dict(), sort_keys=True) + '\n')
            n_records += 1
    logger.info('Saved %d records', n_records)
    return n_records


def read_schema(path) -> FeatureSchema:
    with pathlib.Path(path).open(encoding='utf8') as in_f:
        return _parse_header(in_f.readline(), path)


def _parse_header(line, path):
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f'\'{path}\' has no JSON schema header: {exc}') from exc
    if header.get('format') != DATASET_FORMAT:
        raise DatasetError(f'\'{path}\' is not a {DATASET_FORMAT} file')
    if header.get('version') != DATASET_VERSION:
        raise DatasetError(f'\'{path}\' has unsupported version {header.get("version")}')
    return FeatureSchema.from_dict(header['schema'])


def iter_dataset(path) -> Iterator[RawExample]:
    """Streams validated records; the schema is read from the header line."""
    path = pathlib.Path(path)
    with path.open(encoding='utf8') as in_f:
        schema = _parse_header(in_f.readline(), path)
        for line_no, line in enumerate(in_f, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f'{path}:{line_no}: {exc}') from exc
            yield conform_example(schema, RawExample.from_dict(record))


def read_dataset(path) -> Tuple[FeatureSchema, List[RawExample]]:
    logger.info('Loading dataset from \'%s\'', path)
    schema = read_schema(path)
    examples = list(iter_dataset(path))
    logger.info('Loaded %d records with %d feature groups', len(examples), schema.M)
    return schema, examples
