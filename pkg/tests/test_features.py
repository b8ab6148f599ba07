import numpy as np
import pytest

from conftest import random_features, random_schema, random_tables

from coldrank.exceptions import DatasetError, FeatureRangeError, SchemaError
from coldrank.features.batch import (build_batch_column, build_batch_row, concat_embeddings, cross_hash,
                                     cross_value, encode_examples, lookup_batch, sum_pool)
from coldrank.features.dataset import (AdCandidate, RawExample, UserContext, conform_features, read_dataset,
                                       read_schema, write_dataset)
from coldrank.features.schema import EmbeddingTable, FeatureGroup, FeatureSchema, Multiplicity, Side


def _schema():
    return FeatureSchema([
        FeatureGroup('user', Side.USER, 10, embed_dim=3),
        FeatureGroup('history', Side.USER, 6, multiplicity=Multiplicity.MULTI_SUM_POOL, embed_dim=2),
        FeatureGroup('ad', Side.AD, 8, embed_dim=4),
        FeatureGroup('user_x_ad', Side.CROSS, 50, embed_dim=5, source=('user', 'ad')),
    ])


# ===== schema =====
def test_schema_rejects_duplicates_and_bad_crosses():
    user = FeatureGroup('u', Side.USER, 3)
    with pytest.raises(SchemaError):
        FeatureSchema([user, user])
    with pytest.raises(SchemaError):
        FeatureSchema([user, FeatureGroup('x', Side.CROSS, 5, source=('u', 'missing'))])
    bag = FeatureGroup('bag', Side.USER, 3, multiplicity=Multiplicity.MULTI_SUM_POOL)
    ad = FeatureGroup('a', Side.AD, 3)
    with pytest.raises(SchemaError):
        FeatureSchema([bag, ad, FeatureGroup('x', Side.CROSS, 5, source=('bag', 'a'))])
    with pytest.raises(SchemaError):
        FeatureGroup('x', Side.CROSS, 5)
    with pytest.raises(SchemaError):
        FeatureGroup('z', Side.USER, 0)


def test_schema_restrict_follows_schema_order():
    schema = _schema()
    assert [g.id for g in schema.restrict(['user_x_ad', 'user'])] == ['user', 'user_x_ad']
    assert schema.input_width(['ad', 'user']) == 7
    assert schema.input_width() == 14
    with pytest.raises(SchemaError):
        schema.restrict(['nope'])


def test_schema_descriptor_and_digest():
    schema = _schema()
    again = FeatureSchema.from_dict(schema.to_dict())
    assert again == schema
    assert again.digest() == schema.digest()
    other = FeatureSchema(list(schema.groups[:3]))
    assert other.digest() != schema.digest()


# ===== dataset =====
def test_conform_features_reduces_ids_and_checks_presence():
    schema = _schema()
    conformed = conform_features(schema, {'user': 13, 'history': [[7, 2], 1], 'ad': 3})
    assert conformed == {'user': 3, 'history': [(1, 2), (1, 1)], 'ad': 3}
    with pytest.raises(DatasetError):
        conform_features(schema, {'user': 1, 'history': []})
    with pytest.raises(DatasetError):
        conform_features(schema, {'user': 1, 'history': [], 'ad': 1, 'user_x_ad': 4})
    with pytest.raises(DatasetError):
        conform_features(schema, {'user': [1], 'history': [], 'ad': 1})
    assert conform_features(schema, {'ad': 9}, sides=(Side.AD,)) == {'ad': 1}


def test_dataset_file_round_trip(tmp_path):
    schema = _schema()
    examples = [
        RawExample(1, 2, {'user': 1, 'history': [(0, 1), (5, 3)], 'ad': 2}, 1, 1.5, 0),
        RawExample(4, 7, {'user': 4, 'history': [], 'ad': 7}, 0, 0.5, 1),
    ]
    path = tmp_path / 'data.jsonl'
    assert write_dataset(path, schema, examples) == 2
    assert read_schema(path) == schema
    loaded_schema, loaded = read_dataset(path)
    assert loaded_schema == schema
    assert loaded == examples


def test_dataset_rejects_bad_files(tmp_path):
    path = tmp_path / 'bad.jsonl'
    path.write_text('{"format": "something-else"}\n')
    with pytest.raises(DatasetError):
        read_dataset(path)
    write_dataset(path, _schema(), [])
    with path.open('a') as out_f:
        out_f.write('{"user_id": 1}\n')
    with pytest.raises(DatasetError):
        read_dataset(path)


def test_entity_dicts():
    user = UserContext(3, {'user': 3, 'history': [(1, 2)]})
    assert UserContext.from_dict(user.to_dict()) == user
    ad = AdCandidate(5, 2.5, {'ad': 5})
    assert AdCandidate.from_dict(ad.to_dict()) == ad


# ===== batch =====
def test_cross_hash_is_deterministic_and_in_range():
    rng = np.random.default_rng(0)
    u = rng.integers(0, 1000, size=500)
    a = rng.integers(0, 1000, size=500)
    ids = cross_hash(u, a, 37)
    np.testing.assert_array_equal(ids, cross_hash(u, a, 37))
    assert ids.min() >= 0 and ids.max() < 37
    group = _schema().group('user_x_ad')
    assert cross_value(int(u[0]), int(a[0]), group) == cross_hash(u[:1], a[:1], 50)[0]


def test_cross_hash_pinned_values():
    # splitmix64 finalizer folded over the little-endian words (user, ad)
    u = np.array([0, 3, 123456, 7])
    a = np.array([0, 5, 789, 1_000_000])
    np.testing.assert_array_equal(cross_hash(u, a, 1000), [55, 639, 223, 715])
    np.testing.assert_array_equal(cross_hash(u.astype(np.int32), a.astype(np.int32), 1000), [55, 639, 223, 715])
    assert cross_hash(3, 5, 1000) == 639


def test_cross_hash_spreads_pairs_evenly():
    rng = np.random.default_rng(0)
    u = rng.integers(0, 2**31, size=100_000)
    a = rng.integers(0, 2**31, size=100_000)
    load = np.bincount(cross_hash(u, a, 1000), minlength=1000)
    assert load.max() <= 3 * load.mean()


def test_sum_pool_weights_by_count():
    table = EmbeddingTable('t', np.arange(12, dtype=np.float32).reshape(4, 3))
    np.testing.assert_array_equal(sum_pool([1, 3], table, [2, 1]), 2 * table.weights[1] + table.weights[3])
    np.testing.assert_array_equal(sum_pool([], table), np.zeros(3, dtype=np.float32))


@pytest.mark.parametrize('seed', range(5))
def test_sum_pool_is_additive_over_disjoint_bags(seed):
    rng = np.random.default_rng(seed)
    # integer-valued rows keep float32 sums exact under any association order
    table = EmbeddingTable('t', rng.integers(-8, 8, size=(20, 4)).astype(np.float32))
    ids = rng.integers(20, size=12)
    counts = rng.integers(1, 4, size=12)
    left, right = sum_pool(ids[:5], table, counts[:5]), sum_pool(ids[5:], table, counts[5:])
    np.testing.assert_array_equal(sum_pool(ids, table, counts), left + right)
    with pytest.raises(FeatureRangeError):
        sum_pool([4], table)


def _assert_batches_equal(row, column, schema):
    assert row.groups == column.groups
    for group in schema.restrict(row.groups):
        if group.pooled:
            for attr in ('offsets', 'ids', 'counts'):
                np.testing.assert_array_equal(getattr(row.pooled[group.id], attr),
                                              getattr(column.pooled[group.id], attr))
            np.testing.assert_allclose(row.embeddings[group.id], column.embeddings[group.id], rtol=1e-6)
        else:
            np.testing.assert_array_equal(row.ids[group.id], column.ids[group.id])
            np.testing.assert_array_equal(row.embeddings[group.id], column.embeddings[group.id])


def _fuzz_row_column(n_batches, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n_batches):
        schema = random_schema(rng)
        tables = random_tables(schema, rng)
        user = UserContext(0, random_features(schema, Side.USER, rng))
        ads = [AdCandidate(i, 1.0, random_features(schema, Side.AD, rng)) for i in range(int(rng.integers(0, 12)))]
        row = build_batch_row(schema, tables, user, ads)
        column = build_batch_column(schema, tables, user, ads)
        _assert_batches_equal(row, column, schema)


def test_row_and_column_paths_agree():
    _fuzz_row_column(200, seed=0)


@pytest.mark.slow
def test_row_and_column_paths_agree_fuzzed():
    _fuzz_row_column(10_000, seed=1)


def test_column_path_computes_user_features_once():
    schema = _schema()
    rng = np.random.default_rng(0)
    tables = random_tables(schema, rng)
    user = UserContext(0, {'user': 2, 'history': [(1, 1)]})
    ads = [AdCandidate(i, 1.0, {'ad': i}) for i in range(5)]
    column = build_batch_column(schema, tables, user, ads)
    row = build_batch_row(schema, tables, user, ads)
    assert column.lookup_counts['user'] == 1
    assert column.lookup_counts['ad'] == 5
    assert row.lookup_counts['user'] == 5


def test_batch_rejects_out_of_range_ids():
    schema = _schema()
    tables = random_tables(schema, np.random.default_rng(0))
    user = UserContext(0, {'user': 11, 'history': []})
    with pytest.raises(FeatureRangeError):
        build_batch_column(schema, tables, user, [AdCandidate(0, 1.0, {'ad': 1})])
    with pytest.raises(FeatureRangeError):
        build_batch_row(schema, tables, user, [AdCandidate(0, 1.0, {'ad': 1})])


def test_concat_embeddings_width_and_order():
    rng = np.random.default_rng(5)
    for _ in range(50):
        schema = random_schema(rng)
        tables = random_tables(schema, rng)
        user = UserContext(0, random_features(schema, Side.USER, rng))
        ads = [AdCandidate(i, 1.0, random_features(schema, Side.AD, rng)) for i in range(3)]
        batch = build_batch_column(schema, tables, user, ads)
        chosen = list(rng.choice(schema.ids, size=int(rng.integers(1, schema.M + 1)), replace=False))
        matrix = concat_embeddings(batch, chosen)
        assert matrix.shape == (3, schema.input_width(chosen))
        np.testing.assert_array_equal(matrix, concat_embeddings(batch, list(reversed(chosen))))
        first = schema.restrict(chosen)[0]
        np.testing.assert_array_equal(matrix[:, :first.embed_dim], batch.embeddings[first.id])
    with pytest.raises(SchemaError):
        concat_embeddings(batch, [])


def test_encode_then_lookup_matches_column_path():
    schema = _schema()
    tables = random_tables(schema, np.random.default_rng(2))
    examples = [RawExample(0, a, {'user': 4, 'history': [(2, 3)], 'ad': a}, a % 2, 1.0, a) for a in range(6)]
    encoded = lookup_batch(schema, tables, encode_examples(schema, examples))
    user = examples[0].user_context(schema)
    ads = [e.ad_candidate(schema) for e in examples]
    column = build_batch_column(schema, tables, user, ads)
    np.testing.assert_array_equal(concat_embeddings(encoded), concat_embeddings(column))
    np.testing.assert_array_equal(encoded.labels, [0, 1, 0, 1, 0, 1])
