# ===== IMPORTS =====
# === Thirdparty ===
import numpy as np
import pytest

# === Local ===
from coldrank.data.generator import GeneratorConfig, generate
from coldrank.features.schema import EmbeddingTable, FeatureGroup, FeatureSchema, Multiplicity, Side
from coldrank.models.cold import ColdModel
from coldrank.models.two_tower import TwoTowerModel
from coldrank.training.trainer import TrainConfig, train_batch


# ===== GLOBALS =====
TINY_GENERATOR = dict(
    seed=0, n_users=50, n_ads=40, n_examples=3000,
    user_buckets=4, ad_buckets=4, age_buckets=3, ad_categories=4,
    history_categories=5, history_length=2, noise_cardinality=6,
    embed_dim=4, base_logit=0.0,
)
TINY_HIDDEN = (16, 8)
TINY_TOWER = (8, 4)
N_TRAIN = 2400


# ===== FUNCTIONS =====
def tiny_generator(**overrides):
    return GeneratorConfig(**{**TINY_GENERATOR, **overrides})


def random_schema(rng, embed_dim=None):
    """Random schema with singles, pooled groups and crosses on every side."""
    def dim():
        return int(embed_dim or rng.integers(1, 6))

    groups = []
    n_user, n_ad = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    for i in range(n_user):
        groups.append(FeatureGroup(f'u{i}', Side.USER, int(rng.integers(1, 30)), embed_dim=dim()))
    groups.append(FeatureGroup('u_bag', Side.USER, int(rng.integers(1, 30)),
                               multiplicity=Multiplicity.MULTI_SUM_POOL, embed_dim=dim()))
    for i in range(n_ad):
        groups.append(FeatureGroup(f'a{i}', Side.AD, int(rng.integers(1, 30)), embed_dim=dim()))
    groups.append(FeatureGroup('a_bag', Side.AD, int(rng.integers(1, 30)),
                               multiplicity=Multiplicity.MULTI_SUM_POOL, embed_dim=dim()))
    for i in range(int(rng.integers(0, 3))):
        source = (f'u{rng.integers(n_user)}', f'a{rng.integers(n_ad)}')
        groups.append(FeatureGroup(f'x{i}', Side.CROSS, int(rng.integers(1, 100)),
                                   embed_dim=dim(), source=source))
    return FeatureSchema(groups)


def random_tables(schema, rng):
    return {g.id: EmbeddingTable(g.id, rng.normal(size=(g.cardinality, g.embed_dim)).astype(np.float32))
            for g in schema}


def random_features(schema, side, rng):
    features = {}
    for group in schema:
        if group.side is not side:
            continue
        if group.pooled:
            size = int(rng.integers(0, 5))
            features[group.id] = [(int(rng.integers(group.cardinality)), int(rng.integers(1, 4)))
                                  for _ in range(size)]
        else:
            features[group.id] = int(rng.integers(group.cardinality))
    return features


# ===== FIXTURES =====
@pytest.fixture(scope='session')
def tiny_data():
    """(schema, train, holdout, truth) of a small generated stream."""
    schema, stream, truth = generate(tiny_generator())
    examples = list(stream)
    return schema, examples[:N_TRAIN], examples[N_TRAIN:], truth


@pytest.fixture(scope='session')
def tiny_schema(tiny_data):
    return tiny_data[0]


@pytest.fixture
def cold_model(tiny_schema):
    return ColdModel(tiny_schema, hidden=TINY_HIDDEN, seed=0)


@pytest.fixture
def two_tower_model(tiny_schema):
    return TwoTowerModel(tiny_schema, tower=TINY_TOWER, seed=0)


@pytest.fixture(scope='session')
def train_config():
    return TrainConfig(learning_rate=1e-2, batch_size=64, epochs=2, seed=0)


@pytest.fixture(scope='session')
def trained_cold(tiny_data, train_config):
    """Shared trained snapshot; tests must clone before mutating it."""
    schema, train, _, _ = tiny_data
    return train_batch(ColdModel(schema, hidden=TINY_HIDDEN, seed=0), train, train_config)


@pytest.fixture(scope='session')
def request_pairs(tiny_data):
    """A few (user, candidates) pairs drawn from the planted population."""
    _, _, _, truth = tiny_data
    rng = np.random.default_rng(3)
    pairs = []
    for u in rng.integers(truth.n_users, size=5):
        ads = rng.choice(truth.n_ads, size=25, replace=False)
        pairs.append((truth.user_context(u), [truth.ad_candidate(a) for a in ads]))
    return pairs
