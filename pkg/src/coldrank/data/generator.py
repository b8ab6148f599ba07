# ===== IMPORTS =====
# === Standard library ===
from dataclasses import asdict, dataclass, fields
import json
import logging
import pathlib
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

# === Thirdparty ===
import numpy as np

# === Local ===
import coldrank
from coldrank.exceptions import ConfigError, DatasetError, FeatureRangeError
from coldrank.features.dataset import AdCandidate, RawExample, UserContext
from coldrank.features.schema import FeatureGroup, FeatureSchema, Multiplicity, Side
from coldrank.metrics import expected_auc
from coldrank.numerics import sigmoid


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
TRUTH_FORMAT = 'coldrank-ground-truth'
CHUNK_SIZE = 8192


# ===== CLASSES =====
@dataclass
class GeneratorConfig:
    seed: int = 0
    n_users: int = 2000
    n_ads: int = 500
    n_examples: int = 200000
    user_buckets: int = 32
    ad_buckets: int = 32
    age_buckets: int = 10
    ad_categories: int = 16
    history_categories: int = 16
    history_length: int = 4
    noise_cardinality: int = 50
    embed_dim: int = 16
    base_logit: float = -1.0
    beta_user: float = 0.5
    beta_ad: float = 0.5
    beta_cross: float = 2.0
    beta_id: float = 0.3
    noise_group: bool = True
    # example index at which the label function changes, None for a stationary stream
    shift_at: Optional[int] = None
    shift_magnitude: float = 0.0
    bid_mu: float = 0.0
    bid_sigma: float = 0.5
    stress: bool = False
    stress_count: int = 2 ** 22

    def __post_init__(self):
        if self.n_users < 1 or self.n_ads < 1:
            raise ConfigError(f'Degenerate population: {self.n_users} users, {self.n_ads} ads')
        if self.n_examples < 0:
            raise ConfigError('n_examples must be non-negative')
        if min(self.user_buckets, self.ad_buckets, self.age_buckets, self.ad_categories,
               self.history_categories, self.noise_cardinality) < 1:
            raise ConfigError('Every latent vocabulary needs at least one value')
        if self.history_length < 1:
            raise ConfigError('history_length must be at least 1')
        if self.bid_sigma < 0:
            raise ConfigError('bid_sigma must be non-negative')

    @classmethod
    def from_args(cls, args: Dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in args.items() if k in known})


@dataclass
class GroundTruth:
    """Planted latent structure; the true pCTR of any (user, ad) at any time."""
    config: GeneratorConfig
    user_bucket: np.ndarray
    user_age: np.ndarray
    user_noise: np.ndarray
    history_ids: np.ndarray
    history_counts: np.ndarray
    ad_bucket: np.ndarray
    ad_category: np.ndarray
    ad_bid: np.ndarray
    w_user_id: np.ndarray
    w_user_bucket: np.ndarray
    w_age: np.ndarray
    w_history: np.ndarray
    w_ad_id: np.ndarray
    w_ad_bucket: np.ndarray
    w_category: np.ndarray
    age_category: np.ndarray
    interaction: np.ndarray
    shift: np.ndarray

    @property
    def n_users(self):
        return len(self.user_bucket)

    @property
    def n_ads(self):
        return len(self.ad_bucket)

    def _check_ids(self, user_ids, ad_ids):
        user_ids = np.asarray(user_ids, dtype=np.int64)
        ad_ids = np.asarray(ad_ids, dtype=np.int64)
        if user_ids.size and (user_ids.min() < 0 or user_ids.max() >= self.n_users):
            raise FeatureRangeError(f'Unknown user id in {user_ids.min()}..{user_ids.max()}')
        if ad_ids.size and (ad_ids.min() < 0 or ad_ids.max() >= self.n_ads):
            raise FeatureRangeError(f'Unknown ad id in {ad_ids.min()}..{ad_ids.max()}')
        return user_ids, ad_ids

    def user_term(self, user_ids):
        cfg = self.config
        counts = self.history_counts[user_ids].astype(np.float64)
        history = (self.w_history[self.history_ids[user_ids]] * counts).sum(axis=1) / counts.sum(axis=1)
        return (cfg.beta_user * (self.w_user_bucket[self.user_bucket[user_ids]]
                                 + self.w_age[self.user_age[user_ids]] + history)
                + cfg.beta_id * self.w_user_id[user_ids])

    def ad_term(self, ad_ids):
        cfg = self.config
        return (cfg.beta_ad * (self.w_ad_bucket[self.ad_bucket[ad_ids]] + self.w_category[self.ad_category[ad_ids]])
                + cfg.beta_id * self.w_ad_id[ad_ids])

    def logit(self, user_ids, ad_ids, timestamps=None):
        user_ids, ad_ids = self._check_ids(user_ids, ad_ids)
        cfg = self.config
        ub, ab = self.user_bucket[user_ids], self.ad_bucket[ad_ids]
        z = (cfg.base_logit + self.user_term(user_ids) + self.ad_term(ad_ids)
             + cfg.beta_cross * self.interaction[ub, ab]
             + self.age_category[self.user_age[user_ids], self.ad_category[ad_ids]])
        if timestamps is not None and cfg.shift_at is not None:
            shifted = np.asarray(timestamps) >= cfg.shift_at
            z = z + shifted * cfg.shift_magnitude * self.shift[ub, ab]
        return z

    def pctr(self, user_ids, ad_ids, timestamps=None) -> np.ndarray:
        return sigmoid(np.asarray(self.logit(user_ids, ad_ids, timestamps), dtype=np.float64))

    def pctr_for(self, user: UserContext, ads: Sequence[AdCandidate], timestamp=None) -> np.ndarray:
        ad_ids = np.array([ad.ad_id for ad in ads], dtype=np.int64)
        user_ids = np.full(len(ads), user.user_id, dtype=np.int64)
        stamps = None if timestamp is None else np.full(len(ads), timestamp)
        return self.pctr(user_ids, ad_ids, stamps)

    def user_features(self, u) -> Dict:
        features = {
            'user_id': int(u),
            'user_bucket': int(self.user_bucket[u]),
            'user_age': int(self.user_age[u]),
            'user_history': [(int(i), int(c)) for i, c in zip(self.history_ids[u], self.history_counts[u])],
        }
        if self.config.noise_group:
            features['user_noise'] = int(self.user_noise[u])
        return features

    def ad_features(self, a) -> Dict:
        return {
            'ad_id': int(a),
            'ad_bucket': int(self.ad_bucket[a]),
            'ad_category': int(self.ad_category[a]),
        }

    def user_context(self, u) -> UserContext:
        self._check_ids([u], [])
        return UserContext(int(u), self.user_features(u))

    def ad_candidate(self, a) -> AdCandidate:
        self._check_ids([], [a])
        return AdCandidate(int(a), float(self.ad_bid[a]), self.ad_features(a))

    def bucket_logits(self, shifted=False) -> np.ndarray:
        """Logit contribution of the (user bucket, ad bucket) pair, main effects included."""
        cfg = self.config
        z = (cfg.beta_user * self.w_user_bucket[:, None] + cfg.beta_ad * self.w_ad_bucket[None, :]
             + cfg.beta_cross * self.interaction)
        if shifted:
            z = z + cfg.shift_magnitude * self.shift
        return z

    def to_dict(self):
        document = {'format': TRUTH_FORMAT, 'config': asdict(self.config)}
        for f in fields(self):
            if f.name != 'config':
                document[f.name] = getattr(self, f.name).tolist()
        return document

    @classmethod
    def from_dict(cls, document):
        if document.get('format') != TRUTH_FORMAT:
            raise DatasetError(f'Not a {TRUTH_FORMAT} document')
        arrays = {}
        for f in fields(cls):
            if f.name == 'config':
                continue
            value = np.asarray(document[f.name])
            arrays[f.name] = value.astype(np.int64) if value.dtype.kind in 'iu' else value.astype(np.float64)
        return cls(config=GeneratorConfig(**document['config']), **arrays)


@dataclass
class FactorizedFit:
    rank: int
    approx: np.ndarray
    relative_residual: float
    truth_auc: float
    fitted_auc: float

    @property
    def bayes_gap(self):
        return self.truth_auc - self.fitted_auc


# ===== FUNCTIONS =====
def build_schema(config: GeneratorConfig) -> FeatureSchema:
    k = config.embed_dim
    groups = [
        FeatureGroup('user_id', Side.USER, config.n_users, embed_dim=k),
        FeatureGroup('user_bucket', Side.USER, config.user_buckets, embed_dim=k),
        FeatureGroup('user_age', Side.USER, config.age_buckets, embed_dim=k),
    ]
    if config.noise_group:
        groups.append(FeatureGroup('user_noise', Side.USER, config.noise_cardinality, embed_dim=k))
    groups += [
        FeatureGroup('user_history', Side.USER, config.history_categories,
                     multiplicity=Multiplicity.MULTI_SUM_POOL, embed_dim=k),
        FeatureGroup('ad_id', Side.AD, config.n_ads, embed_dim=k),
        FeatureGroup('ad_bucket', Side.AD, config.ad_buckets, embed_dim=k),
        FeatureGroup('ad_category', Side.AD, config.ad_categories, embed_dim=k),
        FeatureGroup('bucket_cross', Side.CROSS, 4 * config.user_buckets * config.ad_buckets,
                     embed_dim=k, source=('user_bucket', 'ad_bucket')),
        FeatureGroup('age_category_cross', Side.CROSS, 2 * config.age_buckets * config.ad_categories,
                     embed_dim=k, source=('user_age', 'ad_category')),
    ]
    return FeatureSchema(groups)


def build_truth(config: GeneratorConfig, rng: np.random.Generator) -> GroundTruth:
    cfg = config
    history_ids = np.stack([rng.choice(cfg.history_categories, size=cfg.history_length,
                                       replace=cfg.history_length > cfg.history_categories)
                            for _ in range(cfg.n_users)])
    history_counts = rng.integers(1, 4, size=(cfg.n_users, cfg.history_length))
    if cfg.stress:
        history_counts[:, 0] *= cfg.stress_count
    return GroundTruth(
        config=cfg,
        user_bucket=rng.integers(cfg.user_buckets, size=cfg.n_users),
        user_age=rng.integers(cfg.age_buckets, size=cfg.n_users),
        user_noise=rng.integers(cfg.noise_cardinality, size=cfg.n_users),
        history_ids=history_ids.astype(np.int64),
        history_counts=history_counts.astype(np.int64),
        ad_bucket=rng.integers(cfg.ad_buckets, size=cfg.n_ads),
        ad_category=rng.integers(cfg.ad_categories, size=cfg.n_ads),
        ad_bid=rng.lognormal(cfg.bid_mu, cfg.bid_sigma, size=cfg.n_ads),
        w_user_id=rng.normal(size=cfg.n_users),
        w_user_bucket=rng.normal(size=cfg.user_buckets),
        w_age=rng.normal(size=cfg.age_buckets),
        w_history=rng.normal(size=cfg.history_categories),
        w_ad_id=rng.normal(size=cfg.n_ads),
        w_ad_bucket=rng.normal(size=cfg.ad_buckets),
        w_category=rng.normal(size=cfg.ad_categories),
        age_category=0.5 * rng.normal(size=(cfg.age_buckets, cfg.ad_categories)),
        # XOR-like sign pattern: full rank, no low-rank factorization
        interaction=rng.choice([-1.0, 1.0], size=(cfg.user_buckets, cfg.ad_buckets)),
        shift=rng.choice([-1.0, 1.0], size=(cfg.user_buckets, cfg.ad_buckets)),
    )


def _stream(truth: GroundTruth, rng: np.random.Generator) -> Iterator[RawExample]:
    cfg = truth.config
    for start in range(0, cfg.n_examples, CHUNK_SIZE):
        stop = min(start + CHUNK_SIZE, cfg.n_examples)
        users = rng.integers(cfg.n_users, size=stop - start)
        ads = rng.integers(cfg.n_ads, size=stop - start)
        stamps = np.arange(start, stop)
        labels = (rng.random(stop - start) < truth.pctr(users, ads, stamps)).astype(np.int64)
        for u, a, label, t in zip(users, ads, labels, stamps):
            features = truth.user_features(u)
            features.update(truth.ad_features(a))
            yield RawExample(int(u), int(a), features, int(label), float(truth.ad_bid[a]), int(t))


def generate(config: GeneratorConfig) -> Tuple[FeatureSchema, Iterator[RawExample], GroundTruth]:
    """Schema, a lazily generated timestamped example stream and the planted truth."""
    truth_seq, stream_seq = np.random.SeedSequence(config.seed).spawn(2)
    truth = build_truth(config, np.random.default_rng(truth_seq))
    return build_schema(config), _stream(truth, np.random.default_rng(stream_seq)), truth


def oracle_pctr(truth: GroundTruth, user_id, ad_id, timestamp=None) -> float:
    stamps = None if timestamp is None else [timestamp]
    return float(truth.pctr([user_id], [ad_id], stamps)[0])


def factorized_fit(truth: GroundTruth, rank: int, shifted=False) -> FactorizedFit:
    """Best rank-limited approximation of the bucket-level logit matrix (truncated SVD).

    AUCs are expected AUCs over uniformly drawn bucket pairs with labels drawn
    from the true pCTR, so the gap bounds what a factorized scorer can reach.
    """
    if rank < 1:
        raise ConfigError('rank must be at least 1')
    z = truth.bucket_logits(shifted)
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    rank = min(rank, len(s))
    approx = (u[:, :rank] * s[:rank]) @ vt[:rank]
    base = truth.config.base_logit
    p_true = sigmoid((z + base).ravel())
    return FactorizedFit(
        rank=rank,
        approx=approx,
        relative_residual=float(np.linalg.norm(z - approx) / np.linalg.norm(z)),
        truth_auc=expected_auc(p_true, p_true),
        fitted_auc=expected_auc(sigmoid((approx + base).ravel()), p_true),
    )


def write_truth(path, truth: GroundTruth):
    path = pathlib.Path(path)
    coldrank.utils.mkdirs(files=[path])
    logger.info('Saving ground truth into \'%s\'', path)
    path.write_text(json.dumps(truth.to_dict()))


def read_truth(path) -> GroundTruth:
    logger.info('Loading ground truth from \'%s\'', path)
    return GroundTruth.from_dict(json.loads(pathlib.Path(path).read_text()))


def sample_requests(truth: GroundTruth, n_requests: int, n_candidates: int,
                    seed: int = 0) -> List[Tuple[UserContext, List[AdCandidate]]]:
    """Random users, each with a distinct-ad candidate set."""
    if n_candidates > truth.n_ads:
        raise ConfigError(f'{n_candidates} candidates requested but only {truth.n_ads} ads exist')
    rng = np.random.default_rng(seed)
    requests = []
    for u in rng.integers(truth.n_users, size=n_requests):
        ads = rng.choice(truth.n_ads, size=n_candidates, replace=False)
        requests.append((truth.user_context(u), [truth.ad_candidate(a) for a in ads]))
    return requests
