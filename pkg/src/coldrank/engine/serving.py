# ===== IMPORTS =====
# === Standard library ===
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, fields
import logging
from typing import Dict, List, Optional, Sequence

# === Thirdparty ===
import numpy as np

# === Local ===
from coldrank.exceptions import ConfigError, DatasetError
from coldrank.features.dataset import AdCandidate, UserContext
from coldrank.metrics import ecpm, ecpm_order


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
DEFAULT_CHUNK_SIZE = 300


# ===== CLASSES =====
@dataclass
class FrontEndQuery:
    request_id: str
    user: UserContext
    candidates: List[AdCandidate]
    n: int

    def __post_init__(self):
        ids = [ad.ad_id for ad in self.candidates]
        if len(set(ids)) != len(ids):
            raise DatasetError(f'Query {self.request_id} has duplicate candidate ids')
        if not 1 <= self.n <= len(self.candidates):
            raise DatasetError(
                f'Query {self.request_id} asks for {self.n} winners out of {len(self.candidates)} candidates')


@dataclass
class SplitPlan:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    workers: int = 1

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError(f'chunk_size must be at least 1, got {self.chunk_size}')
        if self.workers < 1:
            raise ConfigError(f'workers must be at least 1, got {self.workers}')

    @classmethod
    def from_args(cls, args: Dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in args.items() if k in known})

    def chunks(self, n_candidates):
        return [(lo, min(lo + self.chunk_size, n_candidates)) for lo in range(0, n_candidates, self.chunk_size)]


@dataclass
class Winner:
    ad_id: int
    pctr: float
    ecpm: float

    def to_dict(self):
        return {'ad_id': self.ad_id, 'pctr': self.pctr, 'ecpm': self.ecpm}


@dataclass
class ScoredQuery:
    request_id: str
    version: int
    pctr: np.ndarray
    winners: List[Winner]

    def to_dict(self):
        return {'version': self.version, 'winners': [w.to_dict() for w in self.winners]}


# ===== FUNCTIONS =====
def split_and_score(query: FrontEndQuery, model, plan: SplitPlan, executor: Optional[Executor] = None,
                    path='column', precision=None) -> ScoredQuery:
    """Scores candidate chunks independently, merges by position and picks top-N by eCPM.

    `model` is one snapshot for the whole query; chunks may finish in any order.
    """
    candidates = query.candidates
    spans = plan.chunks(len(candidates))

    def score_chunk(span):
        lo, hi = span
        return span, model.score(query.user, candidates[lo:hi], path=path, precision=precision)

    pctr = np.empty(len(candidates), dtype=np.float64)
    own_executor = None
    if executor is None and plan.workers > 1 and len(spans) > 1:
        executor = own_executor = ThreadPoolExecutor(max_workers=plan.workers)
    try:
        results = executor.map(score_chunk, spans) if executor is not None else map(score_chunk, spans)
        for (lo, hi), scores in results:
            pctr[lo:hi] = scores
    finally:
        if own_executor is not None:
            own_executor.shutdown()

    ad_ids = np.fromiter((ad.ad_id for ad in candidates), dtype=np.int64, count=len(candidates))
    bids = np.fromiter((ad.bid for ad in candidates), dtype=np.float64, count=len(candidates))
    order = ecpm_order(ad_ids, pctr, bids)[:query.n]
    winners = [Winner(int(ad_ids[i]), float(pctr[i]), float(ecpm(pctr[i], bids[i]))) for i in order]
    logger.debug('Query %s: %d candidates in %d chunks', query.request_id, len(candidates), len(spans))
    return ScoredQuery(query.request_id, model.version, pctr, winners)


def make_queries(requests: Sequence, n: int, prefix='q') -> List[FrontEndQuery]:
    return [FrontEndQuery(f'{prefix}{i}', user, list(ads), min(n, len(ads)))
            for i, (user, ads) in enumerate(requests)]
