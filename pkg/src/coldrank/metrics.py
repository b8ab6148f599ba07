# ===== IMPORTS =====
# === Standard library ===
from dataclasses import dataclass
import logging
from typing import Callable, Optional, Sequence

# === Thirdparty ===
import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score

# === Local ===
from coldrank.exceptions import DimensionError, UndefinedMetricError
from coldrank.features.dataset import AdCandidate, UserContext


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
@dataclass
class ScoredSet:
    """One request's candidates scored by the pre-ranker and by the ranking oracle."""
    ad_ids: np.ndarray
    prerank_pctr: np.ndarray
    oracle_pctr: np.ndarray
    bids: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ad_ids = np.asarray(self.ad_ids, dtype=np.int64)
        self.prerank_pctr = np.asarray(self.prerank_pctr, dtype=np.float64)
        self.oracle_pctr = np.asarray(self.oracle_pctr, dtype=np.float64)
        self.bids = np.asarray(self.bids, dtype=np.float64)
        n = len(self.ad_ids)
        if any(len(a) != n for a in (self.prerank_pctr, self.oracle_pctr, self.bids)):
            raise DimensionError('ScoredSet columns differ in length')
        if len(np.unique(self.ad_ids)) != n:
            raise DimensionError('Candidate ids must be unique within a request')

    def __len__(self):
        return len(self.ad_ids)


class RankingOracle:
    """Stand-in for the ranking stage: any deterministic (user, ads) -> pCTR function."""

    def __init__(self, name, score_fn: Callable[[UserContext, Sequence[AdCandidate]], np.ndarray]):
        self.name = name
        self._score_fn = score_fn

    def __call__(self, user: UserContext, ads: Sequence[AdCandidate]) -> np.ndarray:
        return np.asarray(self._score_fn(user, ads), dtype=np.float64)

    @classmethod
    def from_truth(cls, truth):
        return cls('ground_truth', lambda user, ads: truth.pctr_for(user, ads))

    @classmethod
    def from_model(cls, model, name='ranking_model'):
        return cls(name, lambda user, ads: model.score(user, ads))


# ===== FUNCTIONS =====
def auc(scores, labels, sample_weight=None) -> float:
    """P(random positive outranks random negative), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DimensionError(f'{scores.shape} scores for {labels.shape} labels')
    if sample_weight is None and len(np.unique(labels)) < 2:
        raise UndefinedMetricError('AUC needs at least one positive and one negative label')
    return float(roc_auc_score(labels, scores, sample_weight=sample_weight))


def expected_auc(scores, true_pctr) -> float:
    """AUC against soft labels: each example counts p as a click and 1 - p as a skip."""
    scores = np.asarray(scores, dtype=np.float64)
    p = np.asarray(true_pctr, dtype=np.float64)
    labels = np.concatenate([np.ones_like(p), np.zeros_like(p)])
    return auc(np.concatenate([scores, scores]), labels, sample_weight=np.concatenate([p, 1.0 - p]))


def gauc(user_ids, scores, labels, return_population=False):
    """Impression-weighted mean of per-user AUC over users having both classes."""
    frame = pd.DataFrame({
        'user': np.asarray(user_ids),
        'score': np.asarray(scores, dtype=np.float64),
        'label': np.asarray(labels, dtype=np.int64),
    })
    total, weight, users = 0.0, 0, 0
    for _, group in frame.groupby('user', sort=True):
        if group['label'].nunique() < 2:
            continue
        total += roc_auc_score(group['label'], group['score']) * len(group)
        weight += len(group)
        users += 1
    if weight == 0:
        raise UndefinedMetricError('No user has both a click and a non-click')
    value = float(total / weight)
    if return_population:
        return value, {'users': users, 'impressions': weight, 'total_users': int(frame['user'].nunique())}
    return value


def ecpm(pctr, bid):
    return pctr * bid


def ecpm_order(ad_ids, pctr, bids) -> np.ndarray:
    """Indices by descending eCPM; equal eCPM falls back to ascending ad id."""
    return np.lexsort((np.asarray(ad_ids), -ecpm(np.asarray(pctr, dtype=np.float64), np.asarray(bids))))


def topk_recall(scored: ScoredSet, k, m) -> float:
    n = len(scored)
    if not 1 <= k <= n or not 1 <= m <= n:
        raise UndefinedMetricError(f'k={k} and m={m} must lie in [1, {n}]')
    prerank = scored.ad_ids[ecpm_order(scored.ad_ids, scored.prerank_pctr, scored.bids)[:k]]
    oracle = scored.ad_ids[ecpm_order(scored.ad_ids, scored.oracle_pctr, scored.bids)[:m]]
    return len(np.intersect1d(prerank, oracle)) / m
