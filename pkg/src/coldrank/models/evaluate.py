# ===== IMPORTS =====
# === Standard library ===
import logging
from typing import Dict, List

# === Thirdparty ===
import numpy as np
from tqdm import tqdm
import tqdm_logging_wrapper

# === Local ===
from coldrank import reports
from coldrank.data.generator import read_truth, sample_requests
from coldrank.exceptions import ConfigError
from coldrank.features.dataset import read_dataset
from coldrank.metrics import RankingOracle, ScoredSet, gauc, topk_recall
from coldrank.models.checkpoint import load_model


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
class ModelScorer:
    def __init__(self, name, model):
        self.name = name
        self.model = model
        self.d_in = model.schema.input_width(model.selected)

    def score_examples(self, examples):
        return self.model.score_examples(examples)

    def score(self, user, ads):
        return self.model.score(user, ads)


class RandomScorer:
    """Scores independent of the input; the GAUC floor."""

    def __init__(self, seed=0):
        self.name = 'random'
        self.d_in = None
        self._rng = np.random.default_rng(seed)

    def score_examples(self, examples):
        return self._rng.random(len(examples))

    def score(self, user, ads):
        return self._rng.random(len(ads))


class TruthScorer:
    """Planted pCTR; the Bayes reference row."""

    def __init__(self, truth):
        self.name = 'ground_truth'
        self.d_in = None
        self._truth = truth

    def score_examples(self, examples):
        users = [e.user_id for e in examples]
        ads = [e.ad_id for e in examples]
        return self._truth.pctr(users, ads, [e.timestamp for e in examples])

    def score(self, user, ads):
        return self._truth.pctr_for(user, ads)


# ===== FUNCTIONS =====
def mean_recall(scorer, oracle: RankingOracle, requests, k, m) -> float:
    recalls = []
    for user, ads in requests:
        scored = ScoredSet(
            ad_ids=[ad.ad_id for ad in ads],
            prerank_pctr=scorer.score(user, ads),
            oracle_pctr=oracle(user, ads),
            bids=[ad.bid for ad in ads],
        )
        recalls.append(topk_recall(scored, k, m))
    return float(np.mean(recalls))


def evaluate_scorers(scorers, holdout, oracle: RankingOracle, requests, k, m) -> List[Dict]:
    user_ids = [e.user_id for e in holdout]
    labels = [e.label for e in holdout]
    rows = []
    scorers_iter = tqdm(scorers, desc='models')
    with tqdm_logging_wrapper.wrap_logging_for_tqdm(scorers_iter), scorers_iter:
        for scorer in scorers_iter:
            value, population = gauc(user_ids, scorer.score_examples(holdout), labels, return_population=True)
            row = {
                'name': scorer.name,
                'gauc': value,
                'recall': mean_recall(scorer, oracle, requests, k, m) if requests else None,
                'd_in': scorer.d_in,
                'population': population,
            }
            logger.info('%s: GAUC %.4f, recall %s', scorer.name, row['gauc'], row['recall'])
            rows.append(row)
    return rows


def evaluate(args):
    """GAUC on the holdout and top-k recall against the ranking oracle, one row per model."""
    checkpoints = args.get('checkpoints', [])
    if not checkpoints and not args.get('include_random') and not args.get('include_bayes'):
        raise ConfigError('Nothing to evaluate: no checkpoints and no reference rows')
    schema, holdout = read_dataset(args['holdout_path'])
    truth = read_truth(args['truth_path'])

    scorers = []
    for entry in checkpoints:
        model = load_model(entry['path'], schema)
        if model.kind == 'two_tower':
            model.precompute((truth.user_context(u) for u in range(truth.n_users)),
                             (truth.ad_candidate(a) for a in range(truth.n_ads)))
        scorers.append(ModelScorer(entry.get('name', model.kind), model))
    if args.get('include_random', False):
        scorers.append(RandomScorer(args.get('seed', 0)))
    if args.get('include_bayes', False):
        scorers.append(TruthScorer(truth))

    if args.get('oracle_checkpoint'):
        oracle = RankingOracle.from_model(load_model(args['oracle_checkpoint'], schema))
    else:
        oracle = RankingOracle.from_truth(truth)

    recall_args = args.get('recall', {})
    k, m = recall_args.get('k', 50), recall_args.get('m', 10)
    requests = sample_requests(truth, recall_args.get('n_requests', 20),
                               recall_args.get('n_candidates', 1000), recall_args.get('seed', 0))
    rows = evaluate_scorers(scorers, holdout, oracle, requests, k, m)
    report = {'step': args, 'oracle': oracle.name, 'k': k, 'm': m, 'models': rows}

    def plot(path):
        reports.plot_bars(path, [reports.MODEL_NAMES.get(r['name'], r['name']) for r in rows],
                          [r['gauc'] for r in rows], 'GAUC')

    reports.write_report(args, report, reports.offline_table(rows), plot)
    return report
