# ===== IMPORTS =====
# === Standard library ===
from dataclasses import asdict, dataclass, field, fields
import logging
from typing import Dict, List, Optional, Sequence, Tuple

# === Thirdparty ===
import numpy as np
from tqdm import tqdm
import tqdm_logging_wrapper

# === Local ===
import coldrank
from coldrank import reports
from coldrank.data.generator import read_truth, sample_requests
from coldrank.engine.bench import BenchConfig, bench_qps_rt, local_handler
from coldrank.engine.serving import make_queries
from coldrank.exceptions import ConfigError, ModelNotReadyError, SchemaError
from coldrank.features.batch import ColumnarBatch, encode_examples, lookup_batch
from coldrank.features.dataset import RawExample, read_dataset
from coldrank.metrics import gauc
from coldrank.models.checkpoint import load_model, save_model
from coldrank.models.cold import ColdModel, se_weights
from coldrank.training.trainer import TrainConfig, train_batch


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
N_RANK_EXAMPLES = 10_000


# ===== CLASSES =====
@dataclass
class Constraint:
    min_qps: float
    max_rt_p99_ms: float

    def __post_init__(self):
        if not self.min_qps > 0 or not self.max_rt_p99_ms > 0:
            raise ConfigError(f'Constraint bounds must be positive, got {self}')

    @classmethod
    def from_args(cls, args: Dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in args.items() if k in known})

    def satisfied_by(self, qps, rt_p99_ms) -> bool:
        return rt_p99_ms is not None and qps >= self.min_qps and rt_p99_ms <= self.max_rt_p99_ms


@dataclass
class SelectionData:
    train: Sequence[RawExample]
    holdout: Sequence[RawExample]
    # (UserContext, [AdCandidate]) pairs replayed by the bench harness
    requests: Sequence[Tuple]
    n_winners: int = 10


@dataclass
class SelectionCandidate:
    k: int
    groups: List[str]
    d_in: int
    gauc: Optional[float] = None
    qps: Optional[float] = None
    rt_p99_ms: Optional[float] = None
    feasible: bool = False
    chosen: bool = False
    model: Optional[ColdModel] = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'model'}


@dataclass
class SelectionReport:
    ranking: List[Tuple[str, float]]
    constraint: Constraint
    candidates: List[SelectionCandidate]
    chosen: Optional[SelectionCandidate]

    def to_dict(self):
        return {
            'ranking': [{'group': g, 'weight': w} for g, w in self.ranking],
            'constraint': asdict(self.constraint),
            'candidates': [c.to_dict() for c in self.candidates],
            'chosen_k': self.chosen.k if self.chosen is not None else None,
            'outcome': 'chosen' if self.chosen is not None else 'no feasible candidate',
        }


# ===== FUNCTIONS =====
def rank_groups(full_model: ColdModel, sample) -> List[Tuple[str, float]]:
    """Groups by descending batch-mean SE weight, ties in schema order.

    `sample` is a ColumnarBatch or a sequence of examples.
    """
    if full_model.version == 0:
        raise ModelNotReadyError('Cannot rank groups with an untrained model (version 0)')
    if isinstance(sample, ColumnarBatch):
        batch = sample
    else:
        batch = lookup_batch(full_model.schema, full_model.tables(),
                             encode_examples(full_model.schema, list(sample), full_model.selected))
    weights = se_weights(full_model, batch)
    schema = full_model.schema
    ranking = sorted(weights.as_dict().items(), key=lambda item: (-item[1], schema.position(item[0])))
    logger.info('SE ranking: %s', ', '.join(f'{g}={w:.4f}' for g, w in ranking))
    return ranking


def candidate_model(full_model: ColdModel, groups: Sequence[str]) -> ColdModel:
    config = {k: v for k, v in full_model.config().items() if k != 'selected_groups'}
    return ColdModel(full_model.schema, selected_groups=groups, **config)


def evaluate_candidate(candidate: SelectionCandidate, data: SelectionData, bench_config: BenchConfig):
    model = candidate.model
    holdout = list(data.holdout)
    candidate.gauc = gauc([e.user_id for e in holdout], model.score_examples(holdout), [e.label for e in holdout])
    workload = make_queries(data.requests, data.n_winners, prefix=f'k{candidate.k}-')
    report = bench_qps_rt(local_handler(model, bench_config), workload, bench_config)
    candidate.qps = report.usable_qps
    candidate.rt_p99_ms = report.p99_ms
    return candidate


def select(full_model: ColdModel, ks: Sequence[int], constraint: Constraint, data: SelectionData,
           bench_config: BenchConfig, train_config: Optional[TrainConfig] = None,
           n_rank_examples: int = N_RANK_EXAMPLES) -> SelectionReport:
    """Retrains a model on the top-K groups for every K and picks the best GAUC under the constraint."""
    ks = sorted({int(k) for k in ks})
    if not ks:
        raise ConfigError('Candidate K list is empty')
    n_groups = len(full_model.selected)
    if ks[0] < 1 or ks[-1] > n_groups:
        raise ConfigError(f'Every K must lie in [1, {n_groups}], got {ks}')
    train_config = train_config or TrainConfig()

    ranking = rank_groups(full_model, list(data.holdout)[:n_rank_examples])
    ordered = [g for g, _ in ranking]
    candidates = []
    ks_iter = tqdm(ks, desc='candidates')
    with tqdm_logging_wrapper.wrap_logging_for_tqdm(ks_iter), ks_iter:
        for k in ks_iter:
            groups = [g.id for g in full_model.schema.restrict(ordered[:k])]
            untrained = candidate_model(full_model, groups)
            candidate = SelectionCandidate(k=k, groups=groups, d_in=untrained.d_in)
            candidate.model = train_batch(untrained, data.train, train_config)
            evaluate_candidate(candidate, data, bench_config)
            candidate.feasible = constraint.satisfied_by(candidate.qps, candidate.rt_p99_ms)
            logger.info('K=%d (D_in=%d): GAUC %.4f, QPS %.1f, p99 %s ms, feasible %s',
                        k, candidate.d_in, candidate.gauc, candidate.qps, candidate.rt_p99_ms, candidate.feasible)
            candidates.append(candidate)

    feasible = [c for c in candidates if c.feasible]
    chosen = None
    if feasible:
        # first maximum wins, i.e. the smallest K among equal GAUCs
        chosen = feasible[int(np.argmax([c.gauc for c in feasible]))]
        chosen.chosen = True
        logger.info('Chose K=%d with GAUC %.4f', chosen.k, chosen.gauc)
    else:
        logger.warning('No candidate satisfies %s', constraint)
    return SelectionReport(ranking, constraint, candidates, chosen)


def run_selection(args):
    """Selection loop end to end: rank, retrain per K, evaluate, choose, report."""
    schema, train = read_dataset(args['dataset_path'])
    holdout = read_dataset(args['holdout_path'])[1]
    truth = read_truth(args['truth_path'])
    train_config = TrainConfig.from_args(args.get('training', {}))
    coldrank.utils.seed_everything(train_config.seed)

    if args.get('full_checkpoint_path'):
        full_model = load_model(args['full_checkpoint_path'], schema)
    else:
        model_args = {k: v for k, v in args.get('model', {}).items() if k not in ('kind', 'selected_groups')}
        full_model = train_batch(ColdModel(schema, **model_args), train, train_config)
        if args.get('save_full_checkpoint_path'):
            save_model(full_model, args['save_full_checkpoint_path'])
    if full_model.kind != 'cold':
        raise SchemaError(f'Selection needs a COLD model, got {full_model.kind}')

    workload_args = args.get('workload', {})
    requests = sample_requests(truth, workload_args.get('n_requests', 50),
                               workload_args.get('n_candidates', 300), workload_args.get('seed', 0))
    data = SelectionData(train, holdout, requests, workload_args.get('n_winners', 10))
    ks = args.get('ks', [1, len(full_model.selected) // 2 or 1, len(full_model.selected)])
    result = select(full_model, ks, Constraint.from_args(args['constraint']), data,
                    BenchConfig.from_args(args.get('bench', {})), train_config,
                    args.get('n_rank_examples', N_RANK_EXAMPLES))

    report = {'step': args, **result.to_dict()}
    candidates = report['candidates']

    def plot(path):
        reports.plot_lines(path, [c['k'] for c in candidates], {'GAUC': [c['gauc'] for c in candidates]},
                           'K', 'GAUC')

    reports.write_report(args, report, reports.tradeoff_table(candidates), plot)
    return report
