# ===== IMPORTS =====
# === Standard library ===
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import logging
import threading
import time
from typing import Callable, Dict, List, Optional, Sequence

# === Thirdparty ===
from hdrh.histogram import HdrHistogram
import numpy as np
import torch
from tqdm import tqdm
import tqdm_logging_wrapper

# === Local ===
from coldrank import reports
from coldrank.data.generator import read_truth, sample_requests
from coldrank.engine.client import ScoreClient
from coldrank.engine.serving import FrontEndQuery, SplitPlan, make_queries, split_and_score
from coldrank.exceptions import ConfigError
from coldrank.features.batch import ColumnarBatch, build_batch_column, build_batch_row
from coldrank.features.schema import Side
from coldrank.models.checkpoint import load_model
from coldrank.numerics import PrecisionMode


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
# 1 us .. 60 s, 3 significant figures
HISTOGRAM_RANGE = (1, 60_000_000, 3)
PATHS = ('row', 'column')


# ===== CLASSES =====
@dataclass
class BenchConfig:
    latency_limit_ms: float = 20.0
    max_violation: float = 0.01
    min_throughput_ratio: float = 0.9
    rates: Optional[List[float]] = None
    start_qps: float = 25.0
    growth: float = 1.5
    max_levels: int = 12
    level_seconds: float = 2.0
    warmup_seconds: float = 0.5
    client_workers: int = 8
    max_backlog: int = 256
    path: str = 'column'
    precision: str = PrecisionMode.FULL32.value
    chunk_size: int = 300
    chunk_workers: int = 1

    def __post_init__(self):
        if self.latency_limit_ms <= 0:
            raise ConfigError('latency_limit_ms must be positive')
        if self.path not in PATHS:
            raise ConfigError(f'path must be one of {PATHS}, got {self.path!r}')
        PrecisionMode.parse(self.precision)
        if self.level_seconds <= self.warmup_seconds:
            raise ConfigError('level_seconds must exceed warmup_seconds')

    @classmethod
    def from_args(cls, args: Dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in args.items() if k in known})

    def offered_rates(self) -> List[float]:
        if self.rates:
            return sorted(float(r) for r in self.rates)
        return [self.start_qps * self.growth ** i for i in range(self.max_levels)]

    def plan(self) -> SplitPlan:
        return SplitPlan(chunk_size=self.chunk_size, workers=self.chunk_workers)


@dataclass
class LevelResult:
    offered_qps: float
    achieved_qps: float
    n: int
    over_limit_fraction: float
    p50_ms: Optional[float]
    p95_ms: Optional[float]
    p99_ms: Optional[float]
    mean_ms: Optional[float]
    saturated: bool = False
    # failed queries, counted in n and as over the latency limit
    failed: int = 0

    def passes(self, max_violation=0.01, min_throughput_ratio=0.9):
        return (not self.saturated
                and self.over_limit_fraction <= max_violation
                and self.achieved_qps >= min_throughput_ratio * self.offered_qps)


@dataclass
class BenchReport:
    usable_qps: float
    p50_ms: Optional[float]
    p95_ms: Optional[float]
    p99_ms: Optional[float]
    latency_limit_ms: float
    precision: str
    path: str
    levels: List[LevelResult] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


# ===== FUNCTIONS =====
def level_from_latencies(offered_qps, latencies_ms: Sequence[float], latency_limit_ms,
                         achieved_qps=None, saturated=False, failed=0) -> LevelResult:
    """Percentiles over the successful latencies; `failed` queries count as over the limit."""
    latencies_ms = np.asarray(latencies_ms, dtype=np.float64)
    if latencies_ms.size == 0:
        return LevelResult(offered_qps, 0.0, int(failed), 1.0, None, None, None, None, True, int(failed))
    histogram = HdrHistogram(*HISTOGRAM_RANGE)
    for value in np.clip(np.rint(latencies_ms * 1000.0), 1, HISTOGRAM_RANGE[1]).astype(np.int64):
        histogram.record_value(int(value))

    def percentile(q):
        return histogram.get_value_at_percentile(q) / 1000.0

    return LevelResult(
        offered_qps=float(offered_qps),
        achieved_qps=float(offered_qps if achieved_qps is None else achieved_qps),
        n=int(latencies_ms.size) + failed,
        over_limit_fraction=float((np.sum(latencies_ms > latency_limit_ms) + failed) / (latencies_ms.size + failed)),
        p50_ms=percentile(50),
        p95_ms=percentile(95),
        p99_ms=percentile(99),
        mean_ms=float(latencies_ms.mean()),
        saturated=saturated,
        failed=int(failed),
    )


def usable_qps(levels: Sequence[LevelResult], max_violation=0.01, min_throughput_ratio=0.9) -> float:
    """Highest offered rate reached before the first level breaking the latency rule."""
    usable = 0.0
    for level in sorted(levels, key=lambda lv: lv.offered_qps):
        if not level.passes(max_violation, min_throughput_ratio):
            break
        usable = level.offered_qps
    return usable


def run_level(handler: Callable[[FrontEndQuery], object], workload: Sequence[FrontEndQuery],
              rate: float, config: BenchConfig) -> LevelResult:
    """Open-loop load at `rate`; latency counts from the scheduled send time."""
    interval = 1.0 / rate
    latencies, lock = [], threading.Lock()
    failures = [0]
    backlog = threading.Semaphore(config.max_backlog)
    saturated = False
    completed = []

    def task(query, scheduled, measured):
        try:
            handler(query)
            done = time.perf_counter()
            if measured:
                with lock:
                    latencies.append((done - scheduled) * 1000.0)
                    completed.append(done)
        except Exception:
            logger.warning('Query %s failed', query.request_id, exc_info=True)
            if measured:
                with lock:
                    failures[0] += 1
                    completed.append(time.perf_counter())
        finally:
            backlog.release()

    with ThreadPoolExecutor(max_workers=config.client_workers) as pool:
        start = time.perf_counter()
        end = start + config.level_seconds
        i = 0
        while True:
            scheduled = start + i * interval
            if scheduled >= end:
                break
            now = time.perf_counter()
            if now < scheduled:
                time.sleep(scheduled - now)
            if not backlog.acquire(blocking=False):
                saturated = True
                break
            measured = scheduled - start >= config.warmup_seconds
            pool.submit(task, workload[i % len(workload)], scheduled, measured)
            i += 1
    window = config.level_seconds - config.warmup_seconds
    measure_start = start + config.warmup_seconds
    finish = max(completed) if completed else measure_start
    achieved = len(latencies) / max(finish - measure_start, window)
    return level_from_latencies(rate, latencies, config.latency_limit_ms, achieved, saturated, failures[0])


def bench_qps_rt(handler: Callable[[FrontEndQuery], object], workload: Sequence[FrontEndQuery],
                 config: BenchConfig, latency_limit_ms: Optional[float] = None) -> BenchReport:
    """Ramps the offered load until more than `max_violation` of responses exceed the limit."""
    if not workload:
        raise ConfigError('Bench workload is empty')
    if latency_limit_ms is not None:
        config = BenchConfig.from_args({**asdict(config), 'latency_limit_ms': latency_limit_ms})
    levels = []
    rates = tqdm(config.offered_rates(), desc=f'{config.path}/{config.precision}')
    with tqdm_logging_wrapper.wrap_logging_for_tqdm(rates), rates:
        for rate in rates:
            level = run_level(handler, workload, rate, config)
            levels.append(level)
            logger.info('Offered %.1f QPS: achieved %.1f, p99 %s ms, %.2f%% over limit',
                        rate, level.achieved_qps, level.p99_ms, 100 * level.over_limit_fraction)
            if not level.passes(config.max_violation, config.min_throughput_ratio):
                break
    usable = usable_qps(levels, config.max_violation, config.min_throughput_ratio)
    reference = next((lv for lv in reversed(levels) if lv.offered_qps == usable), levels[0])
    return BenchReport(usable, reference.p50_ms, reference.p95_ms, reference.p99_ms,
                       config.latency_limit_ms, config.precision, config.path, levels)


def local_handler(model_source, config: BenchConfig, executor=None) -> Callable[[FrontEndQuery], object]:
    """Scores in-process; `model_source` is a model or anything with `current()`."""
    plan = config.plan()
    precision = PrecisionMode.parse(config.precision)

    def handle(query):
        model = model_source.current() if hasattr(model_source, 'current') else model_source
        return split_and_score(query, model, plan, executor=executor, path=config.path, precision=precision)

    return handle


def _merge(left: ColumnarBatch, right: ColumnarBatch, groups) -> ColumnarBatch:
    merged = ColumnarBatch(size=left.size, groups=[g for g in groups if g in left.groups or g in right.groups])
    for part in (left, right):
        merged.ids.update(part.ids)
        merged.pooled.update(part.pooled)
        merged.embeddings.update(part.embeddings)
    return merged


def stage_timings(model, requests, repeats=3) -> Dict[str, Dict[str, float]]:
    """Mean per-query milliseconds for user features, ad plus cross features and dense post-processing."""
    schema = model.schema
    user_groups = [g for g in model.selected if schema.group(g).side is Side.USER]
    ad_groups = [g for g in model.selected if schema.group(g).side is not Side.USER]
    builders = {'row': build_batch_row, 'column': build_batch_column}
    stages = {}
    tables = model.tables()
    for path, build in builders.items():
        totals = {'user_ms': 0.0, 'ad_ms': 0.0, 'post_ms': 0.0}
        n = 0
        for _ in range(repeats):
            for user, ads in requests:
                t0 = time.perf_counter()
                user_part = build(schema, tables, user, ads, groups=user_groups) if user_groups else None
                t1 = time.perf_counter()
                ad_part = build(schema, tables, user, ads, groups=ad_groups) if ad_groups else None
                t2 = time.perf_counter()
                parts = [p for p in (user_part, ad_part) if p is not None]
                batch = _merge(parts[0], parts[-1], model.selected)
                model.score_batch(batch)
                t3 = time.perf_counter()
                totals['user_ms'] += (t1 - t0) * 1000.0
                totals['ad_ms'] += (t2 - t1) * 1000.0
                totals['post_ms'] += (t3 - t2) * 1000.0
                n += 1
        timings = {k: v / n for k, v in totals.items()}
        timings['total_ms'] = sum(timings.values())
        stages[path] = timings
    return stages


def path_throughput(model, requests, path, repeats=3) -> float:
    """Queries per second of single-threaded scoring through one batch path."""
    with torch.no_grad():
        start = time.perf_counter()
        for _ in range(repeats):
            for user, ads in requests:
                model.score(user, ads, path=path)
        elapsed = time.perf_counter() - start
    return repeats * len(requests) / elapsed


def compare_paths(model, requests, repeats=3) -> Dict:
    row = path_throughput(model, requests, 'row', repeats)
    column = path_throughput(model, requests, 'column', repeats)
    return {'row_qps': row, 'column_qps': column, 'column_over_row': column / row}


def bench(args):
    """Benchmark grid over precision x path, plus the row-vs-column stage breakdown."""
    model = load_model(args['checkpoint_path'])
    truth = read_truth(args['truth_path'])
    workload_args = args.get('workload', {})
    requests = sample_requests(truth, workload_args.get('n_requests', 50),
                               workload_args.get('n_candidates', 300), workload_args.get('seed', 0))
    workload = make_queries(requests, workload_args.get('n_winners', 10))
    if model.kind == 'two_tower':
        model.precompute((truth.user_context(u) for u in range(truth.n_users)),
                         (truth.ad_candidate(a) for a in range(truth.n_ads)))

    base_args = args.get('bench', {})
    cells = []
    if args.get('target_url'):
        config = BenchConfig.from_args(base_args)
        with ScoreClient(args['target_url']) as client:
            report = bench_qps_rt(client.score_query, workload, config)
        cells.append({'path': 'remote', 'precision': 'server', **report.to_dict()})
    else:
        grid = args.get('grid', {})
        for precision in grid.get('precision', [p.value for p in PrecisionMode]):
            for path in grid.get('path', list(PATHS)):
                config = BenchConfig.from_args({**base_args, 'precision': precision, 'path': path})
                with ThreadPoolExecutor(max_workers=config.chunk_workers) as chunk_pool:
                    report = bench_qps_rt(local_handler(model, config, chunk_pool), workload, config)
                cells.append({'path': path, 'precision': precision, **report.to_dict()})

    baseline = next((c for c in cells if c['path'] == 'row' and c['precision'] == PrecisionMode.FULL32.value),
                    cells[0])
    for cell in cells:
        cell['qps_ratio'] = cell['usable_qps'] / baseline['usable_qps'] if baseline['usable_qps'] else None

    report = {'step': args, 'model': model.kind, 'cells': cells}
    table = reports.system_table(cells)
    if args.get('compare_paths', True) and model.kind == 'cold' and not args.get('target_url'):
        stage_requests = requests[:workload_args.get('n_stage_requests', 10)]
        report['stages'] = stage_timings(model, stage_requests)
        report['paths'] = compare_paths(model, stage_requests)
        table += '\n\n' + reports.stage_table(report['stages'])

    def plot(path):
        reports.plot_bars(path, [f"{c['path']}/{c['precision']}" for c in cells],
                          [c['usable_qps'] for c in cells], 'Usable QPS')

    reports.write_report(args, report, table, plot)
    return report
