# ===== IMPORTS =====
# === Standard library ===
import logging
import pathlib
from typing import Dict, List, Optional, Sequence

# === Thirdparty ===
import numpy as np
import pandas as pd

# === Local ===
import coldrank


# ===== GLOBALS =====
logger = logging.getLogger(__name__)

MODEL_NAMES = {
    'cold': 'COLD',
    'two_tower': 'Vector-product (two-tower)',
    'random': 'Random',
    'ground_truth': 'Ground truth (Bayes)',
}


# ===== FUNCTIONS =====
def markdown_table(rows: List[Dict], columns: Dict[str, str], best: Optional[Dict[str, str]] = None,
                   formats: Optional[Dict[str, str]] = None, sort_by: Optional[str] = None) -> str:
    """Renders report rows; `best` maps a column to 'max' or 'min' and bolds the winner."""
    frame = pd.DataFrame(rows)
    for column in columns:
        if column not in frame:
            frame[column] = None
    frame = frame[list(columns)].copy()
    if sort_by is not None:
        frame.sort_values(sort_by, ascending=False, inplace=True, na_position='last')
    numeric = {c: pd.to_numeric(frame[c], errors='coerce') for c in columns}

    formats = formats or {}
    for column, fmt in formats.items():
        frame[column] = [fmt.format(v) if pd.notna(v) else '-' for v in numeric[column]]

    def mark_best(column, direction):
        values = numeric[column].values.astype(np.float64)
        if np.all(np.isnan(values)):
            return
        target = np.nanmax(values) if direction == 'max' else np.nanmin(values)
        mask = values == target
        frame.loc[mask, column] = frame.loc[mask, column].map('**{}**'.format)

    for column, direction in (best or {}).items():
        mark_best(column, direction)

    frame.rename(columns=columns, inplace=True)
    return frame.to_markdown(index=False, disable_numparse=True)


def offline_table(rows: List[Dict]) -> str:
    rows = [{**r, 'name': MODEL_NAMES.get(r['name'], r['name'])} for r in rows]
    return markdown_table(
        rows,
        columns={'name': 'Model', 'gauc': 'GAUC', 'recall': 'Recall', 'd_in': 'D_in'},
        best={'gauc': 'max', 'recall': 'max'},
        formats={'gauc': '{:.4f}', 'recall': '{:.2%}', 'd_in': '{:.0f}'},
    )


def tradeoff_table(candidates: List[Dict]) -> str:
    rows = [{**c, 'chosen': '*' if c.get('chosen') else ''} for c in candidates]
    return markdown_table(
        rows,
        columns={'k': 'K', 'd_in': 'D_in', 'qps': 'QPS', 'rt_p99_ms': 'RT p99 (ms)',
                 'gauc': 'GAUC', 'feasible': 'Feasible', 'chosen': 'Chosen'},
        best={'gauc': 'max', 'qps': 'max'},
        formats={'qps': '{:.0f}', 'rt_p99_ms': '{:.2f}', 'gauc': '{:.4f}'},
    )


def system_table(cells: List[Dict]) -> str:
    return markdown_table(
        cells,
        columns={'path': 'Path', 'precision': 'Precision', 'usable_qps': 'Usable QPS',
                 'p50_ms': 'RT p50 (ms)', 'p95_ms': 'RT p95 (ms)', 'p99_ms': 'RT p99 (ms)',
                 'qps_ratio': 'QPS vs baseline'},
        best={'usable_qps': 'max', 'p99_ms': 'min'},
        formats={'usable_qps': '{:.0f}', 'p50_ms': '{:.2f}', 'p95_ms': '{:.2f}',
                 'p99_ms': '{:.2f}', 'qps_ratio': '{:.2f}x'},
    )


def stage_table(stages: Dict[str, Dict[str, float]]) -> str:
    rows = [{'path': path, **timings} for path, timings in stages.items()]
    return markdown_table(
        rows,
        columns={'path': 'Path', 'user_ms': 'User features (ms)', 'ad_ms': 'Ad features (ms)',
                 'post_ms': 'Post-processing (ms)', 'total_ms': 'Total (ms)'},
        best={'ad_ms': 'min', 'total_ms': 'min'},
        formats={'user_ms': '{:.3f}', 'ad_ms': '{:.3f}', 'post_ms': '{:.3f}', 'total_ms': '{:.3f}'},
    )


def write_report(args, report: Dict, table: str, plot=None):
    """JSON report, optional Markdown table and optional plot, at the paths the step names."""
    if 'stats_path' in args:
        coldrank.utils.write_json(args['stats_path'], report)
    if 'table_path' in args:
        coldrank.utils.write_text(args['table_path'], table + '\n')
    if plot is not None and args.get('plot', False) and 'plot_path' in args:
        plot(pathlib.Path(args['plot_path']))
    logger.info('Report table:\n%s', table)


def _pyplot():
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    return plt


def plot_lines(path, xs: Sequence, series: Dict[str, Sequence], xlabel: str, ylabel: str):
    plt = _pyplot()
    coldrank.utils.mkdirs(files=[path])
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(xs, ys, marker='o', label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info('Saved plot into \'%s\'', path)


def plot_bars(path, labels: Sequence[str], values: Sequence[float], ylabel: str):
    plt = _pyplot()
    coldrank.utils.mkdirs(files=[path])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=20)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info('Saved plot into \'%s\'', path)
