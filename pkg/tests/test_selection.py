import numpy as np
import pytest
import torch

from conftest import tiny_generator

from coldrank.data.generator import generate, sample_requests
from coldrank.engine.bench import BenchConfig
from coldrank.exceptions import ConfigError, ModelNotReadyError
from coldrank.features.schema import Side
from coldrank.models.cold import ColdModel
from coldrank.selection import Constraint, SelectionData, candidate_model, rank_groups, select
from coldrank.training.trainer import TrainConfig, train_batch


QUICK_BENCH = BenchConfig(rates=[20.0], level_seconds=0.5, warmup_seconds=0.1, latency_limit_ms=1000.0,
                          min_throughput_ratio=0.5)
ONE_EPOCH = TrainConfig(learning_rate=1e-2, batch_size=64, epochs=1, seed=0)


@pytest.fixture(scope='module')
def selection_data(tiny_data):
    _, train, holdout, truth = tiny_data
    return SelectionData(train, holdout, sample_requests(truth, 3, 10, seed=0), n_winners=3)


# ===== constraint =====
def test_constraint_validation():
    with pytest.raises(ConfigError):
        Constraint(min_qps=0, max_rt_p99_ms=10)
    with pytest.raises(ConfigError):
        Constraint(min_qps=10, max_rt_p99_ms=-1)
    constraint = Constraint.from_args({'min_qps': 100, 'max_rt_p99_ms': 5, 'note': 'x'})
    assert constraint.satisfied_by(100, 5)
    assert not constraint.satisfied_by(99, 5)
    assert not constraint.satisfied_by(100, 5.1)
    assert not constraint.satisfied_by(1000, None)


# ===== ranking =====
def test_ranking_needs_a_trained_model(cold_model, tiny_data):
    with pytest.raises(ModelNotReadyError):
        rank_groups(cold_model, tiny_data[2])


def test_neutral_weights_rank_in_schema_order(cold_model, tiny_data):
    cold_model.version = 1
    ranking = rank_groups(cold_model, tiny_data[2][:100])
    assert [g for g, _ in ranking] == cold_model.selected
    assert all(w == 0.5 for _, w in ranking)


def test_saturated_bias_ranks_first(cold_model, tiny_data):
    cold_model.version = 1
    position = cold_model.selected.index('ad_category')
    with torch.no_grad():
        cold_model.se.linear.bias[position] = 20.0
    ranking = rank_groups(cold_model, tiny_data[2][:100])
    assert ranking[0][0] == 'ad_category'
    assert ranking[0][1] == pytest.approx(1.0)


def test_ranking_is_deterministic(trained_cold, tiny_data):
    sample = tiny_data[2]
    assert rank_groups(trained_cold, sample) == rank_groups(trained_cold, sample)


def test_candidate_model_keeps_architecture(trained_cold):
    model = candidate_model(trained_cold, ['user_age', 'ad_category'])
    assert model.selected == ['user_age', 'ad_category']
    config = model.config()
    for key in ('hidden', 'use_linear_log', 'precision', 'seed'):
        assert config[key] == trained_cold.config()[key]
    assert model.version == 0


# ===== selection loop =====
def test_select_rejects_bad_k_lists(trained_cold, selection_data):
    constraint = Constraint(1, 1000)
    for ks in ([], [0], [len(trained_cold.selected) + 1]):
        with pytest.raises(ConfigError):
            select(trained_cold, ks, constraint, selection_data, QUICK_BENCH, ONE_EPOCH)


def test_select_chooses_best_feasible_candidate(trained_cold, selection_data):
    report = select(trained_cold, [3, 1, 3], Constraint(min_qps=1, max_rt_p99_ms=1000), selection_data,
                    QUICK_BENCH, ONE_EPOCH, n_rank_examples=200)
    assert [c.k for c in report.candidates] == [1, 3]
    ranked = [g for g, _ in report.ranking]
    for candidate in report.candidates:
        assert set(candidate.groups) == set(ranked[:candidate.k])
        assert candidate.model.version == 1
        assert candidate.feasible
        assert 0.0 <= candidate.gauc <= 1.0
    best = max(report.candidates, key=lambda c: (c.gauc, -c.k))
    assert report.chosen is best and best.chosen
    document = report.to_dict()
    assert document['outcome'] == 'chosen' and document['chosen_k'] == best.k
    assert 'model' not in document['candidates'][0]


def test_select_reports_when_nothing_is_feasible(trained_cold, selection_data):
    report = select(trained_cold, [1], Constraint(min_qps=1e6, max_rt_p99_ms=1000), selection_data,
                    QUICK_BENCH, ONE_EPOCH, n_rank_examples=200)
    assert report.chosen is None
    assert not report.candidates[0].feasible
    assert report.to_dict()['outcome'] == 'no feasible candidate'
    assert report.to_dict()['chosen_k'] is None


@pytest.mark.slow
def test_noise_group_ranks_last_among_user_groups():
    hits = 0
    for seed in range(10):
        schema, stream, _ = generate(tiny_generator(seed=seed, n_users=300, n_ads=100, n_examples=20_000,
                                                    noise_cardinality=20))
        examples = list(stream)
        config = TrainConfig(learning_rate=1e-2, batch_size=128, epochs=2, seed=seed)
        model = train_batch(ColdModel(schema, hidden=(32, 16), seed=seed), examples[:16_000], config)
        ranking = rank_groups(model, examples[16_000:])
        user_order = [g for g, _ in ranking if schema.group(g).side is Side.USER]
        hits += user_order[-1] == 'user_noise'
    assert hits >= 8


@pytest.mark.slow
def test_more_groups_trade_speed_for_accuracy():
    schema, stream, truth = generate(tiny_generator(n_users=300, n_ads=300, n_examples=20_000))
    examples = list(stream)
    config = TrainConfig(learning_rate=1e-2, batch_size=128, epochs=2, seed=0)
    full = train_batch(ColdModel(schema, hidden=(64, 32), seed=0), examples[:16_000], config)
    data = SelectionData(examples[:16_000], examples[16_000:], sample_requests(truth, 20, 300, seed=0))
    bench = BenchConfig(start_qps=10, growth=1.5, max_levels=15, level_seconds=1.5, warmup_seconds=0.3,
                        latency_limit_ms=50.0)
    m = len(full.selected)
    report = select(full, [1, m // 2, m], Constraint(min_qps=1, max_rt_p99_ms=1000), data, bench, config)
    minimal, _, complete = report.candidates
    assert complete.gauc >= minimal.gauc
    assert minimal.qps >= 0.9 * complete.qps
    assert np.isfinite([c.gauc for c in report.candidates]).all()
