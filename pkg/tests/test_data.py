import numpy as np
import pytest

from conftest import tiny_generator

from coldrank.data.generator import (GeneratorConfig, GroundTruth, factorized_fit, generate, oracle_pctr,
                                     read_truth, sample_requests, write_truth)
from coldrank.data.prepare import prepare
from coldrank.exceptions import ConfigError, FeatureRangeError
from coldrank.features.dataset import read_dataset
from coldrank.features.schema import Side


def test_degenerate_configs_are_rejected():
    for args in ({'n_users': 0}, {'n_ads': 0}, {'history_length': 0}, {'user_buckets': 0}):
        with pytest.raises(ConfigError):
            tiny_generator(**args)
    assert GeneratorConfig.from_args({'seed': 3, 'unrelated': 1}).seed == 3


def test_generation_is_reproducible():
    first = list(generate(tiny_generator(n_examples=500))[1])
    second = list(generate(tiny_generator(n_examples=500))[1])
    assert first == second
    third = list(generate(tiny_generator(n_examples=500, seed=1))[1])
    assert first != third


def test_schema_carries_planted_groups(tiny_schema):
    ids = tiny_schema.ids
    assert 'user_noise' in ids and 'user_history' in ids
    assert {g.id for g in tiny_schema.cross_groups} == {'bucket_cross', 'age_category_cross'}
    assert tiny_schema.group('user_history').pooled
    no_noise = generate(tiny_generator(noise_group=False, n_examples=0))[0]
    assert 'user_noise' not in no_noise.ids


def test_examples_are_timestamped_and_positive_bid(tiny_data):
    _, train, holdout, _ = tiny_data
    stamps = [e.timestamp for e in train + holdout]
    assert stamps == sorted(stamps) == list(range(len(stamps)))
    assert all(e.bid > 0 for e in train)
    assert {e.label for e in train} == {0, 1}


def _zeroed_truth():
    config = tiny_generator(base_logit=0.0, beta_user=0.0, beta_ad=0.0, beta_cross=0.0, beta_id=0.0)
    _, _, truth = generate(config)
    truth.age_category[:] = 0.0
    return truth


def test_oracle_is_one_half_without_coefficients():
    truth = _zeroed_truth()
    users = np.arange(truth.n_users).repeat(3)
    ads = np.arange(len(users)) % truth.n_ads
    np.testing.assert_array_equal(truth.pctr(users, ads), 0.5)
    assert oracle_pctr(truth, 0, 0) == 0.5


def test_oracle_rejects_unknown_ids(tiny_data):
    truth = tiny_data[3]
    with pytest.raises(FeatureRangeError):
        oracle_pctr(truth, truth.n_users, 0)
    with pytest.raises(FeatureRangeError):
        oracle_pctr(truth, 0, -1)


def test_oracle_monotone_in_interaction(tiny_data):
    truth = tiny_data[3]
    ub, ab = truth.user_bucket[0], truth.ad_bucket[0]
    low = oracle_pctr(truth, 0, 0)
    original = truth.interaction[ub, ab]
    try:
        truth.interaction[ub, ab] = original + 1.0
        high = oracle_pctr(truth, 0, 0)
    finally:
        truth.interaction[ub, ab] = original
    assert high > low


def test_noise_group_does_not_enter_the_label(tiny_data):
    truth = tiny_data[3]
    users = np.arange(truth.n_users)
    ads = np.zeros(truth.n_users, dtype=np.int64)
    before = truth.pctr(users, ads)
    saved = truth.user_noise.copy()
    try:
        truth.user_noise[:] = (saved + 1) % truth.config.noise_cardinality
        np.testing.assert_array_equal(truth.pctr(users, ads), before)
    finally:
        truth.user_noise[:] = saved


def test_noise_group_is_uncorrelated_with_labels():
    _, stream, _ = generate(tiny_generator(n_examples=100_000, n_users=2000, noise_cardinality=2))
    noise, labels = [], []
    for example in stream:
        noise.append(example.features['user_noise'])
        labels.append(example.label)
    corr = np.corrcoef(noise, labels)[0, 1]
    # users, not examples, are the independent units
    assert abs(corr) <= 3 * np.sqrt(1.0 / 2000) + 0.01


def test_shift_moves_the_logit_by_its_magnitude():
    _, _, truth = generate(tiny_generator(shift_at=100, shift_magnitude=1.5))
    users = np.arange(20)
    ads = np.arange(20) % truth.n_ads
    before = truth.logit(users, ads, np.full(20, 99))
    after = truth.logit(users, ads, np.full(20, 100))
    np.testing.assert_allclose(np.abs(after - before), 1.5)


def test_empirical_ctr_matches_oracle():
    config = tiny_generator(n_users=1, n_ads=1, n_examples=100_000, beta_id=0.0)
    _, stream, truth = generate(config)
    labels = np.array([e.label for e in stream])
    p = oracle_pctr(truth, 0, 0)
    sigma = np.sqrt(p * (1 - p) / len(labels))
    assert abs(labels.mean() - p) <= 4 * sigma


def test_stress_flag_inflates_pooled_counts():
    _, _, truth = generate(tiny_generator(stress=True))
    assert truth.history_counts[:, 0].min() >= 2 ** 22


def test_factorized_fit_gap():
    crossed = generate(tiny_generator(user_buckets=16, ad_buckets=16, beta_user=0.0, beta_ad=0.0,
                                      beta_cross=4.0))[2]
    fit = factorized_fit(crossed, rank=2)
    assert fit.relative_residual > 0.3
    assert fit.bayes_gap >= 0.05

    additive = generate(tiny_generator(user_buckets=16, ad_buckets=16, beta_cross=0.0))[2]
    fit = factorized_fit(additive, rank=2)
    assert fit.relative_residual < 1e-9
    assert abs(fit.bayes_gap) < 1e-6
    with pytest.raises(ConfigError):
        factorized_fit(additive, rank=0)


def test_truth_sidecar_round_trip(tmp_path, tiny_data):
    truth = tiny_data[3]
    path = tmp_path / 'truth.json'
    write_truth(path, truth)
    loaded = read_truth(path)
    assert isinstance(loaded, GroundTruth)
    users = np.arange(truth.n_users)
    ads = users % truth.n_ads
    np.testing.assert_array_equal(loaded.pctr(users, ads), truth.pctr(users, ads))


def test_sample_requests(tiny_data):
    truth = tiny_data[3]
    requests = sample_requests(truth, 4, 10, seed=1)
    assert len(requests) == 4
    for user, ads in requests:
        assert len({ad.ad_id for ad in ads}) == 10
        assert set(user.features) == {g.id for g in tiny_data[0] if g.side is Side.USER}
    with pytest.raises(ConfigError):
        sample_requests(truth, 1, truth.n_ads + 1)


def test_prepare_writes_reproducible_files(tmp_path):
    def run(folder):
        args = {
            'dataset_path': str(tmp_path / folder / 'train.jsonl'),
            'holdout_path': str(tmp_path / folder / 'holdout.jsonl'),
            'truth_path': str(tmp_path / folder / 'truth.json'),
            'holdout_fraction': 0.2,
            'generator': dict(tiny_generator(n_examples=500).__dict__),
        }
        return prepare(args)

    first, second = run('a'), run('b')
    assert first['dataset']['sha256'] == second['dataset']['sha256']
    assert first['holdout']['records'] == 100
    schema, train = read_dataset(first['dataset']['path'])
    assert len(train) == 400 and schema.digest() == first['schema_digest']
    with pytest.raises(ConfigError):
        prepare({**first['step'], 'holdout_fraction': 1.5})
