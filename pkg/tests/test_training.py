import dataclasses
import threading

import numpy as np
import pytest
import torch

from conftest import TINY_HIDDEN, tiny_generator

from coldrank.exceptions import ConfigError, DatasetError, ModelNotReadyError
from coldrank.features.dataset import RawExample
from coldrank.features.schema import FeatureGroup, FeatureSchema, Side
from coldrank.metrics import auc
from coldrank.models.cold import ColdModel
from coldrank.training.bus import SnapshotBus
from coldrank.training.experiments import shift_recovery
from coldrank.training.trainer import ModelTrainer, OnlineStats, TrainConfig, train_batch, train_online
from coldrank.utils import JsonLinesWriter


# ===== config =====
@pytest.mark.parametrize('args', [
    {'batch_size': 0},
    {'batch_size': 64, 'publish_every': 10},
    {'epochs': -1},
    {'learning_rate': -1.0},
])
def test_train_config_rejects_bad_values(args):
    with pytest.raises(ConfigError):
        TrainConfig.from_args(args)


def test_train_config_ignores_unknown_keys():
    assert TrainConfig.from_args({'batch_size': 32, 'comment': 'x'}).batch_size == 32


# ===== batch training =====
def test_train_batch_returns_next_version_and_keeps_input(tiny_data, train_config):
    schema, train, _, _ = tiny_data
    model = ColdModel(schema, hidden=TINY_HIDDEN, seed=0)
    before = [p.detach().clone() for p in model.parameters()]
    trained = train_batch(model, train[:256], train_config)
    assert trained.version == model.version + 1
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(before, trained.parameters()))
    with pytest.raises(DatasetError):
        train_batch(model, [], train_config)


def test_training_reduces_loss(tiny_data, train_config):
    schema, train, _, _ = tiny_data
    trainer = ModelTrainer(ColdModel(schema, hidden=TINY_HIDDEN, seed=0), train_config)
    trainer.fit(train)
    assert np.mean(trainer.losses[-10:]) < np.mean(trainer.losses[:3])


def test_training_is_deterministic(tiny_data, train_config):
    schema, train, _, _ = tiny_data
    a = train_batch(ColdModel(schema, hidden=TINY_HIDDEN, seed=2), train[:512], train_config)
    b = train_batch(ColdModel(schema, hidden=TINY_HIDDEN, seed=2), train[:512], train_config)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_data):
    schema, train, _, _ = tiny_data
    model = ColdModel(schema, hidden=TINY_HIDDEN, seed=0)
    before = [p.detach().clone() for p in model.parameters()]
    trainer = ModelTrainer(model, TrainConfig(learning_rate=0.0, batch_size=64))
    trainer.fit(train[:256])
    assert trainer.adam.step == 4
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_separable_toy_set_is_learned():
    schema = FeatureSchema([
        FeatureGroup('user', Side.USER, 4, embed_dim=4),
        FeatureGroup('ad', Side.AD, 8, embed_dim=4),
    ])
    examples = []
    for i in range(320):
        user, ad = i % 4, (i // 4) % 8
        # the click depends on the ad id alone
        examples.append(RawExample(user, ad, {'user': user, 'ad': ad}, int(ad < 4), 1.0, i))
    config = TrainConfig(learning_rate=5e-2, batch_size=16, epochs=20, seed=0)
    model = train_batch(ColdModel(schema, hidden=(8,), seed=0), examples, config)
    assert auc(model.score_examples(examples), [e.label for e in examples]) >= 0.99


def test_trained_model_beats_chance_on_holdout(trained_cold, tiny_data):
    _, _, holdout, _ = tiny_data
    trainer = ModelTrainer(trained_cold.clone(), TrainConfig(), holdout=holdout)
    assert trainer.holdout_auc() > 0.55


def test_metrics_are_written_per_epoch(tmp_path, tiny_data, train_config):
    schema, train, holdout, _ = tiny_data
    path = tmp_path / 'metrics.jsonl'
    with JsonLinesWriter(path) as metrics:
        ModelTrainer(ColdModel(schema, hidden=TINY_HIDDEN), train_config, metrics=metrics,
                     holdout=holdout).fit(train[:256])
    lines = path.read_text().splitlines()
    assert len(lines) == train_config.epochs
    assert '"holdout_auc"' in lines[0] and '"loss"' in lines[0]


# ===== online training =====
def test_online_training_publishes_advancing_versions(tiny_data):
    schema, train, _, _ = tiny_data
    config = TrainConfig(batch_size=50, publish_every=200, learning_rate=1e-2)
    bus = SnapshotBus()
    seen = []
    bus.subscribe(lambda snapshot: seen.append(snapshot.version))
    stats = OnlineStats()
    model = ColdModel(schema, hidden=TINY_HIDDEN)
    snapshots = list(train_online(model, train[:1030], config, bus=bus, stats=stats))

    assert stats.examples == 1030
    assert stats.batches == 21
    assert stats.publishes == len(snapshots) == 6
    assert seen == [1, 2, 3, 4, 5, 6]
    assert bus.current() is snapshots[-1]
    assert snapshots[-1] is not model
    assert snapshots[-1].version == model.version


def test_online_training_with_one_final_publish_equals_batch_training(tiny_data):
    schema, train, _, _ = tiny_data
    examples = train[:300]
    config = TrainConfig(learning_rate=1e-2, batch_size=64, epochs=1, shuffle=False, seed=0)
    batch = train_batch(ColdModel(schema, hidden=TINY_HIDDEN, seed=5), examples, config)
    snapshots = list(train_online(ColdModel(schema, hidden=TINY_HIDDEN, seed=5), examples, config))
    assert len(snapshots) == 1
    assert snapshots[0].version == batch.version == 1
    assert all(torch.equal(a, b) for a, b in zip(batch.parameters(), snapshots[0].parameters()))


def test_online_training_rejects_out_of_order_records(tiny_data):
    schema, train, _, _ = tiny_data
    stream = list(train[:100])
    stream.insert(50, dataclasses.replace(train[10]))
    stats = OnlineStats()
    config = TrainConfig(batch_size=25)
    for _ in train_online(ColdModel(schema, hidden=TINY_HIDDEN), stream, config, stats=stats):
        pass
    assert stats.rejected == 1
    assert stats.examples == 100


# ===== snapshot bus =====
class _Snapshot:
    def __init__(self, version):
        self.version = version


def test_bus_requires_a_snapshot():
    bus = SnapshotBus()
    assert bus.version is None
    with pytest.raises(ModelNotReadyError):
        bus.current()
    with pytest.raises(ModelNotReadyError):
        bus.wait_for_version(1, timeout=0.01)


def test_bus_versions_only_advance():
    bus = SnapshotBus(_Snapshot(1))
    bus.publish(_Snapshot(2))
    with pytest.raises(ValueError):
        bus.publish(_Snapshot(2))
    assert bus.current().version == 2


def test_bus_wakes_waiters():
    bus = SnapshotBus(_Snapshot(1))
    timer = threading.Timer(0.05, bus.publish, args=(_Snapshot(5),))
    timer.start()
    assert bus.wait_for_version(4, timeout=5).version == 5
    timer.join()


def test_readers_never_see_a_torn_snapshot():
    bus = SnapshotBus(_Snapshot(1))
    stop = threading.Event()
    errors = []

    def read():
        last = 0
        while not stop.is_set():
            version = bus.current().version
            if version < last:
                errors.append((last, version))
            last = version

    readers = [threading.Thread(target=read) for _ in range(4)]
    for reader in readers:
        reader.start()
    for v in range(2, 2000):
        bus.publish(_Snapshot(v))
    stop.set()
    for reader in readers:
        reader.join()
    assert errors == []


# ===== experiments =====
def test_shift_recovery_validates_shift_time():
    with pytest.raises(ConfigError):
        shift_recovery(tiny_generator(), {'kind': 'cold', 'hidden': TINY_HIDDEN}, TrainConfig())


@pytest.mark.slow
def test_online_model_recovers_after_shift():
    gains = []
    for seed in range(3):
        generator = tiny_generator(seed=seed, n_users=500, n_ads=200, n_examples=60_000, user_buckets=8,
                                   ad_buckets=8, beta_cross=0.5, shift_at=30_000, shift_magnitude=3.0)
        config = TrainConfig(learning_rate=3e-3, batch_size=128, publish_every=2048, seed=seed)
        result = shift_recovery(generator, {'kind': 'cold', 'hidden': (64, 32), 'seed': seed}, config,
                                n_eval=5000)
        gains.append(result.gain)
    assert np.mean(gains) >= 0.05
