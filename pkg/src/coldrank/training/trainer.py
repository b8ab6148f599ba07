# ===== IMPORTS =====
# === Standard library ===
from dataclasses import dataclass, fields
import logging
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

# === Thirdparty ===
import numpy as np
import torch
from tqdm import tqdm
import tqdm_logging_wrapper

# === Local ===
from coldrank.exceptions import ConfigError, DatasetError, UndefinedMetricError
from coldrank.features.batch import encode_examples
from coldrank.features.dataset import RawExample
from coldrank.metrics import auc
from coldrank.numerics import AdamState, adam_step, cross_entropy_2
from coldrank.training.bus import SnapshotBus
from coldrank.utils import JsonLinesWriter


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    # examples between snapshot publishes; None publishes once at the end
    publish_every: Optional[int] = None
    shuffle: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be at least 1, got {self.batch_size}')
        if self.publish_every is not None and self.publish_every < self.batch_size:
            raise ConfigError(f'publish_every ({self.publish_every}) < batch_size ({self.batch_size})')
        if self.epochs < 0:
            raise ConfigError('epochs must be non-negative')
        if self.learning_rate < 0:
            raise ConfigError('learning_rate must be non-negative')

    @classmethod
    def from_args(cls, args: Dict):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in args.items() if k in known})

    def adam_state(self) -> AdamState:
        return AdamState(learning_rate=self.learning_rate, beta1=self.beta1,
                         beta2=self.beta2, epsilon=self.epsilon)


@dataclass
class OnlineStats:
    examples: int = 0
    batches: int = 0
    publishes: int = 0
    rejected: int = 0


class ModelTrainer:
    """Adam on click cross-entropy for any model exposing `training_logits`."""

    def __init__(self, model, config: TrainConfig, adam: Optional[AdamState] = None,
                 metrics: Optional[JsonLinesWriter] = None, holdout: Optional[Sequence[RawExample]] = None):
        self.model = model
        self.config = config
        self._params = list(model.parameters())
        self.adam = adam if adam is not None else config.adam_state()
        self.adam.bind(self._params)
        self.metrics = metrics if metrics is not None else JsonLinesWriter(None)
        self.holdout = holdout
        self.examples_seen = 0
        self.losses: List[float] = []

    def step(self, examples: Sequence[RawExample]) -> float:
        batch = encode_examples(self.model.schema, examples, self.model.selected)
        logits = self.model.training_logits(batch)
        loss = cross_entropy_2(logits, torch.from_numpy(batch.labels))
        grads = torch.autograd.grad(loss, self._params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self._params, grads)]
        adam_step(self.adam, self._params, grads)
        self.examples_seen += len(examples)
        self.losses.append(float(loss.item()))
        logger.debug('Step %d, loss %.5f', self.adam.step, self.losses[-1])
        return self.losses[-1]

    def holdout_auc(self) -> Optional[float]:
        if not self.holdout:
            return None
        labels = np.array([e.label for e in self.holdout])
        try:
            return auc(self.model.score_examples(self.holdout), labels)
        except UndefinedMetricError:
            return None

    def log_metrics(self, window: int):
        recent = self.losses[-window:] if window else []
        record = {
            'step': self.adam.step,
            'examples': self.examples_seen,
            'loss': float(np.mean(recent)) if recent else None,
            'holdout_auc': self.holdout_auc(),
            'version': self.model.version,
        }
        self.metrics.write(record)
        return record

    def epoch_order(self, n_examples, epoch) -> np.ndarray:
        if not self.config.shuffle:
            return np.arange(n_examples)
        return np.random.default_rng([self.config.seed, epoch]).permutation(n_examples)

    def fit(self, examples: Sequence[RawExample], start_epoch=0):
        if not examples:
            raise DatasetError('Cannot train on an empty dataset')
        size = self.config.batch_size
        for epoch in range(start_epoch, start_epoch + self.config.epochs):
            order = self.epoch_order(len(examples), epoch)
            starts = tqdm(range(0, len(order), size), desc=f'epoch {epoch}')
            with tqdm_logging_wrapper.wrap_logging_for_tqdm(starts), starts:
                for start in starts:
                    self.step([examples[i] for i in order[start:start + size]])
            n_batches = -(-len(order) // size)
            record = self.log_metrics(n_batches)
            logger.info('Epoch %d finished: loss %.5f, holdout AUC %s',
                        epoch, record['loss'], record['holdout_auc'])
        return self.model


# ===== FUNCTIONS =====
def train_batch(model, examples: Sequence[RawExample], config: TrainConfig,
                metrics: Optional[JsonLinesWriter] = None, holdout=None):
    """Trains a copy of `model`; the returned snapshot carries the next version."""
    if not examples:
        raise DatasetError('Cannot train on an empty dataset')
    trained = model.clone()
    ModelTrainer(trained, config, metrics=metrics, holdout=holdout).fit(examples)
    trained.version = model.version + 1
    return trained


def train_online(model, stream: Iterable[RawExample], config: TrainConfig,
                 bus: Optional[SnapshotBus] = None, stats: Optional[OnlineStats] = None,
                 trainer: Optional[ModelTrainer] = None,
                 metrics: Optional[JsonLinesWriter] = None, holdout=None) -> Iterator:
    """One Adam step per arriving mini-batch; yields every published snapshot.

    `model` is the writer's private copy; readers only ever see clones.
    Records older than the newest accepted timestamp are dropped and counted.
    """
    stats = stats if stats is not None else OnlineStats()
    trainer = trainer if trainer is not None else ModelTrainer(model, config, metrics=metrics, holdout=holdout)
    publish_every = config.publish_every
    pending, unpublished, last_ts = [], 0, None

    def publish():
        model.version += 1
        snapshot = model.clone()
        if bus is not None:
            bus.publish(snapshot)
        stats.publishes += 1
        trainer.log_metrics(max(1, -(-unpublished // config.batch_size)))
        return snapshot

    for example in stream:
        if last_ts is not None and example.timestamp < last_ts:
            stats.rejected += 1
            logger.warning('Rejected out-of-order record at t=%d (newest accepted t=%d)',
                           example.timestamp, last_ts)
            continue
        last_ts = example.timestamp
        pending.append(example)
        if len(pending) < config.batch_size:
            continue
        trainer.step(pending)
        stats.batches += 1
        stats.examples += len(pending)
        unpublished += len(pending)
        pending = []
        if publish_every is not None and unpublished >= publish_every:
            yield publish()
            unpublished = 0

    if pending:
        trainer.step(pending)
        stats.batches += 1
        stats.examples += len(pending)
        unpublished += len(pending)
    if unpublished:
        yield publish()
    logger.info('Online stream done: %d examples, %d publishes, %d rejected',
                stats.examples, stats.publishes, stats.rejected)
