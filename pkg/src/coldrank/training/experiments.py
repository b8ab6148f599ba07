# ===== IMPORTS =====
# === Standard library ===
from dataclasses import asdict, dataclass
import logging

# === Thirdparty ===
import numpy as np

# === Local ===
import coldrank
from coldrank.data.generator import GeneratorConfig, generate
from coldrank.exceptions import ConfigError
from coldrank.features.dataset import RawExample
from coldrank.metrics import expected_auc
from coldrank.models.checkpoint import create_model
from coldrank.training.trainer import ModelTrainer, OnlineStats, TrainConfig, train_online


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
@dataclass
class ShiftRecovery:
    shift_at: int
    frozen_auc: float
    online_auc: float
    pre_shift_auc: float
    publishes: int

    @property
    def gain(self):
        return self.online_auc - self.frozen_auc


# ===== FUNCTIONS =====
def _eval_pairs(truth, n_pairs, seed):
    rng = np.random.default_rng(seed)
    users = rng.integers(truth.n_users, size=n_pairs)
    ads = rng.integers(truth.n_ads, size=n_pairs)
    examples = []
    for u, a in zip(users, ads):
        features = truth.user_features(u)
        features.update(truth.ad_features(a))
        examples.append(RawExample(int(u), int(a), features, 0, float(truth.ad_bid[a]), 0))
    return users, ads, examples


def shift_recovery(generator: GeneratorConfig, model_args, config: TrainConfig,
                   n_eval=20000, eval_seed=1) -> ShiftRecovery:
    """Frozen pre-shift snapshot vs the model that kept learning online through the shift."""
    if generator.shift_at is None or not 0 < generator.shift_at < generator.n_examples:
        raise ConfigError('shift_at must fall strictly inside the stream')
    schema, stream, truth = generate(generator)
    model_args = dict(model_args)
    model = create_model(model_args.pop('kind', 'cold'), schema, model_args)
    trainer = ModelTrainer(model, config)
    stats = OnlineStats()

    examples = list(stream)
    pre = [e for e in examples if e.timestamp < generator.shift_at]
    post = [e for e in examples if e.timestamp >= generator.shift_at]
    for _ in train_online(model, pre, config, stats=stats, trainer=trainer):
        pass
    frozen = model.clone()
    logger.info('Froze version %d at t0=%d', frozen.version, generator.shift_at)
    for _ in train_online(model, post, config, stats=stats, trainer=trainer):
        pass

    users, ads, eval_examples = _eval_pairs(truth, n_eval, eval_seed)
    before = truth.pctr(users, ads)
    after = truth.pctr(users, ads, np.full(n_eval, generator.shift_at))
    result = ShiftRecovery(
        shift_at=generator.shift_at,
        frozen_auc=expected_auc(frozen.score_examples(eval_examples), after),
        online_auc=expected_auc(model.score_examples(eval_examples), after),
        pre_shift_auc=expected_auc(frozen.score_examples(eval_examples), before),
        publishes=stats.publishes,
    )
    logger.info('Post-shift AUC: frozen %.4f, online %.4f', result.frozen_auc, result.online_auc)
    return result


def run_shift_recovery(args):
    seeds = args.get('seeds', [0])
    runs = []
    for seed in seeds:
        generator = GeneratorConfig.from_args({**args.get('generator', {}), 'seed': seed})
        config = TrainConfig.from_args({**args.get('training', {}), 'seed': seed})
        model_args = {**args.get('model', {'kind': 'cold'}), 'seed': seed}
        result = shift_recovery(generator, model_args, config, n_eval=args.get('n_eval', 20000))
        runs.append({'seed': seed, **asdict(result), 'gain': result.gain})
    report = {
        'step': args,
        'runs': runs,
        'mean_gain': float(np.mean([r['gain'] for r in runs])),
    }
    if 'stats_path' in args:
        coldrank.utils.write_json(args['stats_path'], report)
    return report
