# ===== IMPORTS =====
# === Standard library ===
import hashlib
import logging
import pathlib

# === Local ===
import coldrank
from coldrank.data.generator import GeneratorConfig, generate, write_truth
from coldrank.exceptions import ConfigError
from coldrank.features.dataset import write_dataset


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== FUNCTIONS =====
def file_digest(path):
    digest = hashlib.sha256()
    with pathlib.Path(path).open('rb') as in_f:
        for chunk in iter(lambda: in_f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def prepare(args):
    """Generates a synthetic dataset, its holdout tail and the ground-truth sidecar."""
    dataset_path = pathlib.Path(args['dataset_path'])
    truth_path = pathlib.Path(args['truth_path'])
    holdout_path = args.get('holdout_path')
    holdout_fraction = float(args.get('holdout_fraction', 0.1))
    if holdout_path is not None and not 0.0 < holdout_fraction < 1.0:
        raise ConfigError(f'holdout_fraction must lie in (0, 1), got {holdout_fraction}')

    config = GeneratorConfig.from_args(args.get('generator', {}))
    logger.info('Generating %d examples for %d users and %d ads (seed %d)',
                config.n_examples, config.n_users, config.n_ads, config.seed)
    schema, stream, truth = generate(config)

    n_train = config.n_examples
    if holdout_path is not None:
        n_train = config.n_examples - int(round(config.n_examples * holdout_fraction))
    train, holdout = [], []
    for example in stream:
        (train if example.timestamp < n_train else holdout).append(example)

    n_records = write_dataset(dataset_path, schema, train)
    stats = {
        'step': args,
        'schema_digest': schema.digest(),
        'dataset': {'path': str(dataset_path), 'records': n_records, 'sha256': file_digest(dataset_path)},
    }
    if holdout_path is not None:
        write_dataset(holdout_path, schema, holdout)
        stats['holdout'] = {'path': str(holdout_path), 'records': len(holdout),
                            'sha256': file_digest(holdout_path)}
    write_truth(truth_path, truth)

    clicks = sum(e.label for e in train)
    stats['ctr'] = clicks / n_records if n_records else 0.0
    logger.info('Train CTR %.4f over %d records', stats['ctr'], n_records)
    if 'stats_path' in args:
        coldrank.utils.write_json(args['stats_path'], stats)
    return stats
