# ===== IMPORTS =====
# === Standard library ===
import logging
import pathlib

# === Local ===
import coldrank
from coldrank.features.dataset import read_dataset
from coldrank.models.checkpoint import create_model, load_checkpoint, save_model
from coldrank.training.trainer import ModelTrainer, OnlineStats, TrainConfig, train_online
from coldrank.utils import JsonLinesWriter


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== FUNCTIONS =====
def train_models(args):
    """Trains (or resumes) one COLD or two-tower model and writes its checkpoint."""
    checkpoint_path = pathlib.Path(args['checkpoint_path'])
    config = TrainConfig.from_args(args.get('training', {}))
    coldrank.utils.seed_everything(config.seed)

    schema, examples = read_dataset(args['dataset_path'])
    holdout = None
    if args.get('holdout_path'):
        holdout = read_dataset(args['holdout_path'])[1]

    start_epoch = 0
    adam = None
    if args.get('resume_from'):
        checkpoint = load_checkpoint(args['resume_from'], schema)
        model, adam = checkpoint.model, checkpoint.adam
        start_epoch = checkpoint.header.get('training', {}).get('epochs_done', 0)
        logger.info('Resuming %s model version %d after epoch %d', model.kind, model.version, start_epoch)
    else:
        model_args = dict(args.get('model', {'kind': 'cold'}))
        kind = model_args.pop('kind', 'cold')
        model = create_model(kind, schema, model_args)
        logger.info('Created %s model over groups %s', kind, model.selected)

    stats = {'step': args, 'kind': model.kind, 'groups': model.selected}
    with JsonLinesWriter(args.get('metrics_path')) as metrics:
        trainer = ModelTrainer(model, config, adam=adam, metrics=metrics, holdout=holdout)
        if args.get('online', False):
            online = OnlineStats()
            examples.sort(key=lambda e: e.timestamp)
            for _ in train_online(model, examples, config, stats=online, trainer=trainer):
                pass
            stats['online'] = vars(online)
            epochs_done = start_epoch
        else:
            trainer.fit(examples, start_epoch=start_epoch)
            model.version += 1
            epochs_done = start_epoch + config.epochs
        stats['holdout_auc'] = trainer.holdout_auc()

    save_model(model, checkpoint_path, adam=trainer.adam, training={'epochs_done': epochs_done})
    stats['version'] = model.version
    stats['final_loss'] = trainer.losses[-1] if trainer.losses else None
    if 'stats_path' in args:
        coldrank.utils.write_json(args['stats_path'], stats)
    return stats
