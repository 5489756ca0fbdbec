import logging

import click

from sif.commands import config_options, handle_errors, open_run
from sif.services.experiment import (
    CHECKPOINT_FILE,
    TRAIN_METRICS_FILE,
    prepare,
    save_split,
    write_json,
    write_resolved,
)
from sif.services.target_models import evaluate_accuracy, save_checkpoint, train_target

logger = logging.getLogger(__name__)


@click.command("train")
@config_options
@click.pass_obj
@handle_errors
def cmd(settings, config_path, out, seed):
    """Split the data and train the target model on D_mem."""
    run = open_run(settings, config_path, out, seed)
    write_resolved(run.cfg, run.out_dir)
    prepared = prepare(run.cfg)
    prepared.spec.check_cap(settings.PARAM_CAP)
    save_split(prepared.split, run.out_dir)

    cfg = run.cfg.train_config()
    logger.info(
        "training %s (%d parameters) on %d members for %d epochs",
        prepared.spec.arch, prepared.spec.num_params, len(prepared.split.members), cfg.epochs,
    )
    checkpoint = train_target(prepared.spec, prepared.dataset, prepared.split, cfg)
    save_checkpoint(checkpoint, run.path(CHECKPOINT_FILE))

    dataset, split = prepared.dataset, prepared.split
    metrics = {
        "train_accuracy": evaluate_accuracy(checkpoint, dataset.batch(split.members)),
        "validation_accuracy": evaluate_accuracy(checkpoint, dataset.batch(split.validation)),
        "test_accuracy": evaluate_accuracy(checkpoint, dataset.batch(split.non_members)),
        "best_epoch": checkpoint.best_epoch,
        "num_params": prepared.spec.num_params,
        "fingerprint": checkpoint.fingerprint,
    }
    write_json(run.path(TRAIN_METRICS_FILE), metrics)
    click.echo(
        f"train acc {metrics['train_accuracy']:.3f}  "
        f"test acc {metrics['test_accuracy']:.3f}  "
        f"best epoch {checkpoint.best_epoch}"
    )
