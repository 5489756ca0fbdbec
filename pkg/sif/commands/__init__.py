"""Shared option sets and error handling for the CLI verbs."""

import functools
import logging
import os
from dataclasses import dataclass
from typing import Optional

import click

from sif.errors import ConfigError, SifError
from sif.services.experiment import (
    CHECKPOINT_FILE,
    ExperimentConfig,
    Prepared,
    load_experiment,
    load_split,
    prepare,
)
from sif.services.target_models import Checkpoint, load_checkpoint

logger = logging.getLogger(__name__)

SCORER_CHOICES = ("sif", "adasif", "avgsif")
SUBSET_CHOICES = ("fit", "eval", "all")


def handle_errors(func):
    """Log a SifError and exit with its code instead of a traceback."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SifError as exc:
            logger.error("%s: %s", type(exc).__name__, exc)
            click.get_current_context().exit(exc.exit_code)

    return wrapper


def config_options(func):
    func = click.option("--seed", type=int, default=None, help="Override the experiment seed.")(func)
    func = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                        help="Output directory (defaults to output_dir in the config).")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True,
                        help="Experiment YAML file.")(func)
    return func


@dataclass
class Run:
    cfg: ExperimentConfig
    out_dir: str

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)


def open_run(settings, config_path: str, out: Optional[str], seed: Optional[int], scorer: Optional[str] = None) -> Run:
    """Load the experiment; a relative output_dir from the file lives under settings.OUTPUT_DIR."""
    cfg = load_experiment(config_path).with_overrides(seed=seed, output_dir=out, scorer=scorer)
    if out is None and not os.path.isabs(cfg.output_dir):
        cfg = cfg.with_overrides(output_dir=os.path.join(settings.OUTPUT_DIR, cfg.output_dir))
    os.makedirs(cfg.output_dir, exist_ok=True)
    return Run(cfg, cfg.output_dir)


def prepared_with_split(run: Run) -> Prepared:
    """Data and model spec for a run whose split was written by ``train``."""
    if not os.path.exists(run.path("split.json")):
        raise ConfigError(f"no split in {run.out_dir}; run 'train' first")
    return prepare(run.cfg, load_split(run.out_dir))


def checkpoint_for(run: Run, prepared: Prepared, path: Optional[str]) -> Checkpoint:
    path = path or run.path(CHECKPOINT_FILE)
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    checkpoint = load_checkpoint(path)
    if checkpoint.spec.to_dict() != prepared.spec.to_dict():
        raise ConfigError("checkpoint architecture does not match the config")
    return checkpoint
