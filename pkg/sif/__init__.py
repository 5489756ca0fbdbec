import importlib
import logging

import click
import torch


def _load_config(config_class):
    if not isinstance(config_class, str):
        return config_class
    module_name, _, attr = config_class.rpartition(".")
    return getattr(importlib.import_module(module_name), attr)


def create_cli(config_class="config.Config"):
    settings = _load_config(config_class)

    logging.basicConfig(
        level=getattr(logging, str(settings.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if getattr(settings, "TORCH_THREADS", 0):
        torch.set_num_threads(settings.TORCH_THREADS)

    @click.group()
    @click.pass_context
    def cli(ctx):
        """Self-influence membership-inference pipeline."""
        ctx.obj = settings

    # Register commands
    from sif.commands import attack, oracle, report, score, train

    cli.add_command(train.cmd)
    cli.add_command(score.cmd)
    cli.add_command(attack.cmd)
    cli.add_command(oracle.cmd)
    cli.add_command(report.cmd)

    return cli
