import click

from sif.commands import (
    SCORER_CHOICES,
    SUBSET_CHOICES,
    checkpoint_for,
    config_options,
    handle_errors,
    open_run,
    prepared_with_split,
)
from sif.services.experiment import scores_path, write_resolved
from sif.services.score_store import score_to_file


@click.command("score")
@config_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None)
@click.option("--scorer", type=click.Choice(SCORER_CHOICES), default=None)
@click.option("--subset", type=click.Choice(SUBSET_CHOICES), default="all")
@click.option("--threads", type=int, default=None)
@click.pass_obj
@handle_errors
def cmd(settings, config_path, out, seed, checkpoint_path, scorer, subset, threads):
    """Compute one score row per sample of the chosen subset (resumable)."""
    run = open_run(settings, config_path, out, seed, scorer)
    write_resolved(run.cfg, run.out_dir)
    prepared = prepared_with_split(run)
    checkpoint = checkpoint_for(run, prepared, checkpoint_path)
    chosen = run.cfg.build_scorer()

    ids = prepared.split.subset(subset)
    sample_ids = sorted(ids["member"] + ids["non_member"])
    path = scores_path(run.out_dir, subset, chosen.kind)
    scored = score_to_file(
        path, chosen, checkpoint, prepared.dataset, prepared.split, sample_ids,
        threads=threads or settings.THREADS, flush_every=settings.PROGRESS_EVERY,
    )
    click.echo(f"{len(scored.records)} {chosen.kind} scores written to {path}")
