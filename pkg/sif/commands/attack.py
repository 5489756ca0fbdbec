import logging
import time
from dataclasses import replace

import click

from sif.commands import (
    SCORER_CHOICES,
    checkpoint_for,
    config_options,
    handle_errors,
    open_run,
    prepared_with_split,
)
from sif.errors import AttackFitError, InfluenceError
from sif.services.attacks import (
    FitRecords,
    attack_from_records,
    blackbox_confidence_attack,
    decide,
    gap_predictions,
    predictions_frame,
)
from sif.services.experiment import (
    ATTACK_FILE,
    HISTOGRAM_FILE,
    REPORT_FILE,
    scores_path,
    write_json,
    write_resolved,
)
from sif.services.influence import Scorer
from sif.services.metrics import (
    comparison_table,
    histogram_export,
    report_from_predictions,
    report_from_records,
)
from sif.services.score_store import score_to_file

logger = logging.getLogger(__name__)


def _scorers(run) -> list:
    """Plain SIF, then the configured scorer, plus ada_sif whenever training used augmentation."""
    plain = run.cfg.with_overrides(scorer="sif").build_scorer()
    scorers = [plain]
    primary = run.cfg.build_scorer()
    if primary.kind != "sif":
        scorers.append(primary)
    if not run.cfg.augmentation.is_identity and primary.kind != "ada_sif":
        ada_lissa = replace(plain.lissa, repeats=8, depth=8)
        scorers.append(replace(plain, kind="ada_sif", lissa=ada_lissa))
    return scorers


@click.command("attack")
@config_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None)
@click.option("--scorer", type=click.Choice(SCORER_CHOICES), default=None)
@click.option("--threads", type=int, default=None)
@click.pass_obj
@handle_errors
def cmd(settings, config_path, out, seed, checkpoint_path, scorer, threads):
    """Fit the SIF attack on the fit subsets and compare it with the baselines."""
    run = open_run(settings, config_path, out, seed, scorer)
    write_resolved(run.cfg, run.out_dir)
    prepared = prepared_with_split(run)
    dataset, split = prepared.dataset, prepared.split
    checkpoint = checkpoint_for(run, prepared, checkpoint_path)
    threads = threads or settings.THREADS
    fit_ids, eval_ids = split.subset("fit"), split.subset("eval")

    def scored(chosen: Scorer, subset: str, ids: dict, budget_error=InfluenceError):
        return score_to_file(
            scores_path(run.out_dir, subset, chosen.kind), chosen, checkpoint, dataset, split,
            sorted(ids["member"] + ids["non_member"]),
            threads=threads, flush_every=settings.PROGRESS_EVERY, budget_error=budget_error,
        )

    # the gap attack calls a sample a member exactly when the target labels it correctly
    started = time.perf_counter()
    gap_members = gap_predictions(checkpoint, dataset, eval_ids["member"])
    gap_non_members = gap_predictions(checkpoint, dataset, eval_ids["non_member"])
    gap_seconds = (time.perf_counter() - started) / max(1, len(gap_members) + len(gap_non_members))
    target = {
        "member_accuracy": float(gap_members.mean()),
        "non_member_accuracy": float(gap_non_members.mean()),
    }
    reports = []
    reports.append(replace(
        report_from_predictions("gap", gap_members, gap_non_members),
        fit_seconds=0.0, inference_seconds_per_sample=gap_seconds,
    ))
    predictions_frame(eval_ids["member"], gap_members, eval_ids["non_member"], gap_non_members).to_csv(
        run.path("predictions_gap.csv"), index=False
    )

    blackbox = blackbox_confidence_attack(checkpoint, dataset, split, seed=run.cfg.seed)
    reports.append(replace(
        report_from_predictions("blackbox", blackbox.member_predictions, blackbox.non_member_predictions),
        fit_seconds=blackbox.fit_seconds,
        inference_seconds_per_sample=blackbox.inference_seconds_per_sample,
    ))
    predictions_frame(
        eval_ids["member"], blackbox.member_predictions,
        eval_ids["non_member"], blackbox.non_member_predictions,
    ).to_csv(run.path("predictions_blackbox.csv"), index=False)

    for index, chosen in enumerate(_scorers(run)):
        # too many unscorable fit samples means no attack can be fitted
        fit_scored = scored(chosen, "fit", fit_ids, budget_error=AttackFitError)
        fit_records = fit_scored.records
        fit_wanted = len(fit_ids["member"]) + len(fit_ids["non_member"])
        dropped = sorted(
            set(fit_ids["member"] + fit_ids["non_member"]) - {r.sample_id for r in fit_records}
        )
        if dropped:
            logger.warning("fitting %s without %d of %d samples", chosen.kind, len(dropped), fit_wanted)
        search_started = time.perf_counter()
        attack = attack_from_records(
            FitRecords.from_records(fit_records), chosen, checkpoint,
            seed=run.cfg.seed, grid_size=run.cfg.attack.grid_size, dropped=dropped,
        )
        search_seconds = time.perf_counter() - search_started
        attack_file = ATTACK_FILE if index == 0 else f"attack_{chosen.kind}.json"
        write_json(run.path(attack_file), attack.to_dict())

        eval_scored = scored(chosen, "eval", eval_ids)
        eval_records = eval_scored.records
        # resumed rows cost nothing here, so fitting cost extrapolates from the rows scored now
        per_fit_sample = fit_scored.seconds_per_sample
        fit_seconds = None if per_fit_sample is None else per_fit_sample * len(fit_records) + search_seconds
        report = report_from_records(attack, eval_records, chosen.kind)
        reports.append(replace(
            report,
            descriptor={**report.descriptor, "tau1": attack.tau1, "tau2": attack.tau2},
            fit_seconds=fit_seconds,
            inference_seconds_per_sample=eval_scored.seconds_per_sample,
        ))
        members = [r for r in eval_records if r.membership == 1]
        non_members = [r for r in eval_records if r.membership == 0]
        predictions_frame(
            [r.sample_id for r in members], [decide(attack, r) for r in members],
            [r.sample_id for r in non_members], [decide(attack, r) for r in non_members],
        ).to_csv(run.path(f"predictions_{chosen.kind}.csv"), index=False)
        if index == 0:
            histogram_export(fit_records + eval_records, run.cfg.attack.histogram_bins).write_csv(
                run.path(HISTOGRAM_FILE)
            )

    write_json(run.path(REPORT_FILE), {
        "target": target,
        "rows": [
            {
                "attack": r.attack,
                "member_accuracy": r.member_accuracy,
                "non_member_accuracy": r.non_member_accuracy,
                "balanced_accuracy": r.balanced_accuracy,
                "fit_seconds": r.fit_seconds,
                "inference_seconds_per_sample": r.inference_seconds_per_sample,
            }
            for r in reports
        ],
        "reports": [r.to_dict() for r in reports],
    })
    click.echo(comparison_table(reports))
