import click

from sif.commands import config_options, handle_errors, open_run
from sif.errors import OracleFailure
from sif.services.experiment import ORACLE_FILE, prepare, write_json, write_resolved
from sif.services.oracle import run_oracle


@click.command("oracle")
@config_options
@click.pass_obj
@handle_errors
def cmd(settings, config_path, out, seed):
    """Check gradients, HVPs, LiSSA and influence against exact references."""
    run = open_run(settings, config_path, out, seed)
    write_resolved(run.cfg, run.out_dir)
    prepared = prepare(run.cfg)
    oracle_cfg = run.cfg.oracle
    report = run_oracle(
        prepared.spec,
        prepared.dataset,
        prepared.split.members,
        prepared.split.non_members,
        oracle_cfg,
        l2=oracle_cfg.l2,
        damping=oracle_cfg.damping,
        seed=run.cfg.seed,
        cap=settings.ORACLE_CAP,
    )
    write_json(run.path(ORACLE_FILE), report.to_dict())
    for check in report.checks:
        click.echo(
            f"{check.name:<28} {check.measured:>12.4e}  tol {check.tolerance:.1e}  "
            f"{'pass' if check.passed else 'FAIL'}"
        )
    if not report.passed:
        raise OracleFailure(f"failed checks: {', '.join(report.failed())}")
