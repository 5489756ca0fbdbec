import os

import click

from sif.commands import handle_errors
from sif.errors import ConfigError
from sif.models import EvalReport
from sif.services.experiment import REPORT_FILE, read_json
from sif.services.metrics import comparison_table, histogram_export
from sif.services.score_store import read_scores


@click.command("report")
@click.option("--out", "out", type=click.Path(file_okay=False), required=True,
              help="Output directory of an attack run.")
@click.option("--scores", type=click.Path(dir_okay=False), default=None,
              help="Score CSV to bin into a histogram.")
@click.option("--bins", type=int, default=50)
@click.option("--histogram", type=click.Path(dir_okay=False), default=None,
              help="Where to write the histogram CSV.")
@handle_errors
def cmd(out, scores, bins, histogram):
    """Print the attack comparison table and export score histograms."""
    path = os.path.join(out, REPORT_FILE)
    if os.path.exists(path):
        reports = [EvalReport.from_dict(item) for item in read_json(path)["reports"]]
        click.echo(comparison_table(reports))
    elif scores is None:
        raise ConfigError(f"nothing to report: {path} does not exist")

    if scores is not None:
        if bins < 1:
            raise ConfigError("--bins must be >= 1")
        target = histogram or os.path.join(out, "histogram_" + os.path.basename(scores))
        histogram_export(read_scores(scores), bins).write_csv(target)
        click.echo(f"histogram written to {target}")
