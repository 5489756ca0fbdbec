"""Attack evaluation: balanced accuracy, confusion-count reports and score histograms."""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from sif.errors import CheckpointMismatchError
from sif.models import AttackModel, EvalReport, MiSplit, SifRecord
from sif.services.attacks import check_failures, decide
from sif.services.data import LabeledDataset
from sif.services.influence import Sampler, Scorer, score_samples
from sif.services.target_models import Checkpoint

logger = logging.getLogger(__name__)

HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "member_count", "nonmember_count"]


def _bits(preds: Iterable[int], what: str) -> np.ndarray:
    array = np.asarray(list(preds), dtype=np.int64)
    if array.size == 0:
        raise ValueError(f"{what} predictions must not be empty")
    if not np.isin(array, (0, 1)).all():
        raise ValueError(f"{what} predictions must be 0/1")
    return array


def balanced_accuracy(member_preds: Iterable[int], non_member_preds: Iterable[int]) -> float:
    """(sum of member predictions + sum of (1 - non-member predictions)) / (N1 + N2)."""
    members = _bits(member_preds, "member")
    non_members = _bits(non_member_preds, "non-member")
    return (int(members.sum()) + int((1 - non_members).sum())) / (len(members) + len(non_members))


def report_from_predictions(
    attack: str,
    member_preds: Iterable[int],
    non_member_preds: Iterable[int],
    descriptor: Optional[dict] = None,
) -> EvalReport:
    members = _bits(member_preds, "member")
    non_members = _bits(non_member_preds, "non-member")
    true_positive = int(members.sum())
    false_positive = int(non_members.sum())
    return EvalReport(
        attack=attack,
        true_positive=true_positive,
        false_negative=len(members) - true_positive,
        false_positive=false_positive,
        true_negative=len(non_members) - false_positive,
        descriptor=descriptor or {},
    )


def report_from_records(attack: AttackModel, records: Sequence[SifRecord], name: str = "sif") -> EvalReport:
    """Apply a fitted attack to already-scored evaluation records."""
    members = [decide(attack, r) for r in records if r.membership == 1]
    non_members = [decide(attack, r) for r in records if r.membership == 0]
    return report_from_predictions(name, members, non_members, attack.scorer)


def eval_attack(
    attack: AttackModel,
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    split: MiSplit,
    train_sampler: Sampler,
    threads: int = 1,
    name: Optional[str] = None,
) -> EvalReport:
    """Score D_mem^test and D_non-mem^test and compare the attack's calls with the truth."""
    if attack.checkpoint_fingerprint and attack.checkpoint_fingerprint != checkpoint.fingerprint:
        raise CheckpointMismatchError("attack and checkpoint fingerprints differ")
    eval_ids = split.subset("eval")
    ids = sorted(eval_ids["member"] + eval_ids["non_member"])
    scorer = Scorer.from_descriptor(attack.scorer)
    records, failures = score_samples(
        scorer, checkpoint, dataset, ids, train_sampler,
        membership=split.membership, threads=threads, progress=True,
    )
    check_failures(failures, len(ids))
    return report_from_records(attack, records, name or scorer.kind)


@dataclass(frozen=True, eq=False)
class Histogram:
    """Member and non-member score counts over shared bin edges."""

    edges: np.ndarray
    member_counts: np.ndarray
    non_member_counts: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin_left": self.edges[:-1],
            "bin_right": self.edges[1:],
            "member_count": self.member_counts,
            "nonmember_count": self.non_member_counts,
        })[HISTOGRAM_COLUMNS]

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def histogram_export(
    records: Sequence[SifRecord],
    bins: int = 50,
    value_range: Optional[Tuple[float, float]] = None,
) -> Histogram:
    """
    Bin member and non-member scores on one shared range.

    Args:
        records: Scored samples; records without ground truth only widen the range
        bins: Number of equal-width bins
        value_range: Fixed (low, high); defaults to the span of all scores

    Returns:
        Histogram whose counts add up to the member and non-member record counts
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    scores = np.array([r.score for r in records], dtype=np.float64)
    if value_range is None:
        if scores.size == 0:
            value_range = (0.0, 1.0)
        elif scores.min() == scores.max():
            value_range = (scores.min() - 0.5, scores.max() + 0.5)
        else:
            value_range = (scores.min(), scores.max())
    members = np.array([r.score for r in records if r.membership == 1], dtype=np.float64)
    non_members = np.array([r.score for r in records if r.membership == 0], dtype=np.float64)
    member_counts, edges = np.histogram(members, bins=bins, range=value_range)
    non_member_counts, _ = np.histogram(non_members, bins=edges)
    return Histogram(edges, member_counts, non_member_counts)


def mass_within(records: Sequence[SifRecord], tau1: float, tau2: float, membership: int = 1) -> float:
    """Fraction of one class's scores inside the open interval (tau1, tau2)."""
    scores = np.array([r.score for r in records if r.membership == membership], dtype=np.float64)
    if scores.size == 0:
        return 0.0
    return float(((scores > tau1) & (scores < tau2)).mean())


def interquartile_range(records: Sequence[SifRecord], membership: int = 1) -> float:
    scores = np.array([r.score for r in records if r.membership == membership], dtype=np.float64)
    if scores.size == 0:
        raise ValueError(f"no records with membership {membership} to take an interquartile range of")
    q1, q3 = np.percentile(scores, [25, 75])
    return float(q3 - q1)


def _fmt(value: Optional[float]) -> str:
    return "null" if value is None else f"{value:.3f}"


def _fmt_seconds(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3g}"


def comparison_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-width rows: accuracies, precision/recall, then fit seconds and inference seconds per sample."""
    header = (
        f"{'attack':<10} {'member':>7} {'non-mem':>7} {'balanced':>8} {'m-prec':>7} {'m-rec':>7} {'nm-prec':>7} {'nm-rec':>7} "
        f"{'fit s':>9} {'infer s':>9}"
    )
    lines: List[str] = [header, "-" * len(header)]
    for report in reports:
        lines.append(
            f"{report.attack:<10} {_fmt(report.member_accuracy):>7} {_fmt(report.non_member_accuracy):>7} "
            f"{_fmt(report.balanced_accuracy):>8} {_fmt(report.member_precision):>7} "
            f"{_fmt(report.member_recall):>7} {_fmt(report.non_member_precision):>7} "
            f"{_fmt(report.non_member_recall):>7} "
            f"{_fmt_seconds(report.fit_seconds):>9} {_fmt_seconds(report.inference_seconds_per_sample):>9}"
        )
    return "\n".join(lines)
