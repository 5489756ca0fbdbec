"""Membership-inference attacks: the two-threshold SIF attack and baselines."""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler

from sif.errors import AttackFitError, CheckpointMismatchError
from sif.models import AttackModel, MiSplit, SifRecord
from sif.services.data import LabeledDataset
from sif.services.influence import Sample, Sampler, Scorer, TrainingSampler, score_samples
from sif.services.target_models import Checkpoint, predict, predict_batch

logger = logging.getLogger(__name__)

GRID_SIZE = 1000
MAX_FAILURE_RATE = 0.01
PREDICTION_COLUMNS = ["sample_id", "prediction", "ground_truth"]


@dataclass(frozen=True)
class FitRecords:
    """Scored member and non-member samples of the fit subsets."""

    members: List[SifRecord]
    non_members: List[SifRecord]

    def __post_init__(self):
        if not self.members:
            raise AttackFitError("threshold fitting needs at least one member record")

    @classmethod
    def from_records(cls, records: Sequence[SifRecord]) -> "FitRecords":
        """Split by the stored ground truth; records without one are ignored."""
        return cls(
            members=[r for r in records if r.membership == 1],
            non_members=[r for r in records if r.membership == 0],
        )

    @staticmethod
    def _eligible(records: Sequence[SifRecord]) -> np.ndarray:
        return np.sort(np.array([r.score for r in records if r.label_match == 1], dtype=np.float64))

    def member_scores(self) -> np.ndarray:
        return np.array([r.score for r in self.members], dtype=np.float64)

    def eligible_members(self) -> np.ndarray:
        return self._eligible(self.members)

    def eligible_non_members(self) -> np.ndarray:
        return self._eligible(self.non_members)


@dataclass(frozen=True)
class ThresholdFit:
    tau1: float
    tau2: float
    balanced_accuracy: float
    grid_size: int


def threshold_grids(member_scores: np.ndarray, grid_size: int = GRID_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    """Candidate tau1 values around the lowest member score, tau2 around the highest.

    Both grids span one member-score range ``delta``. When every member has
    the same score v, ``delta`` becomes max(|v| * 1e-6, 1e-12) and the grids
    move to either side of v so that every pair brackets it.
    """
    low, high = float(member_scores.min()), float(member_scores.max())
    delta = high - low
    if delta > 0:
        return (
            np.linspace(low - delta / 2, low + delta / 2, grid_size),
            np.linspace(high - delta / 2, high + delta / 2, grid_size),
        )
    eps = max(abs(low) * 1e-6, 1e-12)
    return (
        np.linspace(low - 3 * eps / 2, low - eps / 2, grid_size),
        np.linspace(high + eps / 2, high + 3 * eps / 2, grid_size),
    )


def _open_interval_counts(sorted_scores: np.ndarray, tau1: np.ndarray, tau2: np.ndarray) -> np.ndarray:
    """counts[i, j] = #{s : tau1[i] < s < tau2[j]}."""
    below_or_at = np.searchsorted(sorted_scores, tau1, side="right")
    below = np.searchsorted(sorted_scores, tau2, side="left")
    return np.maximum(below[None, :] - below_or_at[:, None], 0)


def _pick(grid1: np.ndarray, grid2: np.ndarray, correct: np.ndarray, total: int) -> ThresholdFit:
    # argmax returns the first maximum in row-major order: ascending tau1, then tau2
    flat = int(np.argmax(correct))
    i, j = divmod(flat, correct.shape[1])
    tau1, tau2 = float(grid1[i]), float(grid2[j])
    if not tau1 < tau2:
        raise AttackFitError(
            f"best threshold pair is empty (tau1={tau1!r}, tau2={tau2!r}); "
            "member and non-member scores are not separable on this grid"
        )
    return ThresholdFit(tau1, tau2, int(correct[i, j]) / total, len(grid1))


def set_thresholds(fit: FitRecords, grid_size: int = GRID_SIZE) -> ThresholdFit:
    """Pick (tau1, tau2) maximizing balanced accuracy over the grid pairs.

    A sample is predicted member iff tau1 < score < tau2 and its label is
    predicted correctly. Counts come from prefix lookups on sorted scores.
    """
    grid1, grid2 = threshold_grids(fit.member_scores(), grid_size)
    n1, n2 = len(fit.members), len(fit.non_members)
    true_pos = _open_interval_counts(fit.eligible_members(), grid1, grid2)
    false_pos = _open_interval_counts(fit.eligible_non_members(), grid1, grid2)
    return _pick(grid1, grid2, true_pos + (n2 - false_pos), n1 + n2)


def scan_thresholds_naive(fit: FitRecords, grid_size: int = GRID_SIZE) -> ThresholdFit:
    """Reference scan: evaluates the membership rule on every record for every pair."""
    grid1, grid2 = threshold_grids(fit.member_scores(), grid_size)
    scores = np.array([r.score for r in fit.members + fit.non_members], dtype=np.float64)
    match = np.array([r.label_match for r in fit.members + fit.non_members], dtype=bool)
    is_member = np.arange(len(scores)) < len(fit.members)
    n1, n2 = len(fit.members), len(fit.non_members)
    correct = np.empty((len(grid1), len(grid2)), dtype=np.int64)
    for i, tau1 in enumerate(grid1):
        predicted = (scores[None, :] > tau1) & (scores[None, :] < grid2[:, None]) & match[None, :]
        true_pos = (predicted & is_member[None, :]).sum(axis=1)
        false_pos = (predicted & ~is_member[None, :]).sum(axis=1)
        correct[i] = true_pos + (n2 - false_pos)
    return _pick(grid1, grid2, correct, n1 + n2)


def decide(attack: AttackModel, record: SifRecord) -> int:
    return int(attack.contains(record.score) and record.label_match == 1)


def attack_from_records(
    fit: FitRecords,
    scorer: Scorer,
    checkpoint: Checkpoint,
    seed: int = 0,
    grid_size: int = GRID_SIZE,
    dropped: Sequence[int] = (),
) -> AttackModel:
    thresholds = set_thresholds(fit, grid_size)
    logger.info(
        "fitted thresholds tau1=%.6g tau2=%.6g (train balanced accuracy %.4f)",
        thresholds.tau1, thresholds.tau2, thresholds.balanced_accuracy,
    )
    return AttackModel(
        tau1=thresholds.tau1,
        tau2=thresholds.tau2,
        scorer=scorer.descriptor(),
        checkpoint_fingerprint=checkpoint.fingerprint,
        seed=seed,
        train_balanced_accuracy=thresholds.balanced_accuracy,
        grid_size=grid_size,
        dropped_samples=sorted(dropped),
    )


def check_failures(failures: Dict[int, str], attempted: int) -> None:
    """Abort when more than 1% of the samples could not be scored."""
    if not failures:
        return
    if len(failures) > MAX_FAILURE_RATE * attempted:
        raise AttackFitError(
            f"scoring failed on {len(failures)} of {attempted} samples: {sorted(failures)}"
        )
    logger.warning("dropping %d unscored samples from the fit: %s", len(failures), sorted(failures))


def members_sampler(dataset: LabeledDataset, split: MiSplit, scorer: Scorer) -> TrainingSampler:
    return TrainingSampler(dataset, split.members, scorer.lissa.sample_batch)


def fit_sif_attack(
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    split: MiSplit,
    scorer: Scorer,
    threads: int = 1,
    grid_size: int = GRID_SIZE,
) -> AttackModel:
    """
    Score D_mem^train and D_non-mem^train, then fit the thresholds.

    Args:
        checkpoint: Frozen target model
        dataset: Dataset the split indexes into
        split: Member/non-member split; only the fit subsets are scored
        scorer: Score kind and LiSSA settings, stored in the attack
        threads: Worker threads for scoring
        grid_size: Points per threshold grid

    Returns:
        AttackModel with (tau1, tau2) and the checkpoint fingerprint
    """
    fit_ids = split.subset("fit")
    ids = sorted(fit_ids["member"] + fit_ids["non_member"])
    if not fit_ids["member"] or not fit_ids["non_member"]:
        raise AttackFitError("fit subsets must both be non-empty")
    records, failures = score_samples(
        scorer, checkpoint, dataset, ids, members_sampler(dataset, split, scorer),
        membership=split.membership, threads=threads, progress=True,
    )
    check_failures(failures, len(ids))
    return attack_from_records(
        FitRecords.from_records(records), scorer, checkpoint,
        seed=scorer.lissa.seed, grid_size=grid_size, dropped=list(failures),
    )


def infer_membership(
    attack: AttackModel,
    checkpoint: Checkpoint,
    z: Sample,
    train_sampler: Sampler,
    sample_id: int = 0,
) -> int:
    """
    1 iff tau1 < score(z) < tau2 and the target labels z correctly.

    Args:
        attack: Fitted thresholds and the scorer they were fitted with
        checkpoint: Must be the checkpoint the attack was fitted on
        z: Sample to classify
        train_sampler: Minibatches of D_mem for the LiSSA Hessians
        sample_id: Seeds the per-sample LiSSA draws

    Returns:
        1 for member, 0 for non-member
    """
    if attack.checkpoint_fingerprint and attack.checkpoint_fingerprint != checkpoint.fingerprint:
        raise CheckpointMismatchError(
            f"attack was fitted on checkpoint {attack.checkpoint_fingerprint[:12]}, "
            f"got {checkpoint.fingerprint[:12]}"
        )
    record = Scorer.from_descriptor(attack.scorer).score(checkpoint, train_sampler, z, sample_id)
    return decide(attack, record)


def gap_attack(checkpoint: Checkpoint, z: Sample) -> int:
    """Member iff the target classifies z correctly."""
    predicted, _ = predict(checkpoint, z[0])
    return int(predicted == z[1])


def gap_predictions(checkpoint: Checkpoint, dataset: LabeledDataset, ids: Sequence[int]) -> np.ndarray:
    if not len(ids):
        return np.zeros(0, dtype=np.int64)
    batch = dataset.batch(ids)
    predicted, _ = predict_batch(checkpoint, batch.inputs)
    return (predicted == batch.labels).numpy().astype(np.int64)


def gap_balanced_accuracy(member_accuracy: float, non_member_accuracy: float) -> float:
    """Balanced accuracy of the gap attack from the target's accuracy on each set."""
    return 0.5 + 0.5 * (member_accuracy - non_member_accuracy)


def confidence_features(probs: torch.Tensor, labels: torch.Tensor) -> np.ndarray:
    """Rows of [probabilities sorted descending, cross-entropy, label-match bit]."""
    probs = probs.detach().to(torch.float64)
    ordered, _ = torch.sort(probs, dim=1, descending=True)
    picked = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    loss = -torch.log(picked.clamp_min(torch.finfo(torch.float64).tiny))
    match = (probs.argmax(dim=1) == labels).to(torch.float64)
    return torch.cat([ordered, loss.unsqueeze(1), match.unsqueeze(1)], dim=1).numpy()


def fit_confidence_attack(member_features: np.ndarray, non_member_features: np.ndarray, seed: int = 0) -> Pipeline:
    """Regularized logistic attack classifier on confidence features."""
    if not len(member_features) or not len(non_member_features):
        raise AttackFitError("confidence attack needs both member and non-member fit samples")
    features = np.vstack([member_features, non_member_features])
    labels = np.concatenate([np.ones(len(member_features)), np.zeros(len(non_member_features))])
    model = Pipeline([
        ("scaler", StandardScaler()),
        ("classifier", LogisticRegression(C=1.0, max_iter=1000, random_state=seed)),
    ])
    return model.fit(features, labels)


def _features_for(checkpoint: Checkpoint, dataset: LabeledDataset, ids: Sequence[int]) -> np.ndarray:
    batch = dataset.batch(ids)
    _, probs = predict_batch(checkpoint, batch.inputs)
    return confidence_features(probs, batch.labels)


@dataclass
class BlackBoxResult:
    model: Pipeline
    member_predictions: np.ndarray
    non_member_predictions: np.ndarray
    fit_seconds: float = 0.0
    inference_seconds_per_sample: float = 0.0


def blackbox_confidence_attack(
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    split: MiSplit,
    seed: int = 0,
) -> BlackBoxResult:
    """
    Fit on the fit subsets' confidence vectors, predict on the eval subsets.

    Args:
        checkpoint: Frozen target model queried for probabilities only
        dataset: Dataset the split indexes into
        split: Member/non-member split; the fit subsets train the attack classifier
        seed: Seed of the logistic attack classifier

    Returns:
        BlackBoxResult with eval predictions and the fit and per-sample inference times
    """
    fit_ids = split.subset("fit")
    eval_ids = split.subset("eval")
    started = time.perf_counter()
    model = fit_confidence_attack(
        _features_for(checkpoint, dataset, fit_ids["member"]),
        _features_for(checkpoint, dataset, fit_ids["non_member"]),
        seed,
    )
    fitted = time.perf_counter()
    member_predictions = model.predict(_features_for(checkpoint, dataset, eval_ids["member"])).astype(np.int64)
    non_member_predictions = model.predict(_features_for(checkpoint, dataset, eval_ids["non_member"])).astype(np.int64)
    evaluated = len(member_predictions) + len(non_member_predictions)
    return BlackBoxResult(
        model,
        member_predictions,
        non_member_predictions,
        fit_seconds=fitted - started,
        inference_seconds_per_sample=(time.perf_counter() - fitted) / max(1, evaluated),
    )


def predictions_frame(
    member_ids: Sequence[int],
    member_predictions: Sequence[int],
    non_member_ids: Sequence[int],
    non_member_predictions: Sequence[int],
) -> pd.DataFrame:
    frame = pd.DataFrame({
        "sample_id": list(member_ids) + list(non_member_ids),
        "prediction": list(member_predictions) + list(non_member_predictions),
        "ground_truth": [1] * len(member_ids) + [0] * len(non_member_ids),
    })
    return frame.sort_values("sample_id").reset_index(drop=True)[PREDICTION_COLUMNS]


def one_sided_scan(fit: FitRecords, grid_size: int = GRID_SIZE, side: str = "upper") -> Optional[ThresholdFit]:
    """Best single-threshold rule from the same grids: only tau2 (or only tau1) is finite."""
    grid1, grid2 = threshold_grids(fit.member_scores(), grid_size)
    n1, n2 = len(fit.members), len(fit.non_members)
    if side == "upper":
        lower, upper = np.array([-np.inf]), grid2
    else:
        lower, upper = grid1, np.array([np.inf])
    true_pos = _open_interval_counts(fit.eligible_members(), lower, upper)
    false_pos = _open_interval_counts(fit.eligible_non_members(), lower, upper)
    correct = true_pos + (n2 - false_pos)
    i, j = divmod(int(np.argmax(correct)), correct.shape[1])
    return ThresholdFit(float(lower[i]), float(upper[j]), int(correct[i, j]) / (n1 + n2), grid_size)
