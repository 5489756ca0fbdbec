"""Persisted records: split manifests, score rows, fitted attacks, reports."""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional

import math

from sif.errors import AttackFitError, SplitError

SUBSETS = ("mem_train", "mem_test", "nonmem_train", "nonmem_test")


@dataclass(frozen=True)
class MiSplit:
    """Index lists of the four-way member/non-member partition plus validation."""

    mem_train: List[int]
    mem_test: List[int]
    nonmem_train: List[int]
    nonmem_test: List[int]
    validation: List[int]
    seed: int = 0
    mem_size: int = 0

    def __post_init__(self):
        sizes = {len(getattr(self, name)) for name in SUBSETS}
        if len(sizes) != 1:
            raise SplitError(max(sizes), min(sizes), "the four attack subsets must have equal size")
        seen = set()
        for name in SUBSETS + ("validation",):
            indices = set(getattr(self, name))
            if seen & indices:
                raise SplitError(0, 0, f"{name} overlaps another subset")
            seen |= indices

    @property
    def members(self) -> List[int]:
        return sorted(self.mem_train + self.mem_test)

    @property
    def non_members(self) -> List[int]:
        return sorted(self.nonmem_train + self.nonmem_test)

    def subset(self, selector: str) -> Dict[str, List[int]]:
        """Map ``fit``/``eval``/``all`` to the member and non-member index lists."""
        if selector == "fit":
            return {"member": self.mem_train, "non_member": self.nonmem_train}
        if selector == "eval":
            return {"member": self.mem_test, "non_member": self.nonmem_test}
        if selector == "all":
            return {"member": self.members, "non_member": self.non_members}
        raise ValueError(f"unknown subset selector {selector!r}")

    @cached_property
    def _member_ids(self) -> frozenset:
        return frozenset(self.mem_train) | frozenset(self.mem_test)

    @cached_property
    def _non_member_ids(self) -> frozenset:
        return frozenset(self.nonmem_train) | frozenset(self.nonmem_test)

    def membership(self, sample_id: int) -> Optional[int]:
        if sample_id in self._member_ids:
            return 1
        if sample_id in self._non_member_ids:
            return 0
        return None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mem_size": self.mem_size,
            "mem_train": list(self.mem_train),
            "mem_test": list(self.mem_test),
            "nonmem_train": list(self.nonmem_train),
            "nonmem_test": list(self.nonmem_test),
            "validation": list(self.validation),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MiSplit":
        return cls(
            mem_train=list(data["mem_train"]),
            mem_test=list(data["mem_test"]),
            nonmem_train=list(data["nonmem_train"]),
            nonmem_test=list(data["nonmem_test"]),
            validation=list(data["validation"]),
            seed=data.get("seed", 0),
            mem_size=data.get("mem_size", 0),
        )


SCORE_COLUMNS = ["sample_id", "score", "label_match", "membership", "scorer", "r", "d", "lambda", "seed"]


@dataclass(frozen=True)
class SifRecord:
    """One sample's self-influence score and the label-match bit m."""

    sample_id: int
    score: float
    label_match: int
    membership: Optional[int] = None
    scorer: str = "sif"

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"sample {self.sample_id}: score must be finite")
        if self.label_match not in (0, 1):
            raise ValueError("label_match must be 0 or 1")

    def with_membership(self, membership: Optional[int]) -> "SifRecord":
        return SifRecord(self.sample_id, self.score, self.label_match, membership, self.scorer)

    def to_row(self, r: int, d: int, damping: float, seed: int) -> dict:
        return {
            "sample_id": self.sample_id,
            "score": self.score,
            "label_match": self.label_match,
            "membership": -1 if self.membership is None else self.membership,
            "scorer": self.scorer,
            "r": r,
            "d": d,
            "lambda": damping,
            "seed": seed,
        }

    @classmethod
    def from_row(cls, row: dict) -> "SifRecord":
        membership = int(row["membership"])
        return cls(
            sample_id=int(row["sample_id"]),
            score=float(row["score"]),
            label_match=int(row["label_match"]),
            membership=None if membership < 0 else membership,
            scorer=str(row["scorer"]),
        )


@dataclass(frozen=True)
class AttackModel:
    """Fitted interval (tau1, tau2) plus what is needed to reproduce scores."""

    tau1: float
    tau2: float
    scorer: Dict[str, Any] = field(default_factory=dict)
    checkpoint_fingerprint: str = ""
    seed: int = 0
    train_balanced_accuracy: float = 0.0
    grid_size: int = 1000
    dropped_samples: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.tau1 < self.tau2:
            raise AttackFitError(f"degenerate thresholds: tau1={self.tau1} >= tau2={self.tau2}")

    def contains(self, score: float) -> bool:
        return self.tau1 < score < self.tau2

    def to_dict(self) -> dict:
        return {
            "tau1": self.tau1,
            "tau2": self.tau2,
            "scorer": self.scorer,
            "checkpoint_fingerprint": self.checkpoint_fingerprint,
            "seed": self.seed,
            "fit_metrics": {
                "train_balanced_accuracy": self.train_balanced_accuracy,
                "grid_size": self.grid_size,
                "dropped_samples": list(self.dropped_samples),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttackModel":
        metrics = data.get("fit_metrics", {})
        return cls(
            tau1=float(data["tau1"]),
            tau2=float(data["tau2"]),
            scorer=data.get("scorer", {}),
            checkpoint_fingerprint=data.get("checkpoint_fingerprint", ""),
            seed=data.get("seed", 0),
            train_balanced_accuracy=metrics.get("train_balanced_accuracy", 0.0),
            grid_size=metrics.get("grid_size", 1000),
            dropped_samples=list(metrics.get("dropped_samples", [])),
        )


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


@dataclass(frozen=True)
class EvalReport:
    """Confusion counts of one attack on the evaluation subsets.

    Every rate is derived from the four counts, so a report read back from
    JSON recomputes to the same values.
    The cost fields are wall-clock seconds measured on the run that produced
    the report and are the only values that differ between reruns.
    """

    attack: str
    true_positive: int
    false_negative: int
    false_positive: int
    true_negative: int
    descriptor: Dict[str, Any] = field(default_factory=dict)
    fit_seconds: Optional[float] = None
    inference_seconds_per_sample: Optional[float] = None

    @property
    def n_members(self) -> int:
        return self.true_positive + self.false_negative

    @property
    def n_non_members(self) -> int:
        return self.false_positive + self.true_negative

    @property
    def member_accuracy(self) -> Optional[float]:
        return _ratio(self.true_positive, self.n_members)

    @property
    def non_member_accuracy(self) -> Optional[float]:
        return _ratio(self.true_negative, self.n_non_members)

    @property
    def member_precision(self) -> Optional[float]:
        return _ratio(self.true_positive, self.true_positive + self.false_positive)

    @property
    def non_member_precision(self) -> Optional[float]:
        return _ratio(self.true_negative, self.true_negative + self.false_negative)

    @property
    def member_recall(self) -> Optional[float]:
        return self.member_accuracy

    @property
    def non_member_recall(self) -> Optional[float]:
        return self.non_member_accuracy

    @property
    def balanced_accuracy(self) -> float:
        return (self.true_positive + self.true_negative) / (self.n_members + self.n_non_members)

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "descriptor": self.descriptor,
            "counts": {
                "true_positive": self.true_positive,
                "false_negative": self.false_negative,
                "false_positive": self.false_positive,
                "true_negative": self.true_negative,
                "n_members": self.n_members,
                "n_non_members": self.n_non_members,
            },
            "member": {
                "accuracy": self.member_accuracy,
                "precision": self.member_precision,
                "recall": self.member_recall,
            },
            "non_member": {
                "accuracy": self.non_member_accuracy,
                "precision": self.non_member_precision,
                "recall": self.non_member_recall,
            },
            "balanced_accuracy": self.balanced_accuracy,
            "cost": {
                "fit_seconds": self.fit_seconds,
                "inference_seconds_per_sample": self.inference_seconds_per_sample,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        counts = data["counts"]
        cost = data.get("cost", {})
        return cls(
            attack=data["attack"],
            true_positive=counts["true_positive"],
            false_negative=counts["false_negative"],
            false_positive=counts["false_positive"],
            true_negative=counts["true_negative"],
            descriptor=data.get("descriptor", {}),
            fit_seconds=cost.get("fit_seconds"),
            inference_seconds_per_sample=cost.get("inference_seconds_per_sample"),
        )
