"""Attack accuracy as a function of the LiSSA repeats r and depth d."""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from sif.models import MiSplit
from sif.services.attacks import GRID_SIZE, fit_sif_attack, members_sampler
from sif.services.data import LabeledDataset
from sif.services.influence import Scorer
from sif.services.metrics import eval_attack
from sif.services.target_models import Checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationResult:
    repeats: int
    depth: int
    seed: int
    train_balanced_accuracy: float
    balanced_accuracy: float

    def to_dict(self) -> dict:
        return {
            "r": self.repeats,
            "d": self.depth,
            "seed": self.seed,
            "train_balanced_accuracy": self.train_balanced_accuracy,
            "balanced_accuracy": self.balanced_accuracy,
        }


def ablate_lissa(
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    split: MiSplit,
    base: Scorer,
    settings: Sequence[Tuple[int, int]],
    seeds: Sequence[int],
    threads: int = 1,
    grid_size: int = GRID_SIZE,
) -> List[AblationResult]:
    """Fit and evaluate the attack once per (r, d) setting and seed."""
    sampler = members_sampler(dataset, split, base)
    results = []
    for repeats, depth in settings:
        for seed in seeds:
            scorer = replace(base, lissa=replace(base.lissa, repeats=repeats, depth=depth, seed=seed))
            attack = fit_sif_attack(checkpoint, dataset, split, scorer, threads, grid_size)
            report = eval_attack(attack, checkpoint, dataset, split, sampler, threads)
            results.append(AblationResult(
                repeats, depth, seed, attack.train_balanced_accuracy, report.balanced_accuracy,
            ))
            logger.info("r=%d d=%d seed=%d: balanced accuracy %.4f", repeats, depth, seed, report.balanced_accuracy)
    return results


def mean_by_setting(results: Sequence[AblationResult]) -> Dict[Tuple[int, int], float]:
    grouped: Dict[Tuple[int, int], List[float]] = {}
    for result in results:
        grouped.setdefault((result.repeats, result.depth), []).append(result.balanced_accuracy)
    return {key: float(np.mean(values)) for key, values in grouped.items()}
