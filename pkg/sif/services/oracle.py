"""Numerical self-checks: finite differences, exact vs LiSSA solves, leave-one-out retraining."""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch
from scipy.stats import spearmanr
from torch.func import vmap

from sif.services.data import LabeledDataset
from sif.services.influence import (
    DEFAULT_ORACLE_CAP,
    ExactSolver,
    FullBatchSampler,
    LeaveOneOutOracle,
    LissaConfig,
    LissaSolver,
    estimate_spectral_norm,
    exact_hessian,
    inverse_hvp_exact,
    inverse_hvp_lissa,
    pairwise_influence,
    sif,
)
from sif.services.target_models import Checkpoint, ModelSpec, init_params
from sif.services.tensor_core import Batch, Network, ParamVector, grad, hvp, objective

logger = logging.getLogger(__name__)

GradFn = Callable[[Network, ParamVector, Batch, float], ParamVector]


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    # "max" means measured must stay at or below tolerance, "min" at or above
    direction: str = "max"
    detail: dict = field(default_factory=dict)

    @classmethod
    def upper(cls, name: str, measured: float, tolerance: float, **detail) -> "CheckResult":
        return cls(name, measured, tolerance, bool(measured <= tolerance), "max", detail)

    @classmethod
    def lower(cls, name: str, measured: float, tolerance: float, **detail) -> "CheckResult":
        return cls(name, measured, tolerance, bool(measured >= tolerance), "min", detail)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "measured": self.measured,
            "tolerance": self.tolerance,
            "direction": self.direction,
            "passed": self.passed,
            **self.detail,
        }


def gradient_check(
    network: Network,
    params: ParamVector,
    batch: Batch,
    l2: float = 0.0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    grad_fn: GradFn = grad,
) -> CheckResult:
    """Compare every gradient coordinate with a central difference of the loss."""
    loss_fn = objective(network, batch, l2)
    theta = params.data.detach()
    basis = torch.eye(len(params), dtype=theta.dtype) * step
    with torch.no_grad():
        plus = vmap(loss_fn)(theta + basis)
        minus = vmap(loss_fn)(theta - basis)
    numeric = (plus - minus) / (2 * step)
    analytic = grad_fn(network, params, batch, l2).data
    scale = torch.maximum(torch.maximum(numeric.abs(), analytic.abs()), torch.tensor(1e-6, dtype=theta.dtype))
    errors = (numeric - analytic).abs() / scale
    worst = int(torch.argmax(errors))
    return CheckResult.upper(
        "gradient_finite_difference", float(errors[worst]), tolerance,
        worst_coordinate=worst, num_params=len(params),
    )


def hvp_check(
    network: Network,
    params: ParamVector,
    batch: Batch,
    l2: float = 0.0,
    step: float = 1e-5,
    tolerance: float = 1e-3,
    seed: int = 0,
    grad_fn: GradFn = grad,
) -> CheckResult:
    """H v against the central difference of gradients along v."""
    generator = torch.Generator().manual_seed(seed)
    v = params.like(torch.randn(len(params), dtype=params.data.dtype, generator=generator))
    v = v / v.norm()
    numeric = (grad_fn(network, params + v * step, batch, l2) - grad_fn(network, params - v * step, batch, l2)) / (2 * step)
    analytic = hvp(network, params, batch, v, l2)
    error = (numeric - analytic).norm() / max(analytic.norm(), 1e-12)
    return CheckResult.upper("hvp_finite_difference", error, tolerance)


def lissa_scale_for(checkpoint: Checkpoint, batch: Batch, damping: float, seed: int = 0) -> float:
    """A scale just above the full-batch spectral norm, so the Neumann series contracts."""
    return 1.05 * estimate_spectral_norm(checkpoint, batch, damping, iterations=100, seed=seed)


def lissa_check(
    checkpoint: Checkpoint,
    batch: Batch,
    damping: float,
    depth: int,
    tolerance: float,
    seed: int = 0,
    cap: int = DEFAULT_ORACLE_CAP,
) -> CheckResult:
    """Full-batch LiSSA against the exact damped solve for one training gradient."""
    hessian = exact_hessian(checkpoint, batch, damping, cap)
    g = grad(checkpoint.spec, checkpoint.params, Batch(batch.inputs[:1], batch.labels[:1]), 0.0)
    exact = inverse_hvp_exact(hessian, g)
    cfg = LissaConfig(
        repeats=1, depth=depth, damping=damping,
        scale=lissa_scale_for(checkpoint, batch, damping, seed), seed=seed,
    )
    approx = inverse_hvp_lissa(checkpoint, FullBatchSampler(batch), g, cfg)
    error = (approx - exact).norm() / max(exact.norm(), 1e-12)
    return CheckResult.upper("lissa_vs_exact", error, tolerance, depth=depth, scale=cfg.scale)


def sif_rank_check(
    checkpoint: Checkpoint,
    batch: Batch,
    damping: float,
    depth: int,
    threshold: float,
    num_samples: int,
    seed: int = 0,
    cap: int = DEFAULT_ORACLE_CAP,
) -> CheckResult:
    """Spearman correlation of LiSSA SIF scores against exact SIF scores."""
    sampler = FullBatchSampler(batch)
    cfg = LissaConfig(
        repeats=1, depth=depth, damping=damping,
        scale=lissa_scale_for(checkpoint, batch, damping, seed), seed=seed, check_spectrum=False,
    )
    exact_solver = ExactSolver(exact_hessian(checkpoint, batch, damping, cap))
    lissa_solver = LissaSolver(checkpoint, sampler, cfg)
    exact_scores, lissa_scores = [], []
    for i in range(min(num_samples, batch.size)):
        z = (batch.inputs[i], int(batch.labels[i]))
        exact_scores.append(sif(checkpoint, sampler, z, cfg, solver=exact_solver).score)
        lissa_scores.append(sif(checkpoint, sampler, z, cfg, solver=lissa_solver).score)
    rho = float(spearmanr(exact_scores, lissa_scores).correlation)
    return CheckResult.lower("sif_lissa_spearman", rho, threshold, samples=len(exact_scores))


def loo_check(
    oracle: LeaveOneOutOracle,
    z_eval_candidates: Batch,
    removals: int,
    threshold: float,
) -> CheckResult:
    """Rank agreement of -pairwise_influence / n with actual retraining on convex logreg.

    The evaluation point is the candidate with the largest loss under the
    full fit; the removed points are the ones with the largest predicted
    effect on it.
    """
    losses = oracle.spec.sample_losses(oracle.params.views(), z_eval_candidates).detach()
    pick = int(torch.argmax(losses))
    z_eval = (z_eval_candidates.inputs[pick], int(z_eval_candidates.labels[pick]))
    solver = oracle.exact_solver()
    predicted = np.array([
        -pairwise_influence(oracle.checkpoint, oracle.sample(i), z_eval, solver) / oracle.n
        for i in range(oracle.n)
    ])
    chosen = np.argsort(-np.abs(predicted), kind="stable")[:removals]
    actual = np.array([oracle.delta_loss(int(i), z_eval) for i in chosen])
    rho = float(spearmanr(predicted[chosen], actual).correlation)
    return CheckResult.lower("loo_spearman", rho, threshold, removals=len(chosen))


@dataclass
class OracleReport:
    checks: List[CheckResult]
    spectral_norm: Optional[float] = None

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failed(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "spectral_norm": self.spectral_norm,
            "checks": [check.to_dict() for check in self.checks],
        }


def run_oracle(
    spec: ModelSpec,
    dataset: LabeledDataset,
    member_ids: List[int],
    non_member_ids: List[int],
    oracle_cfg,
    l2: float,
    damping: float,
    seed: int = 0,
    cap: int = DEFAULT_ORACLE_CAP,
    grad_fn: GradFn = grad,
) -> OracleReport:
    """
    Run every numerical check against its tolerance.

    Args:
        spec: Architecture for the finite-difference checks
        dataset: Dataset the ids index into
        member_ids: Training points of the convex oracle model
        non_member_ids: Extra evaluation candidates for leave-one-out
        oracle_cfg: Sizes, steps and tolerances
        l2: Penalty of the convex oracle model
        damping: Damping of every inverse-HVP
        seed: Seed for parameters and the random directions of each check
        cap: Largest model that gets a dense Hessian
        grad_fn: Gradient under test, replaced to inject faults

    Returns:
        OracleReport listing each check with measured value and tolerance
    """
    n = min(oracle_cfg.loo_samples, len(member_ids))
    train = dataset.batch(member_ids[:n])
    spec.check_cap(cap)
    params = init_params(spec, seed)
    checks = [
        gradient_check(spec, params, train, l2, oracle_cfg.fd_step, oracle_cfg.gradient_tolerance, grad_fn),
        hvp_check(spec, params, train, l2, oracle_cfg.fd_step, oracle_cfg.hvp_tolerance, seed, grad_fn),
    ]

    convex = ModelSpec.logreg(int(np.prod(dataset.input_shape)), dataset.num_classes)
    flat = Batch(train.inputs.reshape(train.size, -1), train.labels)
    loo = LeaveOneOutOracle(convex, flat, l2)
    spectral = estimate_spectral_norm(loo.checkpoint, flat, damping, iterations=100, seed=seed)
    logger.info("full-batch spectral norm of the damped logreg Hessian: %.4g", spectral)
    checks.append(lissa_check(loo.checkpoint, flat, damping, oracle_cfg.lissa_depth,
                              oracle_cfg.lissa_tolerance, seed, cap))
    checks.append(sif_rank_check(loo.checkpoint, flat, damping, oracle_cfg.lissa_depth,
                                 oracle_cfg.spearman_threshold, oracle_cfg.sif_samples, seed, cap))
    candidates = dataset.batch(non_member_ids[:n])
    checks.append(loo_check(
        loo, Batch(candidates.inputs.reshape(candidates.size, -1), candidates.labels),
        oracle_cfg.loo_removals, oracle_cfg.loo_spearman_threshold,
    ))
    for check in checks:
        log = logger.info if check.passed else logger.error
        log("%s: measured %.3e, tolerance %.1e (%s)", check.name, check.measured, check.tolerance,
            "pass" if check.passed else "FAIL")
    return OracleReport(checks, spectral)
