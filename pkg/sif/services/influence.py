"""Influence functions: exact oracles, LiSSA inverse-HVPs and SIF-family scores.

Conventions used throughout:

* ``g = grad L(z, theta_hat)`` is the gradient of the unregularized
  per-sample cross-entropy.
* ``H`` is the Hessian of the full training objective (mean loss plus the
  l2 penalty) plus ``damping * I``.
* A self-influence score is ``-<H^-1 g, g>``; it keeps its sign.
"""

import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor
from torch.func import grad as func_grad
from torch.func import jvp, vmap
from tqdm import tqdm

from sif.errors import (
    ConfigError,
    ConvergenceError,
    InfluenceError,
    LissaDivergenceError,
    NotPositiveDefiniteError,
    OracleCapError,
    SifError,
)
from sif.models import SifRecord
from sif.services.data import IDENTITY, AugmentationFamily, LabeledDataset, augment
from sif.services.target_models import Checkpoint, predict
from sif.services.tensor_core import (
    DTYPE,
    Batch,
    LayerSlot,
    Network,
    ParamVector,
    grad,
    hvp_function,
    objective,
)

logger = logging.getLogger(__name__)

DEFAULT_ORACLE_CAP = 2000
SCORERS = ("sif", "ada_sif", "avg_sif")

Sample = Tuple[Tensor, int]


@dataclass(frozen=True)
class LissaConfig:
    """Stochastic inverse-HVP settings: r repeats of a depth-d recursion."""

    repeats: int = 1
    depth: int = 1000
    damping: float = 0.01
    scale: float = 25.0
    sample_batch: int = 1
    seed: int = 0
    check_spectrum: bool = True

    def __post_init__(self):
        if self.repeats < 1 or self.depth < 1:
            raise ConfigError("LiSSA repeats and depth must be >= 1")
        if self.damping < 0:
            raise ConfigError("LiSSA damping must be >= 0")
        if self.scale <= 0:
            raise ConfigError("LiSSA scale must be > 0")
        if self.sample_batch < 1:
            raise ConfigError("LiSSA sample_batch must be >= 1")

    @classmethod
    def for_sif(cls, num_members: int, **overrides) -> "LissaConfig":
        return cls(**{"repeats": 1, "depth": max(1, min(num_members, 1000)), **overrides})

    @classmethod
    def for_ada_sif(cls, **overrides) -> "LissaConfig":
        return cls(**{"repeats": 8, "depth": 8, **overrides})

    def with_seed(self, seed: int) -> "LissaConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "repeats": self.repeats,
            "depth": self.depth,
            "damping": self.damping,
            "scale": self.scale,
            "sample_batch": self.sample_batch,
            "seed": self.seed,
            "check_spectrum": self.check_spectrum,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LissaConfig":
        return cls(**data)


class Sampler(Protocol):
    def draw(self, rng: np.random.Generator) -> Batch: ...


class TrainingSampler:
    """Uniform batches (with replacement) from the target's training set."""

    def __init__(self, dataset: LabeledDataset, indices: Sequence[int], batch_size: int = 1):
        if not len(indices):
            raise InfluenceError("training sampler needs at least one index")
        self.dataset = dataset
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size

    def draw(self, rng: np.random.Generator) -> Batch:
        picked = rng.choice(self.indices, size=self.batch_size, replace=True)
        return self.dataset.batch(picked)


class FullBatchSampler:
    """Always the same batch; turns LiSSA into a deterministic Neumann series."""

    def __init__(self, batch: Batch):
        self.batch = batch

    def draw(self, rng: np.random.Generator) -> Batch:
        return self.batch


class AugmentationSampler:
    """Batches of independently augmented copies of one sample z."""

    def __init__(self, z: Sample, family: AugmentationFamily, batch_size: int = 1):
        self.z = z
        self.family = family
        self.batch_size = batch_size

    def draw(self, rng: np.random.Generator) -> Batch:
        copies = [augment(self.family, self.z, rng)[0] for _ in range(self.batch_size)]
        return Batch(torch.stack(copies), torch.full((self.batch_size,), self.z[1], dtype=torch.long))


def sample_batch(z: Sample) -> Batch:
    x, y = z
    return Batch(x.unsqueeze(0), torch.tensor([y], dtype=torch.long))


def sample_gradient(checkpoint: Checkpoint, z: Sample) -> ParamVector:
    return grad(checkpoint.spec, checkpoint.params, sample_batch(z), l2=0.0)


def mean_augmented_gradient(
    checkpoint: Checkpoint,
    z: Sample,
    family: AugmentationFamily,
    count: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Mean of grad L(I(x), y) over ``count`` augmentations, in one batched pass."""
    batch = AugmentationSampler(z, family, count).draw(rng)
    return grad(checkpoint.spec, checkpoint.params, batch, l2=0.0)


def estimate_spectral_norm(
    checkpoint: Checkpoint,
    batch: Batch,
    damping: float = 0.0,
    iterations: int = 20,
    seed: int = 0,
) -> float:
    """Power iteration on H_batch + damping*I; returns the largest |eigenvalue|."""
    apply = hvp_function(checkpoint.spec, checkpoint.params, batch, checkpoint.l2)
    generator = torch.Generator().manual_seed(seed)
    v = torch.randn(len(checkpoint.params), dtype=DTYPE, generator=generator)
    v /= torch.linalg.vector_norm(v)
    estimate = 0.0
    for _ in range(iterations):
        w = apply(v) + damping * v
        estimate = float(torch.linalg.vector_norm(w))
        if estimate == 0.0 or not math.isfinite(estimate):
            break
        v = w / estimate
    return estimate


def inverse_hvp_lissa(
    checkpoint: Checkpoint,
    sampler: Sampler,
    g: ParamVector,
    cfg: LissaConfig,
) -> ParamVector:
    """Estimate (H + damping*I)^-1 g.

    Each repeat runs x_0 = g, x_{t+1} = g + (I - (H_t + damping*I)/c) x_t for
    ``depth`` steps with H_t the Hessian on a freshly sampled batch; the
    repeats' x_d / c are averaged.
    """
    checkpoint.params.check_compatible(g)
    seeds = np.random.SeedSequence([cfg.seed, 0x5F3759DF]).spawn(cfg.repeats + 1)
    if cfg.check_spectrum:
        spectrum_batch = sampler.draw(np.random.default_rng(seeds[-1]))
        norm = estimate_spectral_norm(checkpoint, spectrum_batch, cfg.damping, seed=cfg.seed)
        if norm >= cfg.scale:
            logger.warning(
                "LiSSA scale %.3g does not exceed the estimated Hessian norm %.3g; "
                "the recursion may diverge",
                cfg.scale, norm,
            )

    spec, params, l2 = checkpoint.spec, checkpoint.params, checkpoint.l2
    v = g.data
    total = torch.zeros_like(v)
    for repeat in range(cfg.repeats):
        rng = np.random.default_rng(seeds[repeat])
        x = v.clone()
        for step in range(cfg.depth):
            hx = hvp_function(spec, params, sampler.draw(rng), l2)(x)
            x = v + x - (hx + cfg.damping * x) / cfg.scale
            if not torch.isfinite(x).all():
                raise LissaDivergenceError(step + 1, repeat)
        total += x / cfg.scale
    return g.like(total / cfg.repeats)


@dataclass(frozen=True, eq=False)
class ExactHessian:
    """Dense damped Hessian, built only for small models."""

    matrix: Tensor
    damping: float
    layout: Tuple[LayerSlot, ...]

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])


def exact_hessian(
    checkpoint: Checkpoint,
    batch: Batch,
    damping: float,
    cap: int = DEFAULT_ORACLE_CAP,
    chunk_size: Optional[int] = 64,
) -> ExactHessian:
    """H[i][j] = d2 objective / d theta_i d theta_j + damping * [i == j], column by column."""
    p = len(checkpoint.params)
    if p > cap:
        raise OracleCapError(p, cap)
    apply = hvp_function(checkpoint.spec, checkpoint.params, batch, checkpoint.l2)
    basis = torch.eye(p, dtype=DTYPE)
    # row i of the vmapped output is H e_i
    columns = vmap(apply, chunk_size=chunk_size)(basis)
    matrix = columns.T.contiguous() + damping * basis
    asymmetry = float((matrix - matrix.T).abs().max())
    if asymmetry > 1e-8 * max(1.0, float(matrix.abs().max())):
        raise InfluenceError(f"Hessian is not symmetric (max deviation {asymmetry:.2e})")
    return ExactHessian(matrix, damping, checkpoint.params.layout)


def inverse_hvp_exact(hessian: ExactHessian, g: ParamVector) -> ParamVector:
    """Solve H x = g by Cholesky factorization."""
    if g.layout != hessian.layout:
        raise InfluenceError("gradient layout does not match the Hessian")
    factor, info = torch.linalg.cholesky_ex(hessian.matrix)
    if int(info) != 0:
        raise NotPositiveDefiniteError(hessian.damping)
    x = torch.cholesky_solve(g.data.unsqueeze(1), factor).squeeze(1)
    g_norm = float(torch.linalg.vector_norm(g.data))
    if g_norm:
        residual = float(torch.linalg.vector_norm(hessian.matrix @ x - g.data)) / g_norm
        if residual > 1e-8:
            logger.warning("exact inverse-HVP residual %.2e exceeds 1e-8", residual)
    return g.like(x)


class ExactSolver:
    def __init__(self, hessian: ExactHessian):
        self.hessian = hessian

    def __call__(self, g: ParamVector) -> ParamVector:
        return inverse_hvp_exact(self.hessian, g)


class LissaSolver:
    def __init__(self, checkpoint: Checkpoint, sampler: Sampler, cfg: LissaConfig):
        self.checkpoint = checkpoint
        self.sampler = sampler
        self.cfg = cfg

    def __call__(self, g: ParamVector) -> ParamVector:
        return inverse_hvp_lissa(self.checkpoint, self.sampler, g, self.cfg)


Solver = Callable[[ParamVector], ParamVector]


def _label_match(checkpoint: Checkpoint, z: Sample) -> int:
    predicted, _ = predict(checkpoint, z[0])
    return int(predicted == z[1])


def _self_influence(g: ParamVector, s: ParamVector, exact: bool) -> float:
    score = -s.dot(g)
    if exact and score > 1e-10 * (1.0 + g.norm() ** 2):
        raise InfluenceError(f"exact self-influence must be <= 0, got {score:.3e}")
    return score


def sif(
    checkpoint: Checkpoint,
    train_sampler: Sampler,
    z: Sample,
    cfg: LissaConfig,
    solver: Optional[Solver] = None,
    sample_id: int = 0,
    membership: Optional[int] = None,
) -> SifRecord:
    """
    Self-influence -<s(z), g(z)> with s(z) = H^-1 g(z).

    Args:
        checkpoint: Frozen target; its l2 enters the Hessian, not g(z)
        train_sampler: Minibatches of D_mem for the LiSSA Hessians
        z: (input, label) sample to score
        cfg: LiSSA settings, already seeded for this sample
        solver: Exact solver replacing LiSSA; the score must then be <= 0
        sample_id: Id stamped on the record
        membership: Ground truth stamped on the record, if known

    Returns:
        SifRecord with the score and the label-match bit
    """
    g = sample_gradient(checkpoint, z)
    solve = solver if solver is not None else LissaSolver(checkpoint, train_sampler, cfg)
    score = _self_influence(g, solve(g), exact=isinstance(solver, ExactSolver))
    return SifRecord(sample_id, score, _label_match(checkpoint, z), membership, "sif")


def ada_sif(
    checkpoint: Checkpoint,
    z: Sample,
    family: AugmentationFamily,
    cfg: LissaConfig,
    grad_samples: int = 128,
    train_sampler: Optional[Sampler] = None,
    sample_id: int = 0,
    membership: Optional[int] = None,
) -> SifRecord:
    """Augmentation-adaptive self-influence -<E[s], E[g]> over I ~ family.

    E[g] averages ``grad_samples`` augmented gradients; E[s] runs LiSSA on
    E[g] with Hessians drawn on augmented copies of z. The identity family
    reduces to plain SIF and therefore needs ``train_sampler``.
    """
    if family.is_identity:
        if train_sampler is None:
            raise InfluenceError("ada_sif with the identity family needs a training sampler")
        record = sif(checkpoint, train_sampler, z, cfg, sample_id=sample_id, membership=membership)
        return replace(record, scorer="ada_sif")
    if grad_samples < 1:
        raise ConfigError("grad_samples must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xADA]))
    g_bar = mean_augmented_gradient(checkpoint, z, family, grad_samples, rng)
    s_bar = inverse_hvp_lissa(checkpoint, AugmentationSampler(z, family, cfg.sample_batch), g_bar, cfg)
    score = -s_bar.dot(g_bar)
    return SifRecord(sample_id, score, _label_match(checkpoint, z), membership, "ada_sif")


def avg_sif(
    checkpoint: Checkpoint,
    train_sampler: Sampler,
    z: Sample,
    family: AugmentationFamily,
    cfg: LissaConfig,
    k: int = 8,
    score_fn: Callable[..., SifRecord] = sif,
    sample_id: int = 0,
    membership: Optional[int] = None,
) -> SifRecord:
    """
    Mean of plain SIF over k independent augmentations of z.

    Args:
        checkpoint: Frozen target model
        train_sampler: Minibatches of D_mem for the LiSSA Hessians
        z: Sample whose augmented copies are scored
        family: Augmentations drawn for the copies; identity scores z once
        cfg: LiSSA settings shared by every copy
        k: Number of augmented copies
        score_fn: Per-copy score, plain SIF unless replaced

    Returns:
        SifRecord tagged avg_sif carrying the label-match bit of the original z
    """
    if k < 1:
        raise ConfigError("avg_sif needs k >= 1")
    if family.is_identity:
        record = score_fn(checkpoint, train_sampler, z, cfg, sample_id=sample_id, membership=membership)
        return replace(record, scorer="avg_sif")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA76]))
    scores = []
    for _ in range(k):
        augmented = augment(family, z, rng)
        scores.append(score_fn(checkpoint, train_sampler, augmented, cfg).score)
    return SifRecord(
        sample_id,
        math.fsum(scores) / k,
        _label_match(checkpoint, z),
        membership,
        "avg_sif",
    )


def pairwise_influence(checkpoint: Checkpoint, z_train: Sample, z_test: Sample, solver: Solver) -> float:
    """-grad L(z_test)^T H^-1 grad L(z_train)."""
    g_train = sample_gradient(checkpoint, z_train)
    g_test = sample_gradient(checkpoint, z_test)
    return -g_test.dot(solver(g_train))


def fit_convex(
    spec: Network,
    batch: Batch,
    l2: float,
    weights: Optional[Tensor] = None,
    init: Optional[ParamVector] = None,
    tolerance: float = 1e-9,
    newton_steps: int = 20,
) -> ParamVector:
    """Minimize a convex objective to a tight gradient tolerance.

    L-BFGS gets close, then Newton steps on the exact Hessian polish the
    solution.
    """
    layout = spec.layout()
    loss_fn = objective(spec, batch, l2, weights)
    start = init.data if init is not None else torch.zeros(sum(s.length for s in layout), dtype=DTYPE)
    theta = start.detach().clone().requires_grad_(True)
    optimizer = torch.optim.LBFGS(
        [theta],
        lr=1.0,
        max_iter=500,
        tolerance_grad=tolerance,
        tolerance_change=0.0,
        history_size=50,
        line_search_fn="strong_wolfe",
    )

    def closure():
        optimizer.zero_grad()
        loss = loss_fn(theta)
        loss.backward()
        return loss

    optimizer.step(closure)
    params = ParamVector(theta.detach().clone(), layout)
    checkpoint = Checkpoint(spec=spec, params=params, l2=l2)
    for _ in range(newton_steps):
        g = grad(spec, params, batch, l2) if weights is None else _weighted_grad(spec, params, batch, l2, weights)
        if g.norm() <= tolerance:
            return params
        hessian = _weighted_hessian(checkpoint, batch, weights)
        step = inverse_hvp_exact(hessian, g)
        params = params - step
        checkpoint = Checkpoint(spec=spec, params=params, l2=l2)
    g = grad(spec, params, batch, l2) if weights is None else _weighted_grad(spec, params, batch, l2, weights)
    if g.norm() > tolerance:
        raise ConvergenceError(g.norm(), tolerance)
    return params


def _weighted_grad(spec: Network, params: ParamVector, batch: Batch, l2: float, weights: Tensor) -> ParamVector:
    return params.like(func_grad(objective(spec, batch, l2, weights))(params.data))


def _weighted_hessian(checkpoint: Checkpoint, batch: Batch, weights: Optional[Tensor]) -> ExactHessian:
    if weights is None:
        return exact_hessian(checkpoint, batch, 0.0)
    gradient = func_grad(objective(checkpoint.spec, batch, checkpoint.l2, weights))
    primal = checkpoint.params.data

    def apply(v: Tensor) -> Tensor:
        return jvp(gradient, (primal,), (v,))[1]

    p = len(checkpoint.params)
    columns = vmap(apply, chunk_size=64)(torch.eye(p, dtype=DTYPE))
    matrix = 0.5 * (columns + columns.T)
    return ExactHessian(matrix, 0.0, checkpoint.params.layout)


class LeaveOneOutOracle:
    """Retrain-without-one ground truth for pairwise influence on convex models.

    Both fits minimize (1/n) * sum of kept losses + l2/2 * ||theta||^2, the
    objective whose 1/n upweighting the influence function linearizes.
    """

    def __init__(self, spec: Network, train: Batch, l2: float, tolerance: float = 1e-9, max_samples: int = 200):
        if getattr(spec, "arch", "logreg") != "logreg":
            raise ConfigError("leave-one-out oracle needs a convex (logreg) model")
        if train.size > max_samples:
            raise ConfigError(f"leave-one-out oracle is limited to {max_samples} samples")
        self.spec = spec
        self.train = train
        self.l2 = l2
        self.tolerance = tolerance
        self.n = train.size
        self.params = fit_convex(spec, train, l2, self._weights(None), tolerance=tolerance)
        self.checkpoint = Checkpoint(spec=spec, params=self.params, l2=l2)

    def _weights(self, removed: Optional[int]) -> Tensor:
        weights = torch.full((self.n,), 1.0 / self.n, dtype=DTYPE)
        if removed is not None:
            weights[removed] = 0.0
        return weights

    def sample(self, index: int) -> Sample:
        return self.train.inputs[index], int(self.train.labels[index])

    def retrain_without(self, removed: int) -> ParamVector:
        return fit_convex(
            self.spec, self.train, self.l2, self._weights(removed),
            init=self.params, tolerance=self.tolerance,
        )

    def delta_loss(self, removed: int, z_eval: Sample) -> float:
        """L(z_eval; theta_without) - L(z_eval; theta_hat) on the unregularized loss."""
        without = self.retrain_without(removed)
        batch = sample_batch(z_eval)
        with torch.no_grad():
            before = float(self.spec.sample_losses(self.params.views(), batch)[0])
            after = float(self.spec.sample_losses(without.views(), batch)[0])
        return after - before

    def exact_solver(self, damping: float = 0.0) -> ExactSolver:
        """Solver for the Hessian of the same objective, weights 1/n."""
        return ExactSolver(exact_hessian(self.checkpoint, self.train, damping))


def loo_retrain_oracle(
    spec: Network,
    train: Batch,
    l2: float,
    removed: int,
    z_eval: Sample,
    tolerance: float = 1e-9,
) -> float:
    return LeaveOneOutOracle(spec, train, l2, tolerance).delta_loss(removed, z_eval)


def sample_seed(seed: int, sample_id: int) -> int:
    """Per-sample seed, independent of scoring order and thread count."""
    return int(np.random.SeedSequence([seed, sample_id]).generate_state(1)[0])


@dataclass(frozen=True)
class Scorer:
    """Which score to compute and with which settings; serializable as a descriptor."""

    kind: str = "sif"
    lissa: LissaConfig = LissaConfig()
    family: AugmentationFamily = IDENTITY
    grad_samples: int = 128
    ensemble: int = 8

    def __post_init__(self):
        if self.kind not in SCORERS:
            raise ConfigError(f"unknown scorer {self.kind!r}, expected one of {SCORERS}")

    def score(
        self,
        checkpoint: Checkpoint,
        train_sampler: Sampler,
        z: Sample,
        sample_id: int,
        membership: Optional[int] = None,
    ) -> SifRecord:
        cfg = self.lissa.with_seed(sample_seed(self.lissa.seed, sample_id))
        if self.kind == "sif":
            record = sif(checkpoint, train_sampler, z, cfg, sample_id=sample_id, membership=membership)
        elif self.kind == "ada_sif":
            record = ada_sif(
                checkpoint, z, self.family, cfg, self.grad_samples,
                train_sampler=train_sampler, sample_id=sample_id, membership=membership,
            )
        else:
            record = avg_sif(
                checkpoint, train_sampler, z, self.family, cfg, self.ensemble,
                sample_id=sample_id, membership=membership,
            )
        return record

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "lissa": self.lissa.to_dict(),
            "family": self.family.to_dict(),
            "grad_samples": self.grad_samples,
            "ensemble": self.ensemble,
        }

    @classmethod
    def from_descriptor(cls, data: dict) -> "Scorer":
        return cls(
            kind=data["kind"],
            lissa=LissaConfig.from_dict(data["lissa"]),
            family=AugmentationFamily.from_dict(data.get("family")),
            grad_samples=data.get("grad_samples", 128),
            ensemble=data.get("ensemble", 8),
        )


ScoreFailures = Dict[int, str]


def score_samples(
    scorer: Scorer,
    checkpoint: Checkpoint,
    dataset: LabeledDataset,
    sample_ids: Sequence[int],
    train_sampler: Sampler,
    membership: Callable[[int], Optional[int]] = lambda _: None,
    threads: int = 1,
    on_record: Optional[Callable[[SifRecord], None]] = None,
    progress: bool = False,
) -> Tuple[List[SifRecord], ScoreFailures]:
    """Score ``sample_ids`` on a thread pool.

    ``on_record`` runs on the calling thread only, so a single writer can
    consume results. Per-sample failures are collected, not raised.
    """
    records: List[SifRecord] = []
    failures: ScoreFailures = {}

    def run(sample_id: int) -> SifRecord:
        return scorer.score(
            checkpoint, train_sampler, dataset.sample(sample_id), sample_id, membership(sample_id)
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = {pool.submit(run, int(i)): int(i) for i in sample_ids}
        bar = tqdm(
            total=len(futures), desc=f"{scorer.kind} scores", unit="sample",
            disable=not progress or not sys.stderr.isatty(),
        )
        with bar:
            for future in as_completed(futures):
                sample_id = futures[future]
                bar.update(1)
                try:
                    record = future.result()
                except (SifError, ValueError) as exc:
                    logger.warning("sample %d: scoring failed: %s", sample_id, exc)
                    failures[sample_id] = str(exc)
                    continue
                records.append(record)
                if on_record is not None:
                    on_record(record)
    records.sort(key=lambda record: record.sample_id)
    return records, failures
