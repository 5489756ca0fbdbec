"""Desk-scale target architectures, the training recipe and checkpoints.

The training recipe: cross-entropy with an l2 penalty, SGD with momentum
0.9 and Nesterov updates, batch size 100, learning rate decayed on
validation accuracy, and the checkpoint with the best validation accuracy
is kept.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from sif.errors import ConfigError, DataFormatError, DimensionError, TrainingDivergedError
from sif.models import MiSplit
from sif.services.data import IDENTITY, AugmentationFamily, LabeledDataset, augment_batch
from sif.services.tensor_core import (
    DTYPE,
    Batch,
    LayerSlot,
    Network,
    ParamVector,
    build_layout,
    cross_entropy,
    layout_size,
    objective,
    unflatten,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("logreg", "mlp", "smallcnn")
DEFAULT_LR = {"logreg": 0.1, "mlp": 0.05, "smallcnn": 0.05}

CHECKPOINT_MAGIC = b"SIFC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameters live in a separate ParamVector."""

    arch: str
    input_shape: Tuple[int, ...]
    num_classes: int
    hidden: Tuple[int, ...] = ()
    channels: int = 4
    activation: str = "relu"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.activation != "relu":
            raise ConfigError("only relu activations are supported")
        dims = tuple(self.input_shape) + tuple(self.hidden) + (self.num_classes, self.channels)
        if any(d <= 0 for d in dims):
            raise ConfigError("all model dimensions must be positive")
        if self.arch == "smallcnn":
            if len(self.input_shape) != 3:
                raise ConfigError("smallcnn needs input_shape (C, H, W)")
            if self.input_shape[1] % 4 or self.input_shape[2] % 4:
                raise ConfigError("smallcnn needs H and W divisible by 4")

    @classmethod
    def logreg(cls, dim: int, classes: int) -> "ModelSpec":
        return cls("logreg", (dim,), classes)

    @classmethod
    def mlp(cls, dim: int, hidden: Sequence[int], classes: int) -> "ModelSpec":
        return cls("mlp", (dim,), classes, hidden=tuple(hidden))

    @classmethod
    def smallcnn(cls, channels: int, classes: int, input_shape: Sequence[int]) -> "ModelSpec":
        return cls("smallcnn", tuple(input_shape), classes, channels=channels)

    @cached_property
    def _layout(self) -> Tuple[LayerSlot, ...]:
        k = self.num_classes
        if self.arch == "logreg":
            d = math.prod(self.input_shape)
            return build_layout([("fc.weight", (k, d)), ("fc.bias", (k,))])
        if self.arch == "mlp":
            widths = [math.prod(self.input_shape)] + list(self.hidden) + [k]
            blocks = []
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                blocks += [(f"fc{i}.weight", (fan_out, fan_in)), (f"fc{i}.bias", (fan_out,))]
            return build_layout(blocks)
        c_in, h, w = self.input_shape
        c = self.channels
        return build_layout([
            ("conv1.weight", (c, c_in, 3, 3)),
            ("conv1.bias", (c,)),
            ("conv2.weight", (2 * c, c, 3, 3)),
            ("conv2.bias", (2 * c,)),
            ("fc.weight", (k, 2 * c * (h // 4) * (w // 4))),
            ("fc.bias", (k,)),
        ])

    def layout(self) -> Tuple[LayerSlot, ...]:
        return self._layout

    @property
    def num_params(self) -> int:
        return layout_size(self._layout)

    def check_cap(self, cap: int) -> None:
        if self.num_params > cap:
            raise ConfigError(f"{self.arch} has {self.num_params} parameters, cap is {cap}")

    def check_batch(self, batch: Batch) -> None:
        if tuple(batch.inputs.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(self._layout[0].name, tuple(self.input_shape), tuple(batch.inputs.shape[1:]))
        batch.check_labels(self.num_classes)

    def logits(self, views: Dict[str, Tensor], inputs: Tensor) -> Tensor:
        if self.arch == "logreg":
            return F.linear(inputs.reshape(inputs.shape[0], -1), views["fc.weight"], views["fc.bias"])
        if self.arch == "mlp":
            x = inputs.reshape(inputs.shape[0], -1)
            last = len(self.hidden)
            for i in range(last + 1):
                x = F.linear(x, views[f"fc{i}.weight"], views[f"fc{i}.bias"])
                if i < last:
                    x = torch.relu(x)
            return x
        x = torch.relu(F.conv2d(inputs, views["conv1.weight"], views["conv1.bias"], padding=1))
        x = F.avg_pool2d(x, 2)
        x = torch.relu(F.conv2d(x, views["conv2.weight"], views["conv2.bias"], padding=1))
        x = F.avg_pool2d(x, 2)
        return F.linear(x.reshape(x.shape[0], -1), views["fc.weight"], views["fc.bias"])

    def sample_losses(self, views: Dict[str, Tensor], batch: Batch) -> Tensor:
        return cross_entropy(self.logits(views, batch.inputs), batch.labels)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "channels": self.channels,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            arch=data["arch"],
            input_shape=tuple(data["input_shape"]),
            num_classes=int(data["num_classes"]),
            hidden=tuple(data.get("hidden", ())),
            channels=int(data.get("channels", 4)),
            activation=data.get("activation", "relu"),
        )


def init_params(spec: Network, seed: int) -> ParamVector:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    generator = torch.Generator().manual_seed(seed)
    layout = spec.layout()
    data = torch.zeros(layout_size(layout), dtype=DTYPE)
    for name, view in unflatten(data, layout).items():
        if name.endswith(".weight"):
            fan_in = math.prod(view.shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            view.uniform_(-bound, bound, generator=generator)
    return ParamVector(data, layout)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 100
    l2: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    lr: float = 0.05
    lr_decay: bool = True
    lr_decay_factor: float = 0.1
    lr_patience: int = 20
    augmentation: AugmentationFamily = IDENTITY
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "l2": self.l2,
            "momentum": self.momentum,
            "nesterov": self.nesterov,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_patience": self.lr_patience,
            "augmentation": self.augmentation.to_dict(),
            "seed": self.seed,
            "log_every": self.log_every,
        }


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Frozen target model: architecture, parameters theta-hat and how it was trained."""

    spec: Network
    params: ParamVector
    l2: float = 0.0
    augmentation: AugmentationFamily = IDENTITY
    best_epoch: int = 0
    history: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.params.layout != self.spec.layout():
            raise DimensionError("params", "layout of the model spec", "a different layout")

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        describe = getattr(self.spec, "to_dict", None)
        spec_repr = json.dumps(describe(), sort_keys=True) if describe else repr(self.spec)
        digest.update(spec_repr.encode())
        digest.update(self.params.numpy().astype("<f8").tobytes())
        return digest.hexdigest()

    def metadata(self) -> dict:
        return {
            "l2": self.l2,
            "augmentation": self.augmentation.to_dict(),
            "best_epoch": self.best_epoch,
            "history": self.history,
        }


def predict_batch(checkpoint: Checkpoint, inputs: Tensor) -> Tuple[Tensor, Tensor]:
    """Return (class ids, probability rows); ties go to the smallest class id."""
    batch = Batch(inputs, torch.zeros(inputs.shape[0], dtype=torch.long))
    checkpoint.spec.check_batch(batch)
    with torch.no_grad():
        logits = checkpoint.spec.logits(checkpoint.params.views(), inputs)
        probs = torch.softmax(logits, dim=1)
    return torch.argmax(probs, dim=1), probs


def predict(checkpoint: Checkpoint, x: Tensor) -> Tuple[int, Tensor]:
    classes, probs = predict_batch(checkpoint, x.unsqueeze(0))
    return int(classes[0]), probs[0]


def evaluate_accuracy(checkpoint: Checkpoint, samples: Batch) -> float:
    classes, _ = predict_batch(checkpoint, samples.inputs)
    return float((classes == samples.labels).double().mean())


def _accuracy_on(checkpoint_params: ParamVector, spec: Network, batch: Optional[Batch]) -> Optional[float]:
    if batch is None:
        return None
    with torch.no_grad():
        logits = spec.logits(checkpoint_params.views(), batch.inputs)
    return float((torch.argmax(logits, dim=1) == batch.labels).double().mean())


def train_target(
    spec: ModelSpec,
    dataset: LabeledDataset,
    split: MiSplit,
    cfg: TrainConfig,
    init: Optional[ParamVector] = None,
) -> Checkpoint:
    """
    Train on D_mem and keep the epoch with the best validation accuracy.

    Equal validation accuracies resolve to the later epoch.

    Args:
        spec: Architecture to train
        dataset: Dataset the split indexes into
        split: Only D_mem is trained on; the validation ids pick the epoch
        cfg: Optimizer, schedule, l2, augmentation and seed
        init: Starting parameters; seeded initialization when omitted

    Returns:
        Checkpoint with the selected parameters and the per-epoch history

    Raises:
        TrainingDivergedError: If a batch loss becomes non-finite
    """
    members = np.asarray(split.members, dtype=np.int64)
    if cfg.lr_decay and not split.validation:
        raise ConfigError("lr_decay needs a non-empty validation split")
    member_batch = dataset.batch(members)
    val_batch = dataset.batch(split.validation) if split.validation else None
    spec.check_batch(member_batch)

    start = init if init is not None else init_params(spec, cfg.seed)
    theta = start.data.clone().requires_grad_(True)
    optimizer = torch.optim.SGD(
        [theta],
        lr=cfg.lr,
        momentum=cfg.momentum,
        nesterov=cfg.nesterov and cfg.momentum > 0,
    )
    scheduler = None
    if cfg.lr_decay:
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="max", factor=cfg.lr_decay_factor, patience=cfg.lr_patience
        )
    rng = np.random.default_rng(cfg.seed)
    layout = spec.layout()

    def snapshot() -> ParamVector:
        return ParamVector(theta.detach().clone(), layout)

    history: Dict[str, List[float]] = {"loss": [], "train_accuracy": [], "val_accuracy": []}
    best_params = snapshot()
    best_score = _accuracy_on(best_params, spec, val_batch if val_batch is not None else member_batch)
    best_epoch = 0
    last_finite = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(members)
        total, count = 0.0, 0
        for start_idx in range(0, len(order), cfg.batch_size):
            batch = dataset.batch(order[start_idx:start_idx + cfg.batch_size])
            batch = augment_batch(cfg.augmentation, batch, rng)
            optimizer.zero_grad()
            loss = objective(spec, batch, cfg.l2)(theta)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, last_finite)
            loss.backward()
            optimizer.step()
            total += loss.item() * batch.size
            count += batch.size
        last_finite = epoch

        current = snapshot()
        train_acc = _accuracy_on(current, spec, member_batch)
        val_acc = _accuracy_on(current, spec, val_batch)
        history["loss"].append(total / count)
        history["train_accuracy"].append(train_acc)
        if val_acc is not None:
            history["val_accuracy"].append(val_acc)

        score = val_acc if val_acc is not None else train_acc
        if score >= best_score:
            best_score, best_params, best_epoch = score, current, epoch
        if scheduler is not None:
            scheduler.step(val_acc)
        if cfg.log_every and epoch % cfg.log_every == 0:
            logger.info(
                "epoch %d loss=%.4f train_acc=%.3f val_acc=%s lr=%.2e",
                epoch, total / count, train_acc,
                "n/a" if val_acc is None else f"{val_acc:.3f}",
                optimizer.param_groups[0]["lr"],
            )

    return Checkpoint(
        spec=spec,
        params=best_params,
        l2=cfg.l2,
        augmentation=cfg.augmentation,
        best_epoch=best_epoch,
        history=history,
    )


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write the versioned container: magic, version, spec JSON, f64 params, metadata JSON."""
    spec_blob = json.dumps(checkpoint.spec.to_dict(), sort_keys=True).encode()
    meta_blob = json.dumps(checkpoint.metadata(), sort_keys=True).encode()
    params = checkpoint.params.numpy().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(spec_blob)))
        fh.write(spec_blob)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.raw):
            raise DataFormatError(f"{self.path}: truncated {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file", offset=0)
    version = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    spec = ModelSpec.from_dict(json.loads(reader.take(reader.unpack("<I", "spec length"), "spec")))
    count = reader.unpack("<Q", "parameter count")
    params = np.frombuffer(reader.take(8 * count, "parameters"), dtype="<f8")
    meta: Dict[str, Any] = json.loads(reader.take(reader.unpack("<I", "metadata length"), "metadata"))
    return Checkpoint(
        spec=spec,
        params=ParamVector.from_numpy(params, spec.layout()),
        l2=meta.get("l2", 0.0),
        augmentation=AugmentationFamily.from_dict(meta.get("augmentation")),
        best_epoch=meta.get("best_epoch", 0),
        history=meta.get("history", {}),
    )
