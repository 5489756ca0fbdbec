"""Datasets, the member/non-member split protocol and training augmentations."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import Tensor

from sif.errors import ConfigError, DataFormatError, DimensionError, SplitError
from sif.models import MiSplit
from sif.services.tensor_core import DTYPE, Batch, as_tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

AUGMENTATION_KINDS = ("identity", "image_crop_flip", "vector_jitter")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Immutable in-memory dataset: inputs (N, ...) and labels (N,)."""

    inputs: Tensor
    labels: Tensor
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.inputs.shape[0] == 0:
            raise DataFormatError(f"dataset {self.name!r} is empty")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataFormatError(
                f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} inputs"
            )
        if self.num_classes < 1 or int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes:
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def sample(self, index: int) -> Tuple[Tensor, int]:
        return self.inputs[index], int(self.labels[index])

    def batch(self, indices: Sequence[int]) -> Batch:
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return Batch(self.inputs[idx], self.labels[idx])

    def label_array(self) -> np.ndarray:
        return self.labels.numpy()

    def with_inputs(self, inputs: Tensor) -> "LabeledDataset":
        return LabeledDataset(inputs, self.labels, self.num_classes, self.name)


@dataclass(frozen=True)
class AugmentationFamily:
    """Distribution of label-preserving transforms used during training."""

    kind: str = "identity"
    pad: int = 4
    flip_prob: float = 0.5
    sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENTATION_KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if self.pad < 0:
            raise ConfigError("augmentation pad must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("augmentation flip_prob must be in [0, 1]")
        if self.sigma < 0:
            raise ConfigError("augmentation sigma must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pad": self.pad,
            "flip_prob": self.flip_prob,
            "sigma": self.sigma,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "AugmentationFamily":
        return cls(**(data or {}))


IDENTITY = AugmentationFamily()


def crop_flip(image: Tensor, pad: int, top: int, left: int, flip: bool) -> Tensor:
    """Reflect-pad a (C, H, W) image, crop back to (H, W) at (top, left), optionally mirror."""
    height, width = image.shape[-2:]
    if pad:
        padded = F.pad(image.unsqueeze(0), (pad, pad, pad, pad), mode="reflect").squeeze(0)
    else:
        padded = image
    out = padded[:, top:top + height, left:left + width]
    if flip:
        out = torch.flip(out, dims=[-1])
    return out.contiguous()


def augment(family: AugmentationFamily, sample: Tuple[Tensor, int], rng: np.random.Generator) -> Tuple[Tensor, int]:
    """Draw one transform from ``family`` and apply it; the label is passed through."""
    x, label = sample
    if family.kind == "identity":
        return x, label
    if family.kind == "vector_jitter":
        noise = torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=DTYPE)
        return x + family.sigma * noise, label

    if x.dim() != 3:
        raise DimensionError("augmentation", "(C, H, W) image", tuple(x.shape))
    if family.pad >= min(x.shape[-2:]):
        raise DimensionError("augmentation", f"image larger than pad={family.pad}", tuple(x.shape))
    top = int(rng.integers(0, 2 * family.pad + 1))
    left = int(rng.integers(0, 2 * family.pad + 1))
    flip = bool(rng.random() < family.flip_prob)
    return crop_flip(x, family.pad, top, left, flip), label


def augment_batch(family: AugmentationFamily, batch: Batch, rng: np.random.Generator) -> Batch:
    if family.is_identity:
        return batch
    inputs = torch.stack([
        augment(family, (x, 0), rng)[0] for x in batch.inputs
    ])
    return Batch(inputs, batch.labels)


def _stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each class, then interleave classes round-robin."""
    classes = rng.permutation(np.unique(labels))
    rank = np.empty(len(labels), dtype=np.int64)
    class_pos = np.empty(len(labels), dtype=np.int64)
    for pos, c in enumerate(classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        rank[members] = np.arange(len(members))
        class_pos[members] = pos
    return np.lexsort((class_pos, rank))


def _halve(indices: np.ndarray, labels: np.ndarray, stratify: bool) -> Tuple[np.ndarray, np.ndarray]:
    if not stratify:
        half = len(indices) // 2
        return indices[:half], indices[half:]
    # group by class, keep shuffled order inside a class, deal alternately
    grouped = indices[np.argsort(labels[indices], kind="stable")]
    return grouped[0::2], grouped[1::2]


def make_splits(
    dataset: LabeledDataset,
    mem_size: int,
    seed: int,
    stratify: bool = True,
    validation_fraction: float = 0.05,
) -> MiSplit:
    """
    Partition ``dataset`` into validation, D_mem and D_non-mem halves.

    Args:
        dataset: Full labeled dataset
        mem_size: Size of D_mem and of D_non-mem; must be even
        seed: Seed of the permutation
        stratify: Balance classes inside each half
        validation_fraction: Share of the dataset held out for model selection

    Returns:
        MiSplit with sorted, pairwise-disjoint index lists
    """
    n = len(dataset)
    n_val = max(1, int(round(validation_fraction * n)))
    required = 2 * mem_size + n_val
    if mem_size <= 0 or mem_size % 2:
        raise SplitError(required, n, f"mem_size must be a positive even number, got {mem_size}")
    if n < required:
        raise SplitError(required, n, f"mem_size={mem_size} plus {n_val} validation samples")
    if stratify and mem_size < dataset.num_classes:
        raise SplitError(dataset.num_classes, mem_size, "stratified split needs mem_size >= num_classes")

    labels = dataset.label_array()
    rng = np.random.default_rng(seed)
    order = _stratified_order(labels, rng) if stratify else rng.permutation(n)

    validation = order[:n_val]
    members = order[n_val:n_val + mem_size]
    non_members = order[n_val + mem_size:n_val + 2 * mem_size]
    mem_train, mem_test = _halve(members, labels, stratify)
    nonmem_train, nonmem_test = _halve(non_members, labels, stratify)

    return MiSplit(
        mem_train=sorted(int(i) for i in mem_train),
        mem_test=sorted(int(i) for i in mem_test),
        nonmem_train=sorted(int(i) for i in nonmem_train),
        nonmem_test=sorted(int(i) for i in nonmem_test),
        validation=sorted(int(i) for i in validation),
        seed=seed,
        mem_size=mem_size,
    )


def synth_blobs(num_classes: int, dim: int, per_class: int, spread: float, seed: int) -> LabeledDataset:
    """Gaussian clusters around random unit-norm means scaled by ``spread``."""
    if min(num_classes, dim, per_class) <= 0 or spread <= 0:
        raise ConfigError("synth_blobs arguments must all be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= spread
    inputs = np.concatenate([
        means[c] + rng.standard_normal((per_class, dim)) for c in range(num_classes)
    ])
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(
        torch.as_tensor(inputs, dtype=DTYPE),
        torch.as_tensor(labels, dtype=torch.long),
        num_classes,
        name=f"blobs-{num_classes}x{dim}",
    )


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header", offset=len(raw))
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = expected_magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * k:8 + 4 * k], "big") for k in range(ndim))
    expected = header_end + int(np.prod(dims))
    if len(raw) < expected:
        raise DataFormatError(f"{path}: truncated payload, expected {expected} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def load_idx(images_path: str, labels_path: str, num_classes: Optional[int] = None) -> LabeledDataset:
    """Load an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    inputs = torch.as_tensor(images.astype(np.float64) / 255.0).unsqueeze(1)
    label_tensor = torch.as_tensor(labels.astype(np.int64))
    return LabeledDataset(
        inputs,
        label_tensor,
        num_classes or int(labels.max()) + 1,
        name=str(images_path),
    )


def load_csv(path: str, num_classes: Optional[int] = None) -> LabeledDataset:
    """Load a CSV with a header row and columns label,f0,f1,..."""
    frame = pd.read_csv(path)
    if "label" not in frame.columns or len(frame.columns) < 2:
        raise DataFormatError(f"{path}: expected columns label,f0,f1,...")
    labels = frame["label"].to_numpy(dtype=np.int64)
    features = frame.drop(columns=["label"]).to_numpy(dtype=np.float64)
    return LabeledDataset(
        as_tensor(features),
        torch.as_tensor(labels),
        num_classes or int(labels.max()) + 1,
        name=str(path),
    )


@dataclass(frozen=True)
class Standardizer:
    """Per-channel (images) or per-feature (vectors) affine normalization."""

    mean: List[float] = field(default_factory=list)
    std: List[float] = field(default_factory=list)

    def apply(self, dataset: LabeledDataset) -> LabeledDataset:
        shape = (1, -1) + (1,) * (dataset.inputs.dim() - 2)
        mean = torch.as_tensor(self.mean, dtype=DTYPE).view(shape)
        std = torch.as_tensor(self.std, dtype=DTYPE).view(shape)
        return dataset.with_inputs((dataset.inputs - mean) / std)


def fit_standardizer(dataset: LabeledDataset, indices: Sequence[int]) -> Standardizer:
    """Statistics come from ``indices`` only (D_mem), so non-members never leak in."""
    x = dataset.inputs[torch.as_tensor(list(indices), dtype=torch.long)]
    dims = [0] + list(range(2, x.dim()))
    mean = x.mean(dim=dims)
    std = x.std(dim=dims, correction=0).clamp_min(1e-12)
    return Standardizer(mean.tolist(), std.tolist())
