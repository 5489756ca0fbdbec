"""Flat parameter vectors and exact first/second-order derivatives.

Losses are written as pure functions of one flat float64 parameter
tensor. Gradients use reverse mode (``torch.func.grad``); Hessian-vector
products push a tangent through that gradient (``torch.func.jvp`` over
``grad``), so H is never materialized.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Protocol, Sequence, Tuple

import math

import numpy as np
import torch
from torch import Tensor
from torch.func import grad as func_grad
from torch.func import jvp

from sif.errors import DataFormatError, DimensionError, LayoutMismatchError, NumericOverflowError

DTYPE = torch.float64


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> Tensor:
    """Convert external input to a float64 tensor, rejecting NaN/Inf."""
    tensor = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)
    if shape is not None:
        expected = math.prod(shape)
        if tensor.numel() != expected:
            raise DataFormatError(
                f"{tensor.numel()} values cannot fill shape {tuple(shape)} ({expected} values)"
            )
        tensor = tensor.reshape(tuple(shape))
    if not torch.isfinite(tensor).all():
        raise DataFormatError("input contains NaN or Inf")
    return tensor


@dataclass(frozen=True)
class LayerSlot:
    """One named block of the flat parameter vector."""

    name: str
    offset: int
    shape: Tuple[int, ...]
    # Normalization-layer scale/shift stays out of the l2 penalty
    normalization: bool = False

    @property
    def length(self) -> int:
        return math.prod(self.shape)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "offset": self.offset,
            "shape": list(self.shape),
            "normalization": self.normalization,
        }


def build_layout(blocks: Iterable[Tuple[str, Tuple[int, ...]]], normalization: Iterable[str] = ()) -> Tuple[LayerSlot, ...]:
    """Lay named blocks end to end."""
    norm = set(normalization)
    slots = []
    offset = 0
    for name, shape in blocks:
        slot = LayerSlot(name=name, offset=offset, shape=tuple(shape), normalization=name in norm)
        slots.append(slot)
        offset += slot.length
    return tuple(slots)


def layout_size(layout: Sequence[LayerSlot]) -> int:
    return sum(slot.length for slot in layout)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Contiguous float64 parameters (or gradient, or s(z)) with layer offsets."""

    data: Tensor
    layout: Tuple[LayerSlot, ...]

    def __post_init__(self):
        if self.data.dim() != 1 or self.data.dtype != DTYPE:
            raise LayoutMismatchError("ParamVector data must be a 1-D float64 tensor")
        offset = 0
        for slot in self.layout:
            if slot.offset != offset:
                raise LayoutMismatchError(
                    f"layer {slot.name!r} starts at {slot.offset}, expected {offset}"
                )
            offset += slot.length
        if offset != self.data.numel():
            raise LayoutMismatchError(
                f"layout covers {offset} values, data holds {self.data.numel()}"
            )

    @classmethod
    def zeros(cls, layout: Tuple[LayerSlot, ...]) -> "ParamVector":
        return cls(torch.zeros(layout_size(layout), dtype=DTYPE), layout)

    @classmethod
    def from_numpy(cls, values: np.ndarray, layout: Tuple[LayerSlot, ...]) -> "ParamVector":
        return cls(torch.as_tensor(np.asarray(values, dtype=np.float64).copy()), layout)

    def like(self, data: Tensor) -> "ParamVector":
        return ParamVector(data, self.layout)

    def __len__(self) -> int:
        return self.data.numel()

    def check_compatible(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("parameter vectors have different layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return self.like(self.data + other.data)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return self.like(self.data - other.data)

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.like(self.data * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "ParamVector":
        return self.like(self.data / scalar)

    def dot(self, other: "ParamVector") -> float:
        self.check_compatible(other)
        return float(torch.dot(self.data, other.data))

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.data))

    def views(self) -> Dict[str, Tensor]:
        return unflatten(self.data, self.layout)

    def regularized_mask(self) -> Tensor:
        return regularized_mask(self.layout)

    def numpy(self) -> np.ndarray:
        return self.data.detach().numpy().copy()


def unflatten(flat: Tensor, layout: Sequence[LayerSlot]) -> Dict[str, Tensor]:
    return {
        slot.name: flat[slot.offset:slot.offset + slot.length].view(slot.shape)
        for slot in layout
    }


def regularized_mask(layout: Sequence[LayerSlot]) -> Tensor:
    mask = torch.ones(layout_size(layout), dtype=DTYPE)
    for slot in layout:
        if slot.normalization:
            mask[slot.offset:slot.offset + slot.length] = 0.0
    return mask


@dataclass(frozen=True, eq=False)
class Batch:
    """Inputs with a leading batch dimension and integer class labels."""

    inputs: Tensor
    labels: Tensor

    def __post_init__(self):
        if self.inputs.dim() < 1 or self.inputs.shape[0] < 1:
            raise DimensionError("batch", "at least one sample", tuple(self.inputs.shape))
        if self.labels.dim() != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DimensionError("labels", self.inputs.shape[0], tuple(self.labels.shape))

    @classmethod
    def of(cls, inputs, labels) -> "Batch":
        return cls(
            torch.as_tensor(inputs, dtype=DTYPE),
            torch.as_tensor(labels, dtype=torch.long).reshape(-1),
        )

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    def check_labels(self, num_classes: int) -> None:
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise DimensionError("labels", f"class ids in [0, {num_classes})", self.labels.tolist())


class Network(Protocol):
    """Anything whose per-sample loss is a pure function of named parameter views."""

    def layout(self) -> Tuple[LayerSlot, ...]: ...

    def check_batch(self, batch: Batch) -> None: ...

    def sample_losses(self, views: Dict[str, Tensor], batch: Batch) -> Tensor: ...


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Per-sample −log softmax(logits)[label]."""
    picked = logits.gather(1, labels.unsqueeze(1)).squeeze(1)
    return torch.logsumexp(logits, dim=1) - picked


def objective(
    network: Network,
    batch: Batch,
    l2: float,
    weights: Optional[Tensor] = None,
) -> Callable[[Tensor], Tensor]:
    """Return flat params -> mean loss + l2/2 * ||theta_reg||^2.

    With ``weights`` the data term is ``sum(weights * losses)`` instead of
    the mean.
    """
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    layout = network.layout()
    mask = regularized_mask(layout) if l2 else None

    def loss_fn(flat: Tensor) -> Tensor:
        losses = network.sample_losses(unflatten(flat, layout), batch)
        data_term = losses.mean() if weights is None else (losses * weights).sum()
        if mask is None:
            return data_term
        return data_term + 0.5 * l2 * (flat * flat * mask).sum()

    return loss_fn


def _check_params(network: Network, params: ParamVector, batch: Batch) -> None:
    if params.layout != network.layout():
        raise LayoutMismatchError("parameter layout does not match the model")
    network.check_batch(batch)


def _finite(tensor: Tensor, what: str) -> Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericOverflowError(f"non-finite values in {what}")
    return tensor


def forward_loss(network: Network, params: ParamVector, batch: Batch, l2: float = 0.0) -> float:
    _check_params(network, params, batch)
    with torch.no_grad():
        value = objective(network, batch, l2)(params.data)
    return float(_finite(value, "loss"))


def grad(network: Network, params: ParamVector, batch: Batch, l2: float = 0.0) -> ParamVector:
    _check_params(network, params, batch)
    g = func_grad(objective(network, batch, l2))(params.data)
    return params.like(_finite(g.detach(), "gradient"))


def hvp_function(network: Network, params: ParamVector, batch: Batch, l2: float = 0.0) -> Callable[[Tensor], Tensor]:
    """Return v -> H v on raw tensors, for repeated or vmapped use."""
    _check_params(network, params, batch)
    gradient = func_grad(objective(network, batch, l2))
    primal = params.data.detach()

    def apply(v: Tensor) -> Tensor:
        _, tangent = jvp(gradient, (primal,), (v,))
        return tangent

    return apply


def hvp(network: Network, params: ParamVector, batch: Batch, v: ParamVector, l2: float = 0.0) -> ParamVector:
    params.check_compatible(v)
    out = hvp_function(network, params, batch, l2)(v.data)
    return params.like(_finite(out.detach(), "Hessian-vector product"))
