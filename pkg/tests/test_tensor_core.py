"""
Unit tests for flat parameter vectors, losses and exact derivatives.
"""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sif.errors import DataFormatError, DimensionError, LayoutMismatchError
from sif.services.oracle import gradient_check, hvp_check
from sif.services.target_models import ModelSpec, init_params
from sif.services.tensor_core import (
    DTYPE,
    Batch,
    ParamVector,
    as_tensor,
    build_layout,
    cross_entropy,
    forward_loss,
    grad,
    hvp,
    regularized_mask,
)
from tests.conftest import QuadraticNetwork, random_spd


class TestAsTensor:
    """Tests for external input conversion."""

    def test_reshapes_to_requested_shape(self):
        """Test values are reshaped and stored as float64."""
        tensor = as_tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
        assert tensor.shape == (2, 3)
        assert tensor.dtype == DTYPE

    def test_rejects_nan(self):
        """Test NaN input is refused."""
        with pytest.raises(DataFormatError):
            as_tensor([1.0, float("nan")])

    def test_rejects_wrong_element_count(self):
        """Test a shape that cannot be filled is refused."""
        with pytest.raises(DataFormatError):
            as_tensor([1.0, 2.0, 3.0], shape=(2, 2))


class TestParamVector:
    """Tests for ParamVector layout handling and arithmetic."""

    def test_layout_offsets_are_contiguous(self):
        """Test build_layout places blocks end to end."""
        layout = build_layout([("a.weight", (2, 3)), ("a.bias", (2,))])
        assert [slot.offset for slot in layout] == [0, 6]
        assert ParamVector.zeros(layout).data.numel() == 8

    def test_mismatched_length_rejected(self):
        """Test data shorter than the layout is refused."""
        layout = build_layout([("w", (3,))])
        with pytest.raises(LayoutMismatchError):
            ParamVector(torch.zeros(2, dtype=DTYPE), layout)

    def test_arithmetic_requires_same_layout(self):
        """Test adding vectors with different layouts fails."""
        a = ParamVector.zeros(build_layout([("w", (3,))]))
        b = ParamVector.zeros(build_layout([("v", (3,))]))
        with pytest.raises(LayoutMismatchError):
            a + b

    def test_dot_and_norm(self):
        """Test inner product and norm."""
        layout = build_layout([("w", (2,))])
        a = ParamVector(torch.tensor([3.0, 4.0], dtype=DTYPE), layout)
        assert a.norm() == pytest.approx(5.0)
        assert a.dot(a * 2.0) == pytest.approx(50.0)

    def test_views_share_storage(self):
        """Test unflattened views index into the flat data."""
        layout = build_layout([("w", (2, 2)), ("b", (2,))])
        vector = ParamVector(torch.arange(6, dtype=DTYPE), layout)
        views = vector.views()
        assert views["w"].tolist() == [[0.0, 1.0], [2.0, 3.0]]
        assert views["b"].tolist() == [4.0, 5.0]

    def test_normalization_layers_excluded_from_penalty(self):
        """Test the l2 mask zeroes normalization blocks."""
        layout = build_layout([("w", (2,)), ("bn.scale", (2,))], normalization=["bn.scale"])
        assert regularized_mask(layout).tolist() == [1.0, 1.0, 0.0, 0.0]


class TestCrossEntropy:
    """Tests for the per-sample loss."""

    def test_matches_torch_reference(self):
        """Test agreement with torch's cross_entropy."""
        generator = torch.Generator().manual_seed(0)
        logits = torch.randn(5, 4, dtype=DTYPE, generator=generator)
        labels = torch.tensor([0, 3, 1, 2, 2])
        expected = F.cross_entropy(logits, labels, reduction="none")
        assert torch.allclose(cross_entropy(logits, labels), expected, atol=1e-12)

    def test_loss_is_nonnegative_for_large_logits(self):
        """Test logsumexp keeps large logits finite."""
        logits = torch.tensor([[1000.0, 0.0]], dtype=DTYPE)
        loss = cross_entropy(logits, torch.tensor([1]))
        assert torch.isfinite(loss).all()
        assert float(loss[0]) == pytest.approx(1000.0)

    def test_uniform_logits_cost_log_of_class_count(self):
        """Test equal logits over three classes give ln 3 whatever the label."""
        loss = cross_entropy(torch.zeros(3, 3, dtype=DTYPE), torch.tensor([0, 1, 2]))
        assert torch.allclose(loss, torch.full((3,), math.log(3.0), dtype=DTYPE), atol=1e-12)
        spec = ModelSpec.logreg(4, 3)
        batch = Batch.of(np.random.default_rng(0).standard_normal((5, 4)), [0, 1, 2, 0, 1])
        assert forward_loss(spec, ParamVector.zeros(spec.layout()), batch) == pytest.approx(math.log(3.0), abs=1e-12)


class TestDerivatives:
    """Tests for gradients and Hessian-vector products."""

    def test_quadratic_gradient_and_hvp_are_exact(self):
        """Test grad = A (theta - mean x) and H v = A v for a quadratic loss."""
        matrix = random_spd(4, 0.5, 3.0, seed=1)
        network = QuadraticNetwork(matrix)
        rng = np.random.default_rng(2)
        batch = Batch.of(rng.standard_normal((6, 4)), np.zeros(6))
        params = ParamVector.from_numpy(rng.standard_normal(4), network.layout())
        g = grad(network, params, batch)
        expected = matrix @ (params.numpy() - batch.inputs.numpy().mean(axis=0))
        assert np.allclose(g.numpy(), expected, atol=1e-12)
        v = ParamVector.from_numpy(rng.standard_normal(4), network.layout())
        assert np.allclose(hvp(network, params, batch, v).numpy(), matrix @ v.numpy(), atol=1e-12)

    def test_l2_penalty_adds_identity(self):
        """Test the penalty contributes l2 * v to the HVP."""
        network = QuadraticNetwork(np.eye(3))
        batch = Batch.of(np.zeros((1, 3)), [0])
        params = ParamVector.zeros(network.layout())
        v = ParamVector.from_numpy(np.array([1.0, -2.0, 0.5]), network.layout())
        out = hvp(network, params, batch, v, l2=0.5)
        assert np.allclose(out.numpy(), 1.5 * v.numpy())

    def test_mlp_gradient_matches_finite_differences(self):
        """Test every MLP gradient coordinate against central differences."""
        spec = ModelSpec.mlp(5, [8], 3)
        rng = np.random.default_rng(0)
        batch = Batch.of(rng.standard_normal((20, 5)), rng.integers(0, 3, 20))
        params = init_params(spec, seed=0)
        result = gradient_check(spec, params, batch, l2=0.01)
        assert result.passed, result.to_dict()

    def test_mlp_hvp_matches_gradient_differences(self):
        """Test H v against differences of gradients."""
        spec = ModelSpec.mlp(5, [8], 3)
        rng = np.random.default_rng(1)
        batch = Batch.of(rng.standard_normal((20, 5)), rng.integers(0, 3, 20))
        result = hvp_check(spec, init_params(spec, seed=1), batch, l2=0.01)
        assert result.passed, result.to_dict()

    @staticmethod
    def _mlp_problem(seed):
        spec = ModelSpec.mlp(5, [8], 3)
        rng = np.random.default_rng(seed)
        batch = Batch.of(rng.standard_normal((20, 5)), rng.integers(0, 3, 20))
        params = init_params(spec, seed=seed)
        vectors = [ParamVector.from_numpy(rng.standard_normal(len(params)), spec.layout()) for _ in range(2)]
        return spec, params, batch, vectors

    def test_hvp_is_symmetric(self):
        """Test <u, H v> = <v, H u> for the regularized MLP objective."""
        spec, params, batch, (u, v) = self._mlp_problem(3)
        uhv = u.dot(hvp(spec, params, batch, v, l2=0.01))
        vhu = v.dot(hvp(spec, params, batch, u, l2=0.01))
        assert uhv == pytest.approx(vhu, rel=1e-10, abs=1e-12)

    def test_hvp_is_linear(self):
        """Test H(a u + b v) = a H u + b H v."""
        spec, params, batch, (u, v) = self._mlp_problem(4)
        a, b = 1.7, -0.3
        combined = hvp(spec, params, batch, a * u + b * v, l2=0.01)
        separate = a * hvp(spec, params, batch, u, l2=0.01) + b * hvp(spec, params, batch, v, l2=0.01)
        assert torch.allclose(combined.data, separate.data, rtol=1e-10, atol=1e-12)

    def test_forward_loss_checks_input_shape(self):
        """Test an input of the wrong width names the first layer."""
        spec = ModelSpec.logreg(4, 2)
        batch = Batch.of(np.zeros((2, 5)), [0, 1])
        with pytest.raises(DimensionError, match="fc.weight"):
            forward_loss(spec, init_params(spec, 0), batch)

    def test_forward_loss_checks_labels(self):
        """Test labels outside the class range are refused."""
        spec = ModelSpec.logreg(4, 2)
        batch = Batch.of(np.zeros((1, 4)), [2])
        with pytest.raises(DimensionError):
            forward_loss(spec, init_params(spec, 0), batch)
