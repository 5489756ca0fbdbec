from typing import Dict, Tuple

import numpy as np
import pytest
import torch
import yaml
from click.testing import CliRunner

from sif import create_cli
from sif.services.data import make_splits, synth_blobs
from sif.services.target_models import ModelSpec, TrainConfig, train_target
from sif.services.tensor_core import DTYPE, Batch, LayerSlot, build_layout


class QuadraticNetwork:
    """Per-sample loss 0.5 * (theta - x)^T A (theta - x); the Hessian is exactly A."""

    def __init__(self, matrix):
        self.matrix = torch.as_tensor(matrix, dtype=DTYPE)
        self.dim = self.matrix.shape[0]

    def layout(self) -> Tuple[LayerSlot, ...]:
        return build_layout([("theta", (self.dim,))])

    def check_batch(self, batch: Batch) -> None:
        pass

    def sample_losses(self, views: Dict[str, torch.Tensor], batch: Batch) -> torch.Tensor:
        diff = views["theta"].unsqueeze(0) - batch.inputs
        return 0.5 * ((diff @ self.matrix) * diff).sum(dim=1)

    def to_dict(self) -> dict:
        return {"arch": "quadratic", "matrix": self.matrix.tolist()}


def random_spd(dim: int, low: float, high: float, seed: int) -> np.ndarray:
    """Symmetric matrix with eigenvalues spread over [low, high]."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q @ np.diag(np.linspace(low, high, dim)) @ q.T


@pytest.fixture
def settings(tmp_path):
    """Process settings for tests."""

    class TestConfig:
        OUTPUT_DIR = str(tmp_path / "runs")
        LOG_LEVEL = "WARNING"
        THREADS = 1
        TORCH_THREADS = 0
        PARAM_CAP = 100000
        ORACLE_CAP = 2000
        PROGRESS_EVERY = 5

    return TestConfig


@pytest.fixture
def cli(settings):
    """Create the CLI with test settings."""
    return create_cli(config_class=settings)


@pytest.fixture
def runner():
    """Create a click test runner."""
    return CliRunner()


@pytest.fixture
def blobs():
    """Small, well-separated 3-class blob dataset."""
    return synth_blobs(num_classes=3, dim=4, per_class=60, spread=3.0, seed=7)


@pytest.fixture
def blob_split(blobs):
    return make_splits(blobs, mem_size=60, seed=7)


@pytest.fixture
def logreg_checkpoint(blobs, blob_split):
    """Logistic-regression target trained briefly on the blob members."""
    spec = ModelSpec.logreg(4, 3)
    cfg = TrainConfig(epochs=30, batch_size=20, lr=0.1, l2=0.01, seed=7, log_every=0)
    return train_target(spec, blobs, blob_split, cfg)


@pytest.fixture
def write_config(tmp_path):
    """Write an experiment YAML and return its path."""

    def _write(overrides=None, name="experiment.yaml"):
        data = {
            "seed": 3,
            "output_dir": str(tmp_path / "run"),
            "dataset": {"kind": "blobs", "num_classes": 3, "dim": 4, "per_class": 40, "spread": 3.0},
            "split": {"mem_size": 40},
            "model": {"arch": "logreg"},
            "train": {"epochs": 15, "batch_size": 20, "l2": 0.01, "log_every": 0},
            "scorer": {"kind": "sif", "lissa": {"depth": 20, "scale": 10.0}},
            "attack": {"grid_size": 200, "histogram_bins": 10},
        }
        for key, value in (overrides or {}).items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data))
        return str(path)

    return _write
