"""
Unit tests for datasets, the split protocol and augmentations.
"""

import struct

import numpy as np
import pytest
import torch

from sif.errors import ConfigError, DataFormatError, DimensionError, SplitError
from sif.models import MiSplit
from sif.services.data import (
    AugmentationFamily,
    augment,
    crop_flip,
    fit_standardizer,
    load_csv,
    load_idx,
    make_splits,
    synth_blobs,
)
from sif.services.tensor_core import DTYPE


class TestSynthBlobs:
    """Tests for the synthetic dataset generator."""

    def test_shape_and_labels(self):
        """Test class-major ordering and sizes."""
        data = synth_blobs(num_classes=3, dim=5, per_class=10, spread=2.0, seed=0)
        assert len(data) == 30
        assert data.input_shape == (5,)
        assert data.labels[:10].tolist() == [0] * 10
        assert data.name == "blobs-3x5"

    def test_deterministic(self):
        """Test the same seed gives identical data."""
        a = synth_blobs(2, 3, 5, 1.0, seed=4)
        b = synth_blobs(2, 3, 5, 1.0, seed=4)
        assert torch.equal(a.inputs, b.inputs)

    def test_rejects_nonpositive_arguments(self):
        """Test invalid generator arguments."""
        with pytest.raises(ConfigError):
            synth_blobs(0, 3, 5, 1.0, seed=0)


class TestMakeSplits:
    """Tests for the member/non-member partition."""

    def test_sizes_and_disjointness(self, blobs):
        """Test four equal attack subsets, no overlaps."""
        split = make_splits(blobs, mem_size=60, seed=1)
        assert len(split.mem_train) == len(split.mem_test) == 30
        assert len(split.nonmem_train) == len(split.nonmem_test) == 30
        assert len(split.validation) == 9
        everything = split.members + split.non_members + split.validation
        assert len(set(everything)) == len(everything)

    def test_disjoint_for_many_seeds(self, blobs):
        """Test every seed yields pairwise-disjoint subsets inside the dataset."""
        for seed in range(50):
            split = make_splits(blobs, mem_size=60, seed=seed)
            parts = [split.mem_train, split.mem_test, split.nonmem_train, split.nonmem_test, split.validation]
            everything = [i for part in parts for i in part]
            assert len(set(everything)) == len(everything)
            assert all(0 <= i < len(blobs) for i in everything)

    def test_deterministic_in_seed(self, blobs):
        """Test reproducibility and seed sensitivity."""
        assert make_splits(blobs, 60, seed=1).to_dict() == make_splits(blobs, 60, seed=1).to_dict()
        assert make_splits(blobs, 60, seed=1).members != make_splits(blobs, 60, seed=2).members

    def test_stratified_halves_balance_classes(self, blobs):
        """Test each half holds every class in near-equal numbers."""
        split = make_splits(blobs, mem_size=60, seed=3)
        labels = blobs.label_array()
        for subset in (split.mem_train, split.mem_test, split.nonmem_train, split.nonmem_test):
            counts = np.bincount(labels[subset], minlength=3)
            assert counts.max() - counts.min() <= 1

    def test_too_small_dataset(self, blobs):
        """Test SplitError reports required versus available."""
        with pytest.raises(SplitError) as excinfo:
            make_splits(blobs, mem_size=100, seed=0)
        assert excinfo.value.available == 180
        assert excinfo.value.required == 209

    def test_odd_mem_size_rejected(self, blobs):
        """Test mem_size must split into two equal halves."""
        with pytest.raises(SplitError):
            make_splits(blobs, mem_size=31, seed=0)

    def test_split_round_trip(self, blobs):
        """Test the manifest survives to_dict/from_dict."""
        split = make_splits(blobs, 60, seed=5)
        restored = MiSplit.from_dict(split.to_dict())
        assert restored.to_dict() == split.to_dict()
        assert restored.membership(split.mem_test[0]) == 1
        assert restored.membership(split.nonmem_train[0]) == 0
        assert restored.membership(split.validation[0]) is None

    def test_subset_selector(self, blob_split):
        """Test fit/eval/all selectors."""
        assert blob_split.subset("fit")["member"] == blob_split.mem_train
        assert blob_split.subset("eval")["non_member"] == blob_split.nonmem_test
        assert len(blob_split.subset("all")["member"]) == 60
        with pytest.raises(ValueError):
            blob_split.subset("bogus")


class TestAugmentation:
    """Tests for crop/flip and jitter transforms."""

    def test_pad_zero_without_flip_is_identity(self):
        """Test crop at pad 0 and no flip returns the input."""
        image = torch.arange(16, dtype=DTYPE).view(1, 4, 4)
        assert torch.equal(crop_flip(image, 0, 0, 0, False), image)

    def test_centered_crop_with_flip_mirrors(self):
        """Test the centred crop plus flip equals a horizontal mirror."""
        image = torch.arange(16, dtype=DTYPE).view(1, 4, 4)
        out = crop_flip(image, 1, 1, 1, True)
        assert torch.equal(out, torch.flip(image, dims=[-1]))

    def test_crop_shift_uses_reflection(self):
        """Test a shifted crop pulls reflected pixels in at the border."""
        image = torch.arange(16, dtype=DTYPE).view(1, 4, 4)
        out = crop_flip(image, 1, 0, 1, False)
        assert out[0, 0].tolist() == image[0, 1].tolist()
        assert out[0, 1].tolist() == image[0, 0].tolist()

    def test_identity_family_passes_through(self):
        """Test identity returns the sample untouched."""
        x = torch.ones(3, dtype=DTYPE)
        out, label = augment(AugmentationFamily(), (x, 2), np.random.default_rng(0))
        assert out is x and label == 2

    def test_jitter_is_seeded(self):
        """Test vector jitter depends only on the RNG state."""
        family = AugmentationFamily(kind="vector_jitter", sigma=0.1)
        x = torch.zeros(4, dtype=DTYPE)
        a, _ = augment(family, (x, 0), np.random.default_rng(9))
        b, _ = augment(family, (x, 0), np.random.default_rng(9))
        assert torch.equal(a, b)
        assert not torch.equal(a, x)

    def test_crop_flip_needs_images(self):
        """Test crop/flip refuses flat vectors."""
        family = AugmentationFamily(kind="image_crop_flip", pad=1)
        with pytest.raises(DimensionError):
            augment(family, (torch.zeros(4, dtype=DTYPE), 0), np.random.default_rng(0))

    def test_every_crop_offset_is_drawn(self):
        """Test 10^4 draws at pad 4 cover all 81 (top, left) offsets."""
        image = torch.arange(100, dtype=DTYPE).view(1, 10, 10)
        offsets = {
            tuple(crop_flip(image, 4, top, left, False).flatten().tolist()): (top, left)
            for top in range(9)
            for left in range(9)
        }
        assert len(offsets) == 81
        family = AugmentationFamily(kind="image_crop_flip", pad=4, flip_prob=0.0)
        rng = np.random.default_rng(0)
        seen = set()
        for _ in range(10_000):
            out, _ = augment(family, (image, 1), rng)
            seen.add(offsets[tuple(out.flatten().tolist())])
        assert seen == {(top, left) for top in range(9) for left in range(9)}

    def test_random_families_preserve_labels_and_shape(self):
        """Test no drawn transform changes the label or the input shape."""
        rng = np.random.default_rng(4)
        for _ in range(50):
            kind = ["identity", "vector_jitter", "image_crop_flip"][int(rng.integers(3))]
            family = AugmentationFamily(
                kind=kind, pad=int(rng.integers(0, 4)), flip_prob=float(rng.random()), sigma=float(rng.random()),
            )
            image = torch.as_tensor(rng.standard_normal((2, 6, 6)), dtype=DTYPE)
            x = image if kind == "image_crop_flip" else image.flatten()
            label = int(rng.integers(10))
            out, out_label = augment(family, (x, label), rng)
            assert out_label == label
            assert out.shape == x.shape

    def test_invalid_family(self):
        """Test configuration validation."""
        with pytest.raises(ConfigError):
            AugmentationFamily(kind="rotate")
        with pytest.raises(ConfigError):
            AugmentationFamily(kind="image_crop_flip", flip_prob=1.5)


def _write_idx(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for dim in dims:
            fh.write(struct.pack(">I", dim))
        fh.write(bytes(payload))


class TestLoaders:
    """Tests for IDX and CSV loading."""

    def test_idx_pair(self, tmp_path):
        """Test images are scaled to [0, 1] with a channel axis."""
        images = tmp_path / "images.idx"
        labels = tmp_path / "labels.idx"
        _write_idx(images, 0x803, (2, 2, 2), [0, 255, 51, 102, 0, 0, 0, 255])
        _write_idx(labels, 0x801, (2,), [1, 0])
        data = load_idx(str(images), str(labels))
        assert data.inputs.shape == (2, 1, 2, 2)
        assert float(data.inputs[0, 0, 0, 1]) == pytest.approx(1.0)
        assert float(data.inputs[0, 0, 1, 0]) == pytest.approx(0.2)
        assert data.labels.tolist() == [1, 0]
        assert data.num_classes == 2

    def test_idx_bad_magic_reports_offset(self, tmp_path):
        """Test a wrong magic number is reported at byte offset 0."""
        path = tmp_path / "bad.idx"
        _write_idx(path, 0x999, (1,), [0])
        with pytest.raises(DataFormatError) as excinfo:
            load_idx(str(path), str(path))
        assert excinfo.value.offset == 0

    def test_idx_truncated_payload(self, tmp_path):
        """Test a short payload is reported with the file length as offset."""
        images = tmp_path / "images.idx"
        _write_idx(images, 0x803, (2, 2, 2), [0, 1, 2])
        with pytest.raises(DataFormatError) as excinfo:
            load_idx(str(images), str(images))
        assert excinfo.value.offset == 19

    def test_csv(self, tmp_path):
        """Test label column plus features."""
        path = tmp_path / "data.csv"
        path.write_text("label,f0,f1\n0,1.0,2.0\n1,3.0,4.5\n")
        data = load_csv(str(path))
        assert data.inputs.tolist() == [[1.0, 2.0], [3.0, 4.5]]
        assert data.labels.tolist() == [0, 1]

    def test_csv_without_label_column(self, tmp_path):
        """Test a missing label column is a format error."""
        path = tmp_path / "data.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataFormatError):
            load_csv(str(path))


class TestStandardizer:
    """Tests for member-only normalization statistics."""

    def test_members_become_zero_mean_unit_std(self, blobs, blob_split):
        """Test standardized members have mean 0 and population std 1."""
        standardized = fit_standardizer(blobs, blob_split.members).apply(blobs)
        members = standardized.inputs[blob_split.members]
        assert torch.allclose(members.mean(dim=0), torch.zeros(4, dtype=DTYPE), atol=1e-12)
        assert torch.allclose(members.std(dim=0, correction=0), torch.ones(4, dtype=DTYPE), atol=1e-12)
