"""Tests for volume_preprocessor: normalization, Otsu, masks, bias flattening and patches."""

import numpy as np
import pytest

from mra_errors import ConfigError, NormalizationError, PatchSamplingError, ThresholdError
from nifti_io import BinaryMask3, Volume
from volume_preprocessor import (
    PatchConfig,
    apply_normalization,
    brain_mask,
    denormalize,
    flatten_bias,
    largest_component,
    normalize,
    otsu_cut,
    otsu_threshold,
    sample_patches,
)


def brute_force_cut(counts: np.ndarray) -> int:
    """Exhaustive argmax of w0 * w1 * (mu0 - mu1)^2 over every cut"""
    counts = counts.astype(np.float64)
    bins = np.arange(len(counts), dtype=np.float64)
    best_k, best_score = None, -1.0
    for k in range(1, len(counts)):
        c0, c1 = counts[:k].sum(), counts[k:].sum()
        if c0 == 0 or c1 == 0:
            continue
        mu0 = (bins[:k] * counts[:k]).sum() / c0
        mu1 = (bins[k:] * counts[k:]).sum() / c1
        score = c0 * c1 * (mu0 - mu1) ** 2
        if score > best_score:
            best_k, best_score = k, score
    return best_k


class TestNormalize:
    def test_scale_and_clamp(self):
        vol = Volume(np.array([[[0.0, 50.0], [95.0, 100.0]]]))
        norm, record = normalize(vol)
        assert record.scale == pytest.approx(95.0)
        assert record.clamped
        np.testing.assert_allclose(norm.data.ravel(), [0.0, 50 / 95, 1.0, 1.0], rtol=1e-6)

    def test_denormalize_inverts_unclamped(self, ramp_volume):
        norm, record = normalize(ramp_volume)
        back = denormalize(norm, record)
        inside = ramp_volume.data <= record.scale
        np.testing.assert_allclose(back.data[inside], ramp_volume.data[inside], rtol=1e-5)

    def test_all_zero(self):
        with pytest.raises(NormalizationError):
            normalize(Volume(np.zeros((4, 4, 4))))

    def test_non_finite(self):
        data = np.ones((4, 4, 4))
        data[0, 0, 0] = np.nan
        with pytest.raises(NormalizationError):
            normalize(Volume(data))

    def test_apply_record_to_other_volume(self, ramp_volume):
        _, record = normalize(ramp_volume)
        other = apply_normalization(ramp_volume.with_data(ramp_volume.data * 2), record)
        assert other.data.max() == 1.0
        assert other.data.min() >= 0.0


class TestOtsu:
    def test_matches_exhaustive_search(self):
        gen = np.random.default_rng(42)
        for _ in range(100):
            counts = gen.integers(0, 1000, size=256)
            counts[gen.integers(0, 256, size=20)] = 0
            assert otsu_cut(counts) == brute_force_cut(counts)

    def test_threshold_is_bin_edge(self):
        gen = np.random.default_rng(3)
        values = np.concatenate([gen.normal(0.2, 0.03, 500), gen.normal(0.8, 0.03, 500)])
        counts, edges = np.histogram(values, bins=256, range=(values.min(), values.max()))
        assert otsu_threshold(values) == edges[brute_force_cut(counts)]
        assert 0.3 < otsu_threshold(values) < 0.7

    def test_two_values(self):
        assert otsu_threshold(np.array([1.0, 1.0, 5.0])) > 1.0

    def test_constant(self):
        with pytest.raises(ThresholdError):
            otsu_threshold(np.full(10, 0.3))

    def test_empty(self):
        with pytest.raises(ThresholdError):
            otsu_threshold(np.array([]))


class TestMasks:
    def test_largest_component(self):
        grid = np.zeros((10, 10, 10), dtype=bool)
        grid[1:3, 1:3, 1:3] = True
        grid[5:9, 5:9, 5:9] = True
        kept = largest_component(grid)
        assert kept.sum() == 64
        assert not kept[1, 1, 1]

    def test_diagonal_not_connected(self):
        grid = np.zeros((4, 4, 4), dtype=bool)
        grid[0, 0, 0] = grid[1, 1, 1] = True
        assert largest_component(grid).sum() == 1

    def test_brain_mask_on_phantom(self, healthy_phantom):
        norm, _ = normalize(healthy_phantom.volume)
        mask = brain_mask(norm)
        assert mask.dims == norm.dims
        assert 0 < mask.count < np.prod(norm.dims)
        # corners lie outside the phantom brain
        assert not mask.voxels[0, 0, 0]


class TestFlattenBias:
    def test_removes_linear_gain(self):
        base = np.full((32, 32, 32), 0.5)
        gain = np.linspace(0.5, 1.5, 32)[:, None, None]
        flat = flatten_bias(Volume(base * gain), kernel_sigma=4.0)
        core = flat.data[8:24, 8:24, 8:24]
        assert core.std() < 0.1 * (base * gain)[8:24, 8:24, 8:24].std()

    def test_sigma_must_be_positive(self, ramp_volume):
        with pytest.raises(ConfigError):
            flatten_bias(ramp_volume, 0.0)


class TestPatches:
    def test_shapes_and_seed(self, healthy_phantom):
        norm, _ = normalize(healthy_phantom.volume)
        mask = brain_mask(norm)
        a = sample_patches(norm, mask, PatchConfig(patches_per_volume=50, seed=3))
        b = sample_patches(norm, mask, PatchConfig(patches_per_volume=50, seed=3))
        assert a.patches.shape == (50, 1, 32, 32)
        assert a.patches.dtype == np.float32
        np.testing.assert_array_equal(a.patches, b.patches)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_centers_inside_mask_and_bounds(self, healthy_phantom):
        norm, _ = normalize(healthy_phantom.volume)
        mask = brain_mask(norm)
        patches = sample_patches(norm, mask, PatchConfig(patches_per_volume=200, seed=0), slice_axis=2)
        for s, r, c in patches.coords:
            assert mask.voxels[r, c, s]
            assert 16 <= r <= norm.dims[0] - 16
            assert 16 <= c <= norm.dims[1] - 16

    def test_patch_content(self, healthy_phantom):
        norm, _ = normalize(healthy_phantom.volume)
        mask = brain_mask(norm)
        ps = sample_patches(norm, mask, PatchConfig(patches_per_volume=5, seed=1), slice_axis=0)
        s, r, c = ps.coords[0]
        np.testing.assert_array_equal(ps.patches[0, 0], norm.data[s, r - 16:r + 16, c - 16:c + 16])

    def test_slices_too_small(self):
        vol = Volume(np.ones((20, 20, 40)))
        with pytest.raises(PatchSamplingError):
            sample_patches(vol, BinaryMask3.full(vol.dims), PatchConfig(patches_per_volume=1))

    def test_empty_mask(self, ramp_volume):
        with pytest.raises(PatchSamplingError):
            sample_patches(ramp_volume, BinaryMask3.empty(ramp_volume.dims), PatchConfig(patches_per_volume=1))

    def test_patch_size_fixed(self):
        with pytest.raises(ConfigError):
            PatchConfig(patch_size=16)
