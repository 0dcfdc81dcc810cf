"""Tests for volume_reconstructor: padding, rescaling and anomaly maps."""

import numpy as np
import pytest

from mra_errors import NormalizationMismatchError, ShapeMismatchError
from nifti_io import BinaryMask3, Volume
from vae_model import CheckpointMetadata
from vae_objectives import SsimConfig
from volume_preprocessor import normalize
from volume_reconstructor import (
    anomaly_map,
    check_normalization,
    embed_valid_map,
    padded_size,
    reconstruct_and_rescale,
    reconstruct_volume,
)


@pytest.mark.parametrize("n,expected", [(1, 32), (32, 32), (33, 40), (55, 56), (61, 64), (73, 80)])
def test_padded_size(n, expected):
    assert padded_size(n) == expected


class TestReconstruct:
    def test_odd_dims_preserved(self, params):
        gen = np.random.default_rng(0)
        vol = Volume(gen.uniform(0, 300, size=(61, 73, 55)).astype(np.float32))
        result = reconstruct_and_rescale(params, vol)
        assert result.reconstruction.dims == (61, 73, 55)
        assert result.reconstruction.data.min() >= 0.0
        assert result.reconstruction.data.max() <= result.record.scale * (1 + 1e-6)

    def test_deterministic(self, params, ramp_volume):
        norm, _ = normalize(ramp_volume)
        a = reconstruct_volume(params, norm)
        b = reconstruct_volume(params, norm)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("axis", [0, 1])
    def test_other_slice_axes(self, params, ramp_volume, axis):
        norm, _ = normalize(ramp_volume)
        assert reconstruct_volume(params, norm, slice_axis=axis).dims == norm.dims

    def test_geometry_kept(self, params, ramp_volume):
        result = reconstruct_and_rescale(params, ramp_volume)
        assert result.reconstruction.spacing == ramp_volume.spacing

    def test_bias_flattening_path(self, params, ramp_volume):
        result = reconstruct_and_rescale(params, ramp_volume, bias_sigma=4.0)
        assert result.reconstruction.dims == ramp_volume.dims


class TestNormalizationCheck:
    def test_matching(self):
        check_normalization(CheckpointMetadata("a", "l2", "max95-clamp"))

    def test_mismatch(self):
        with pytest.raises(NormalizationMismatchError):
            check_normalization(CheckpointMetadata("a", "l2", "zscore"))


class TestAnomalyMap:
    def test_identical_pair_is_clean(self, healthy_phantom):
        norm, _ = normalize(healthy_phantom.volume)
        result = anomaly_map(norm, norm)
        assert result.mask.count == 0
        assert result.threshold == 0.6
        np.testing.assert_allclose(result.ssim_map, 1.0, atol=1e-5)

    def test_finds_removed_aneurysm(self, healthy_phantom, aneurysm_phantom):
        sick, record = normalize(aneurysm_phantom.volume)
        healthy = healthy_phantom.volume.with_data(
            np.clip(healthy_phantom.volume.data / record.scale, 0, 1))
        result = anomaly_map(sick, healthy, threshold=0.9)
        assert (result.mask.voxels & aneurysm_phantom.aneurysm_mask.voxels).any()

    def test_threshold_monotone(self, healthy_phantom):
        norm, _ = normalize(healthy_phantom.volume)
        gen = np.random.default_rng(2)
        noisy = norm.with_data(np.clip(norm.data + gen.normal(0, 0.1, norm.dims), 0, 1))
        low = anomaly_map(norm, noisy, threshold=0.3).mask.voxels
        high = anomaly_map(norm, noisy, threshold=0.7).mask.voxels
        assert np.all(high[low])
        assert high.sum() >= low.sum()

    def test_mask_restricts(self, healthy_phantom):
        norm, _ = normalize(healthy_phantom.volume)
        noisy = norm.with_data(np.clip(1.0 - norm.data, 0, 1))
        result = anomaly_map(norm, noisy, mask=BinaryMask3.empty(norm.dims))
        assert result.mask.count == 0

    def test_dims_mismatch(self, ramp_volume):
        other = Volume(np.ones((10, 10, 10)))
        with pytest.raises(ShapeMismatchError):
            anomaly_map(ramp_volume, other)

    def test_embed_border_is_one(self):
        maps = np.zeros((3, 10, 6))
        full = embed_valid_map(maps, (20, 16, 3), SsimConfig().window_size, slice_axis=2)
        assert full.shape == (20, 16, 3)
        assert full[0, 0, 0] == 1.0
        assert full[5, 5, 1] == 0.0
        assert full[15, 5, 1] == 1.0
