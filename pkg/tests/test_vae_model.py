"""Tests for vae_model: shapes, reparameterization and checkpoints."""

import struct

import numpy as np
import pytest

from mra_errors import (
    ArchitectureMismatchError,
    CheckpointBadMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeMismatchError,
)
from tensor_engine import Tensor
from vae_model import (
    CHECKPOINT_MAGIC,
    CheckpointMetadata,
    LatentStats,
    VaeArchitecture,
    VaeParams,
    decode,
    encode,
    forward,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)


def _metadata(arch):
    return CheckpointMetadata(arch.descriptor(), "ssim", "max95-clamp", {"seed": "7"})


class TestShapes:
    def test_patch_latent(self, params, rng):
        stats = encode(params, Tensor(rng.uniform(size=(2, 1, 32, 32)).astype(np.float32)))
        assert stats.mu.shape == (2, 32, 4, 4)
        assert stats.logvar.shape == (2, 32, 4, 4)

    def test_full_slice(self, params, rng):
        recon, stats = forward(params, Tensor(rng.uniform(size=(1, 1, 64, 48)).astype(np.float32)),
                               deterministic=True)
        assert recon.shape == (1, 1, 64, 48)
        assert stats.mu.shape == (1, 32, 8, 6)

    def test_output_in_unit_interval(self, params, rng):
        recon, _ = forward(params, Tensor(rng.uniform(size=(3, 1, 32, 32)).astype(np.float32)),
                           rng=np.random.default_rng(0))
        assert np.all(recon.data > 0) and np.all(recon.data < 1)

    @pytest.mark.parametrize("hw", [(30, 32), (36, 32), (24, 24)])
    def test_bad_sizes(self, params, hw):
        with pytest.raises(ShapeMismatchError):
            encode(params, Tensor(np.zeros((1, 1) + hw, dtype=np.float32)))

    def test_decode_channel_check(self, params):
        with pytest.raises(ShapeMismatchError):
            decode(params, Tensor(np.zeros((1, 16, 4, 4), dtype=np.float32)))

    def test_logvar_clamped(self, arch, rng):
        p = VaeParams.initialize(arch, seed=3)
        arrays = p.arrays()
        arrays["logvar.bias"] = np.full_like(arrays["logvar.bias"], 50.0)
        stats = encode(VaeParams.from_arrays(arch, arrays), Tensor(rng.uniform(size=(1, 1, 32, 32)).astype(np.float32)))
        assert float(stats.logvar.data.max()) <= arch.logvar_limit


class TestReparameterize:
    def test_deterministic_returns_mu(self, rng):
        stats = LatentStats(Tensor(rng.standard_normal((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))
        assert reparameterize(stats, None, deterministic=True) is stats.mu

    def test_vanishing_sigma(self, rng):
        mu = Tensor(rng.standard_normal((2, 4, 3, 3)))
        stats = LatentStats(mu, Tensor(np.full((2, 4, 3, 3), -40.0)))
        z = reparameterize(stats, np.random.default_rng(0))
        np.testing.assert_allclose(z.data, mu.data, atol=1e-3)

    def test_seeded(self, rng):
        stats = LatentStats(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))
        a = reparameterize(stats, np.random.default_rng(5)).data
        b = reparameterize(stats, np.random.default_rng(5)).data
        np.testing.assert_array_equal(a, b)

    def test_needs_generator(self):
        stats = LatentStats(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))))
        with pytest.raises(ValueError):
            reparameterize(stats, None)


class TestParams:
    def test_initialize_seeded(self, arch):
        a = VaeParams.initialize(arch, seed=11).arrays()
        b = VaeParams.initialize(arch, seed=11).arrays()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_biases_zero(self, params):
        for name, arr in params.arrays().items():
            if name.endswith(".bias"):
                assert not arr.any()

    def test_wrong_shape_rejected(self, arch, params):
        arrays = dict(params.arrays())
        arrays["enc1.weight"] = np.zeros((32, 1, 3, 3), dtype=np.float32)
        with pytest.raises(ArchitectureMismatchError):
            VaeParams.from_arrays(arch, arrays)


class TestCheckpoint:
    def test_round_trip(self, arch, params, tmp_path):
        path = tmp_path / "model.avae"
        save_checkpoint(params, _metadata(arch), path)
        loaded, meta = load_checkpoint(path)
        assert meta.loss_mode == "ssim"
        assert meta.normalization == "max95-clamp"
        assert meta.extra == {"seed": "7"}
        for name, arr in params.arrays().items():
            np.testing.assert_array_equal(loaded.arrays()[name], arr)
            assert loaded.arrays()[name].dtype == arr.dtype

    def test_double_precision_kept(self, arch, tmp_path):
        p = VaeParams.initialize(arch, seed=2, precision="double")
        save_checkpoint(p, _metadata(arch), tmp_path / "d.avae")
        loaded, _ = load_checkpoint(tmp_path / "d.avae")
        assert loaded.arrays()["out.weight"].dtype == np.float64

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.avae"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointBadMagicError):
            load_checkpoint(path)

    def test_future_version(self, tmp_path):
        path = tmp_path / "v9.avae"
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 9))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_truncated(self, arch, params, tmp_path):
        path = tmp_path / "model.avae"
        save_checkpoint(params, _metadata(arch), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_architecture_mismatch(self, params, tmp_path):
        path = tmp_path / "model.avae"
        meta = CheckpointMetadata("vae/v1/latent16/other", "l2", "max95-clamp")
        save_checkpoint(params, meta, path)
        with pytest.raises(ArchitectureMismatchError):
            load_checkpoint(path)
