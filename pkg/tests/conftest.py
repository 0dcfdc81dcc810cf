"""Shared fixtures; puts lib/python and scripts on sys.path."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT / "lib" / "python"))
sys.path.insert(0, str(ROOT / "scripts"))

from nifti_io import Volume  # noqa: E402
from vae_model import VaeArchitecture, VaeParams  # noqa: E402
from vessel_phantom import PhantomSpec, generate  # noqa: E402


@pytest.fixture(scope="session")
def small_spec() -> PhantomSpec:
    return PhantomSpec(dims=(48, 48, 48), n_vessels=3)


@pytest.fixture(scope="session")
def healthy_phantom(small_spec):
    return generate(small_spec)


@pytest.fixture(scope="session")
def aneurysm_phantom(small_spec):
    from dataclasses import replace
    return generate(replace(small_spec, aneurysm=True))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def arch() -> VaeArchitecture:
    return VaeArchitecture.default()


@pytest.fixture(scope="session")
def params(arch) -> VaeParams:
    return VaeParams.initialize(arch, seed=0)


@pytest.fixture
def ramp_volume() -> Volume:
    """Smooth positive volume with a bright core"""
    grid = np.indices((40, 36, 24), dtype=np.float64)
    center = np.array([20, 18, 12])[:, None, None, None]
    dist = np.sqrt(((grid - center) ** 2).sum(axis=0))
    return Volume(np.clip(200.0 - 8.0 * dist, 10.0, None).astype(np.float32), spacing=(0.5, 0.5, 0.8))
