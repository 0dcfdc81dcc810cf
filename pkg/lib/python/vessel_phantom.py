"""
Vessel Phantom Generator

Seeded synthetic angiography-like volumes: an ellipsoidal brain of textured
tissue crossed by bright tubes swept along smooth random curves, with an
optional spherical aneurysm sitting on one vessel. Ground-truth vessel and
aneurysm masks come with every volume.

Randomness is split into three independent streams (geometry, texture,
aneurysm), so a volume generated with and without an aneurysm differs only
where the aneurysm is.
"""

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from mra_errors import ConfigError, PhantomGeometryError
from nifti_io import BinaryMask3, Volume, write_mask, write_nifti
from run_config import check_keys, load_json_object

logger = logging.getLogger(__name__)

MIN_DIM = 48


@dataclass
class PhantomSpec:
    """Geometry and intensity ranges of one phantom"""
    dims: Tuple[int, int, int] = (64, 64, 64)
    n_vessels: int = 4
    radius_range: Tuple[float, float] = (1.0, 2.5)
    vessel_intensity_range: Tuple[float, float] = (0.75, 1.0)
    tissue_base: float = 0.25
    tissue_noise_amplitude: float = 0.05
    tissue_smoothing: float = 2.0
    background_noise_sigma: float = 0.02
    brain_extent: float = 0.42
    control_points: Tuple[int, int] = (4, 6)
    curve_step: float = 0.25
    aneurysm: bool = False
    aneurysm_radius_range: Tuple[float, float] = (2.5, 5.0)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        for name in ("radius_range", "vessel_intensity_range", "control_points", "aneurysm_radius_range"):
            setattr(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PhantomSpec":
        check_keys(cls, data, "phantom spec")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Path) -> "PhantomSpec":
        return cls.from_dict(load_json_object(path))

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < MIN_DIM:
            raise PhantomGeometryError(f"phantom dims must be at least {MIN_DIM} per axis", dims=self.dims)
        lo, hi = self.radius_range
        alo, ahi = self.aneurysm_radius_range
        if not (0 < lo <= hi and 0 < alo <= ahi):
            raise PhantomGeometryError("radius ranges must be positive and ordered",
                                       radius_range=self.radius_range,
                                       aneurysm_radius_range=self.aneurysm_radius_range)
        if max(hi, ahi) >= min(self.dims) / 2:
            raise PhantomGeometryError("radius does not fit in the volume",
                                       max_radius=max(hi, ahi), dims=self.dims)
        ilo, ihi = self.vessel_intensity_range
        if not (0 <= ilo <= ihi <= 1 and 0 <= self.tissue_base <= 1):
            raise PhantomGeometryError("intensities must lie in [0, 1]",
                                       vessel_intensity_range=self.vessel_intensity_range,
                                       tissue_base=self.tissue_base)
        if self.n_vessels < 1 or not 2 <= self.control_points[0] <= self.control_points[1]:
            raise PhantomGeometryError("need at least one vessel and two control points",
                                       n_vessels=self.n_vessels, control_points=self.control_points)
        if not 0 < self.brain_extent < 0.5 or self.curve_step <= 0:
            raise PhantomGeometryError("brain_extent must lie in (0, 0.5) and curve_step be positive",
                                       brain_extent=self.brain_extent, curve_step=self.curve_step)


class Phantom(NamedTuple):
    volume: Volume
    vessel_mask: BinaryMask3
    aneurysm_mask: BinaryMask3


class CohortMember(NamedTuple):
    id: str
    seed: int
    has_aneurysm: bool
    volume: Volume
    vessel_mask: BinaryMask3
    aneurysm_mask: BinaryMask3


def _control_points(rng: np.random.Generator, center: np.ndarray, semi_axes: np.ndarray,
                    count: int) -> np.ndarray:
    """Points inside the ellipsoid running from one side to the other"""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    start = center - 0.85 * semi_axes * direction
    end = center + 0.85 * semi_axes * direction
    t = np.linspace(0.0, 1.0, count)[:, None]
    points = start + t * (end - start)
    points[1:-1] += rng.uniform(-0.35, 0.35, size=(count - 2, 3)) * semi_axes
    # pull stray points back inside 90% of the ellipsoid
    radial = np.sqrt((((points - center) / semi_axes) ** 2).sum(axis=1))
    scale = np.minimum(1.0, 0.9 / np.maximum(radial, 1e-12))[:, None]
    return center + (points - center) * scale


def _sample_curve(points: np.ndarray, step: float) -> np.ndarray:
    """Cubic spline through the points, resampled at roughly equal arc-length step"""
    spline = CubicSpline(np.linspace(0.0, 1.0, len(points)), points, axis=0)
    dense_t = np.linspace(0.0, 1.0, 2048)
    dense = spline(dense_t)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    n = int(np.ceil(arc[-1] / step)) + 1
    return spline(np.interp(np.linspace(0.0, arc[-1], n), arc, dense_t))


def _tube_mask(grid: np.ndarray, curve: np.ndarray, radius: float, dims: Tuple[int, int, int]) -> np.ndarray:
    distance, _ = cKDTree(curve).query(grid, distance_upper_bound=radius + 1e-9)
    return (distance <= radius).reshape(dims)


def generate(spec: PhantomSpec) -> Phantom:
    """
    Build one phantom

    Returns:
        Phantom(volume, vessel_mask, aneurysm_mask); intensities in [0, 1]
    """
    spec.validate()
    dims = spec.dims
    geometry_seq, texture_seq, aneurysm_seq = np.random.SeedSequence(spec.seed).spawn(3)
    geometry = np.random.default_rng(geometry_seq)
    texture = np.random.default_rng(texture_seq)
    aneurysm_rng = np.random.default_rng(aneurysm_seq)

    center = (np.array(dims, dtype=np.float64) - 1) / 2.0
    semi_axes = spec.brain_extent * np.array(dims, dtype=np.float64)
    grid = np.indices(dims, dtype=np.float64).reshape(3, -1).T
    brain = ((((grid - center) / semi_axes) ** 2).sum(axis=1) <= 1.0).reshape(dims)

    smooth = ndimage.gaussian_filter(texture.standard_normal(dims), sigma=spec.tissue_smoothing)
    smooth /= max(float(smooth.std()), 1e-12)
    tissue = np.where(brain, spec.tissue_base + spec.tissue_noise_amplitude * smooth, 0.0)

    vessel_field = np.zeros(dims)
    vessel_mask = np.zeros(dims, dtype=bool)
    curves: List[Tuple[np.ndarray, float, float]] = []
    for _ in range(spec.n_vessels):
        count = int(geometry.integers(spec.control_points[0], spec.control_points[1] + 1))
        curve = _sample_curve(_control_points(geometry, center, semi_axes, count), spec.curve_step)
        radius = float(geometry.uniform(*spec.radius_range))
        intensity = float(geometry.uniform(*spec.vessel_intensity_range))
        tube = _tube_mask(grid, curve, radius, dims)
        vessel_field = np.where(tube, np.maximum(vessel_field, intensity), vessel_field)
        vessel_mask |= tube
        curves.append((curve, radius, intensity))

    aneurysm_mask = np.zeros(dims, dtype=bool)
    if spec.aneurysm:
        host_curve, host_radius, host_intensity = curves[int(aneurysm_rng.integers(len(curves)))]
        site = host_curve[int(aneurysm_rng.integers(len(host_curve)))]
        lo, hi = spec.aneurysm_radius_range
        # at least one voxel wider than the host so the sac bulges out of the tube
        radius = float(aneurysm_rng.uniform(min(max(lo, host_radius + 1.0), hi), hi))
        aneurysm_mask = (np.linalg.norm(grid - site, axis=1) <= radius).reshape(dims)
        vessel_field = np.where(aneurysm_mask, np.maximum(vessel_field, host_intensity), vessel_field)

    noise = texture.normal(0.0, spec.background_noise_sigma, size=dims)
    data = np.clip(np.maximum(tissue, vessel_field) + noise, 0.0, 1.0).astype(np.float32)
    logger.debug("phantom seed=%d vessels=%d vessel_voxels=%d aneurysm_voxels=%d",
                 spec.seed, spec.n_vessels, int(vessel_mask.sum()), int(aneurysm_mask.sum()))
    return Phantom(Volume(data), BinaryMask3(vessel_mask), BinaryMask3(aneurysm_mask))


def generate_cohort(n: int, aneurysm_fraction: float, base_seed: int,
                    spec: Optional[PhantomSpec] = None) -> List[CohortMember]:
    """
    n phantoms with seeds base_seed + i; round(n * fraction) carry an aneurysm

    Which members get one is decided by a permutation seeded with base_seed.
    """
    if n < 1:
        raise ConfigError("cohort size must be at least 1", n=n)
    if not 0.0 <= aneurysm_fraction <= 1.0:
        raise ConfigError("aneurysm fraction must lie in [0, 1]", aneurysm_fraction=aneurysm_fraction)
    spec = spec or PhantomSpec()
    n_aneurysm = int(np.floor(n * aneurysm_fraction + 0.5))
    chosen = set(int(i) for i in np.random.default_rng(base_seed).permutation(n)[:n_aneurysm])

    cohort = []
    for i in range(n):
        seed = base_seed + i
        phantom = generate(replace(spec, seed=seed, aneurysm=i in chosen))
        cohort.append(CohortMember(f"phantom_{seed:06d}", seed, i in chosen, *phantom))
    logger.info("Generated %d phantoms (%d with aneurysm), base seed %d", n, n_aneurysm, base_seed)
    return cohort


def write_cohort(cohort: List[CohortMember], out_dir: Path) -> pd.DataFrame:
    """
    Write volumes, masks/ and labels.csv

    Returns:
        The labels table
    """
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for member in cohort:
        write_nifti(member.volume, out_dir / f"{member.id}.nii.gz", gzip=True)
        write_mask(member.vessel_mask, member.volume, out_dir / "masks" / f"{member.id}_vessels.nii.gz", gzip=True)
        write_mask(member.aneurysm_mask, member.volume, out_dir / "masks" / f"{member.id}_aneurysm.nii.gz",
                   gzip=True)
        rows.append({
            "id": member.id,
            "seed": member.seed,
            "aneurysm": int(member.has_aneurysm),
            "vessel_voxels": member.vessel_mask.count,
            "aneurysm_voxels": member.aneurysm_mask.count,
        })
    labels = pd.DataFrame(rows, columns=["id", "seed", "aneurysm", "vessel_voxels", "aneurysm_voxels"])
    labels.to_csv(out_dir / "labels.csv", index=False)
    return labels
