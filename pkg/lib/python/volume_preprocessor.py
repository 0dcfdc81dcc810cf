"""
Volume Preprocessor

Intensity normalization to [0, 1], Otsu brain masking, an optional
Gaussian bias-flattening step and random 32x32 patch extraction from the
masked, normalized volume.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from mra_errors import (
    ConfigError,
    NormalizationError,
    PatchSamplingError,
    ShapeMismatchError,
    ThresholdError,
)
from nifti_io import BinaryMask3, Volume

logger = logging.getLogger(__name__)

NORMALIZATION_CONVENTION = "max95-clamp"
SCALE_FRACTION = 0.95
HISTOGRAM_BINS = 256
PATCH_SIZE = 32

# 6-connectivity in 3D
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class NormalizationRecord:
    """Scale used by normalize; denormalize multiplies by it"""
    scale: float
    clamped: bool
    convention: str = NORMALIZATION_CONVENTION


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = PATCH_SIZE
    patches_per_volume: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.patch_size != PATCH_SIZE:
            raise ConfigError(f"patch_size is fixed at {PATCH_SIZE}", patch_size=self.patch_size)
        if self.patches_per_volume < 1:
            raise ConfigError("patches_per_volume must be at least 1",
                              patches_per_volume=self.patches_per_volume)


@dataclass
class PatchSet:
    """Sampled patches and their (slice, row, col) centers"""
    patches: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return self.patches.shape[0]


def normalize(volume: Volume) -> Tuple[Volume, NormalizationRecord]:
    """
    Scale so that 95% of the maximum voxel maps to 1, then clamp to [0, 1]

    Raises:
        NormalizationError: the volume has no positive voxel or non-finite values
    """
    data = volume.data.astype(np.float64)
    if not np.isfinite(data).all():
        raise NormalizationError("volume contains non-finite voxels")
    peak = float(data.max())
    if peak <= 0:
        raise NormalizationError("cannot normalize a volume whose maximum is not positive", max=peak)
    scale = SCALE_FRACTION * peak
    scaled = data / scale
    outside = int(np.count_nonzero((scaled > 1) | (scaled < 0)))
    if outside:
        logger.debug("normalize: %d voxels clamped (scale %.6g)", outside, scale)
    normalized = np.clip(scaled, 0.0, 1.0).astype(np.float32)
    return volume.with_data(normalized), NormalizationRecord(scale=scale, clamped=outside > 0)


def denormalize(volume: Volume, record: NormalizationRecord) -> Volume:
    return volume.with_data((volume.data.astype(np.float64) * record.scale).astype(np.float32))


def otsu_cut(counts: np.ndarray) -> int:
    """
    Index k of the histogram cut maximizing between-class variance

    Class 0 is bins [0, k), class 1 bins [k, nbins). Scores are compared
    exactly in integer arithmetic; the lowest k wins ties.
    """
    counts = [int(c) for c in np.asarray(counts).ravel()]
    if sum(1 for c in counts if c > 0) < 2:
        raise ThresholdError("histogram has fewer than two occupied bins")
    total = sum(counts)
    moment = sum(i * c for i, c in enumerate(counts))

    best_k, best_num, best_den = None, 0, 1
    c0 = s0 = 0
    for k in range(1, len(counts)):
        c0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        c1 = total - c0
        if c0 == 0 or c1 == 0:
            continue
        # w0 w1 (mu0 - mu1)^2 * total^2 == (s0 c1 - s1 c0)^2 / (c0 c1)
        diff = s0 * c1 - (moment - s0) * c0
        num, den = diff * diff, c0 * c1
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_threshold(values: np.ndarray, bins: int = HISTOGRAM_BINS) -> float:
    """
    Otsu threshold over a histogram of `bins` bins spanning [min, max]

    Returns:
        Lower edge of the first bin in the upper class
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ThresholdError("no values to threshold")
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise ThresholdError("values are constant; Otsu threshold undefined", value=lo)
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return float(edges[otsu_cut(counts)])


def largest_component(foreground: np.ndarray) -> np.ndarray:
    """Largest 6-connected component of a 3D boolean grid"""
    labels, n = ndimage.label(foreground, structure=FACE_CONNECTIVITY)
    if n == 0:
        return np.zeros_like(foreground, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def brain_mask(volume: Volume) -> BinaryMask3:
    """Otsu foreground reduced to its largest 6-connected component"""
    threshold = otsu_threshold(volume.data)
    mask = BinaryMask3(largest_component(volume.data >= threshold))
    logger.debug("brain_mask: threshold %.4f, %d voxels", threshold, mask.count)
    return mask


def flatten_bias(volume: Volume, kernel_sigma: float) -> Volume:
    """
    Divide out a smooth multiplicative field estimated by Gaussian smoothing

    v' = v / max(G(v), eps) * mean(G(v)), eps = 0.01 * max(G(v))
    """
    if not kernel_sigma > 0:
        raise ConfigError("bias smoothing sigma must be positive", kernel_sigma=kernel_sigma)
    data = volume.data.astype(np.float64)
    smooth = ndimage.gaussian_filter(data, sigma=kernel_sigma, mode="nearest")
    eps = 0.01 * float(smooth.max())
    if eps <= 0:
        return volume
    flattened = data / np.maximum(smooth, eps) * float(smooth.mean())
    return volume.with_data(flattened.astype(np.float32))


def sample_patches(volume: Volume, mask: BinaryMask3, cfg: PatchConfig, slice_axis: int = 2,
                   rng: Optional[np.random.Generator] = None) -> PatchSet:
    """
    Draw patches uniformly over in-mask centers whose patch fits in the slice

    Args:
        volume: Normalized volume
        mask: Brain mask with the volume's dims
        cfg: Patch count and seed
        slice_axis: Axis along which 2D slices are taken
        rng: Optional generator; a fresh one seeded with cfg.seed otherwise

    Returns:
        PatchSet with patches (n, 1, 32, 32) float32 and centers (n, 3)
    """
    if mask.dims != volume.dims:
        raise ShapeMismatchError("mask dims differ from the volume", mask=mask.dims, volume=volume.dims)
    data = np.moveaxis(volume.data, slice_axis, 0)
    inside = np.moveaxis(mask.voxels, slice_axis, 0)
    half = cfg.patch_size // 2
    _, rows, cols = data.shape

    valid = np.zeros_like(inside)
    if rows >= cfg.patch_size and cols >= cfg.patch_size:
        valid[:, half:rows - half + 1, half:cols - half + 1] = \
            inside[:, half:rows - half + 1, half:cols - half + 1]
    candidates = np.flatnonzero(valid)
    if candidates.size == 0:
        raise PatchSamplingError("no in-mask center admits a full patch",
                                 dims=volume.dims, mask_voxels=mask.count)

    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    picks = candidates[rng.integers(0, candidates.size, size=cfg.patches_per_volume)]
    coords = np.stack(np.unravel_index(picks, valid.shape), axis=1)
    patches = np.empty((len(coords), 1, cfg.patch_size, cfg.patch_size), dtype=np.float32)
    for i, (s, r, c) in enumerate(coords):
        patches[i, 0] = data[s, r - half:r + half, c - half:c + half]
    return PatchSet(patches=patches, coords=coords)


def apply_normalization(volume: Volume, record: NormalizationRecord) -> Volume:
    """Scale another volume (e.g. a reconstruction) with an existing record"""
    scaled = volume.data.astype(np.float64) / record.scale
    return volume.with_data(np.clip(scaled, 0.0, 1.0).astype(np.float32))
