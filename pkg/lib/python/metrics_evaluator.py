"""
Metrics Evaluator

Compares original and reconstructed volumes: MSE inside the brain mask,
PSNR, mean SSIM over all valid windows, and DSI between vessel segmentations
of the two volumes. The segmentation is a deterministic Otsu-threshold
stand-in applied identically to both inputs.

All metrics use normalized intensities (L = 1); the reconstruction is scaled
with the original's normalization record.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from mra_errors import DegenerateSegmentationError, EmptyMaskError, ShapeMismatchError, ThresholdError
from nifti_io import BinaryMask3, Volume
from vae_objectives import SsimConfig, slice_ssim_maps
from volume_preprocessor import FACE_CONNECTIVITY, apply_normalization, brain_mask, normalize, otsu_threshold

logger = logging.getLogger(__name__)

MIN_COMPONENT_VOXELS = 10
METRICS = ("mse", "mean_ssim", "psnr_db", "dsi")

REPORT_CONVENTIONS = {
    "intensity": "normalized to [0, 1] with the original's max95-clamp scale (L = 1)",
    "mse": "mean over the brain mask of the original",
    "mean_ssim": "mean over all valid 11x11 Gaussian windows of every slice",
    "psnr_db": "10 log10(1 / mse); infinite when mse is 0 (flagged, excluded from aggregate)",
    "dsi": "Otsu-threshold vessel segmentation of both volumes inside the brain mask",
}

ArrayLike = Union[Volume, np.ndarray]


def _voxels(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x)


def mse(x: ArrayLike, y: ArrayLike, mask: Optional[BinaryMask3] = None) -> float:
    """Mean squared difference, optionally restricted to a mask"""
    a, b = _voxels(x).astype(np.float64), _voxels(y).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError("mse: shapes differ", left=a.shape, right=b.shape)
    diff = (a - b) ** 2
    if mask is not None:
        if mask.dims != a.shape:
            raise ShapeMismatchError("mse: mask dims differ", mask=mask.dims, volume=a.shape)
        if mask.count == 0:
            raise EmptyMaskError("mse over an empty mask")
        diff = diff[mask.voxels]
    return float(diff.mean())


def psnr(mse_value: float, dynamic_range: float = 1.0) -> float:
    """10 log10(L^2 / mse) in dB; inf when mse is 0"""
    if mse_value < 0:
        raise ValueError(f"mse must be nonnegative, got {mse_value}")
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(dynamic_range ** 2 / mse_value)


def mean_ssim_volume(x: ArrayLike, y: ArrayLike, cfg: SsimConfig = SsimConfig(), slice_axis: int = 2) -> float:
    return float(slice_ssim_maps(_voxels(x), _voxels(y), cfg, slice_axis).mean())


def remove_small_components(mask: np.ndarray, min_voxels: int = MIN_COMPONENT_VOXELS) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=FACE_CONNECTIVITY)
    if n == 0:
        return mask.astype(bool)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[labels]


def segment_vessels(volume: Volume, mask: BinaryMask3) -> BinaryMask3:
    """
    Stand-in vessel segmentation: in-mask voxels in the upper Otsu class of the
    in-mask intensities, without 6-connected components under 10 voxels

    Raises:
        DegenerateSegmentationError: in-mask intensities are constant or absent
    """
    if mask.dims != volume.dims:
        raise ShapeMismatchError("segment_vessels: mask dims differ", mask=mask.dims, volume=volume.dims)
    values = volume.data[mask.voxels]
    try:
        threshold = otsu_threshold(values)
    except ThresholdError as e:
        raise DegenerateSegmentationError(f"vessel segmentation undefined: {e.message}", **e.details)
    vessels = (volume.data >= threshold) & mask.voxels
    return BinaryMask3(remove_small_components(vessels))


def dsi(a: BinaryMask3, b: BinaryMask3) -> float:
    """2|a & b| / (|a| + |b|); 1.0 when both are empty"""
    if a.dims != b.dims:
        raise ShapeMismatchError("dsi: mask dims differ", left=a.dims, right=b.dims)
    total = a.count + b.count
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a.voxels & b.voxels)) / total


@dataclass
class MetricsRow:
    id: str
    mse: float
    mean_ssim: float
    psnr_db: float
    dsi: float
    flags: List[str] = field(default_factory=list)


def _segment_or_empty(volume: Volume, mask: BinaryMask3, flag: str, flags: List[str]) -> BinaryMask3:
    try:
        return segment_vessels(volume, mask)
    except DegenerateSegmentationError as e:
        logger.warning("%s: %s", flag, e)
        flags.append(flag)
        return BinaryMask3.empty(volume.dims)


def evaluate_pair(original: Volume, reconstruction: Volume, volume_id: str = "",
                  cfg: SsimConfig = SsimConfig(), slice_axis: int = 2) -> MetricsRow:
    """
    All four metrics for one original/reconstruction pair

    Args:
        original: Original volume (any intensity units)
        reconstruction: Reconstruction in the same units
        volume_id: Row id
        cfg: SSIM window and constants
        slice_axis: Slice axis for mean SSIM

    Returns:
        MetricsRow; flags name infinite PSNR, empty-vs-empty DSI and
        degenerate segmentations
    """
    if original.dims != reconstruction.dims:
        raise ShapeMismatchError("original and reconstruction dims differ",
                                 original=original.dims, reconstruction=reconstruction.dims)
    norm_orig, record = normalize(original)
    norm_recon = apply_normalization(reconstruction, record)
    brain = brain_mask(norm_orig)

    flags: List[str] = []
    mse_value = mse(norm_orig, norm_recon, brain)
    psnr_value = psnr(mse_value)
    if math.isinf(psnr_value):
        flags.append("psnr_infinite")
    seg_orig = _segment_or_empty(norm_orig, brain, "segmentation_degenerate_original", flags)
    seg_recon = _segment_or_empty(norm_recon, brain, "segmentation_degenerate_reconstruction", flags)
    if seg_orig.count + seg_recon.count == 0:
        flags.append("dsi_both_empty")

    row = MetricsRow(
        id=volume_id,
        mse=mse_value,
        mean_ssim=mean_ssim_volume(norm_orig, norm_recon, cfg, slice_axis),
        psnr_db=psnr_value,
        dsi=dsi(seg_orig, seg_recon),
        flags=flags,
    )
    logger.info("%s: mse %.5g, mean SSIM %.4f, PSNR %.2f dB, DSI %.3f",
                volume_id or "pair", row.mse, row.mean_ssim, row.psnr_db, row.dsi)
    return row


@dataclass
class MetricsReport:
    rows: List[MetricsRow]
    aggregate: Dict[str, Dict[str, Optional[float]]]
    infinite_psnr_rows: int
    conventions: Dict[str, str] = field(default_factory=lambda: dict(REPORT_CONVENTIONS))

    def to_frame(self) -> pd.DataFrame:
        records = [{**asdict(r), "flags": ";".join(r.flags)} for r in self.rows]
        return pd.DataFrame(records, columns=["id", *METRICS, "flags"])

    def to_dict(self) -> Dict[str, Any]:
        rows = []
        for r in self.rows:
            row = asdict(r)
            if math.isinf(row["psnr_db"]):
                row["psnr_db"] = None
            rows.append(row)
        return {
            "conventions": self.conventions,
            "aggregate": self.aggregate,
            "infinite_psnr_rows": self.infinite_psnr_rows,
            "rows": rows,
        }

    def write_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False)

    def write_json(self, path: Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def mean(self, metric: str) -> Optional[float]:
        return self.aggregate[metric]["mean"]


def build_report(rows: List[MetricsRow]) -> MetricsReport:
    """
    Aggregate mean and population standard deviation per metric

    Rows with infinite PSNR are left out of the PSNR aggregate and counted.
    """
    aggregate: Dict[str, Dict[str, Optional[float]]] = {}
    for metric in METRICS:
        values = np.array([getattr(r, metric) for r in rows], dtype=np.float64)
        values = values[np.isfinite(values)]
        if values.size:
            aggregate[metric] = {"mean": float(values.mean()), "std": float(values.std(ddof=0)),
                                 "n": int(values.size)}
        else:
            aggregate[metric] = {"mean": None, "std": None, "n": 0}
    infinite = sum(1 for r in rows if math.isinf(r.psnr_db))
    return MetricsReport(rows=list(rows), aggregate=aggregate, infinite_psnr_rows=infinite)
