"""
Volume Reconstructor

Whole-volume reconstruction by running the trained VAE slice by slice,
rescaling back to the original intensity units, and SSIM-map anomaly
detection between a volume and its reconstruction.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from mra_errors import NormalizationMismatchError, ShapeMismatchError
from nifti_io import BinaryMask3, Volume
from tensor_engine import Tensor
from vae_model import CheckpointMetadata, VaeParams, forward
from vae_objectives import SsimConfig, slice_ssim_maps
from volume_preprocessor import (
    NORMALIZATION_CONVENTION,
    NormalizationRecord,
    brain_mask,
    denormalize,
    flatten_bias,
    normalize,
)

logger = logging.getLogger(__name__)

DEFAULT_ANOMALY_THRESHOLD = 0.6
MIN_SLICE = 32
SIZE_STEP = 8


@dataclass
class ReconstructionResult:
    reconstruction: Volume
    original_normalized: Volume
    reconstruction_normalized: Volume
    record: NormalizationRecord


@dataclass
class AnomalyResult:
    """Per-voxel local SSIM and the thresholded in-brain anomaly mask"""
    ssim_map: np.ndarray
    mask: BinaryMask3
    threshold: float


def padded_size(n: int) -> int:
    """Next multiple of 8, never below 32"""
    return max(MIN_SLICE, -(-n // SIZE_STEP) * SIZE_STEP)


def check_normalization(metadata: CheckpointMetadata) -> None:
    """Refuse checkpoints trained under another intensity convention"""
    if metadata.normalization != NORMALIZATION_CONVENTION:
        raise NormalizationMismatchError("checkpoint was trained with a different normalization",
                                         checkpoint=metadata.normalization, expected=NORMALIZATION_CONVENTION)


def reconstruct_volume(params: VaeParams, volume: Volume, slice_axis: int = 2, batch_size: int = 16) -> Volume:
    """
    Reconstruct a normalized volume slice by slice

    Each slice is zero-padded symmetrically, passed through the model with
    deterministic latents, and cropped back. Output dims equal input dims.
    """
    slices = np.moveaxis(volume.data, slice_axis, 0)
    n, rows, cols = slices.shape
    prow, pcol = padded_size(rows), padded_size(cols)
    top, left = (prow - rows) // 2, (pcol - cols) // 2
    dtype = params.tensors[next(iter(params.tensors))].dtype

    padded = np.zeros((n, 1, prow, pcol), dtype=dtype)
    padded[:, 0, top:top + rows, left:left + cols] = slices
    out = np.empty((n, rows, cols), dtype=np.float32)
    for start in range(0, n, batch_size):
        recon, _ = forward(params, Tensor(padded[start:start + batch_size]), deterministic=True)
        out[start:start + batch_size] = recon.data[:, 0, top:top + rows, left:left + cols]
    logger.debug("reconstructed %d slices of %dx%d (padded %dx%d)", n, rows, cols, prow, pcol)
    return volume.with_data(np.moveaxis(out, 0, slice_axis))


def reconstruct_and_rescale(params: VaeParams, original: Volume, slice_axis: int = 2,
                            bias_sigma: Optional[float] = None) -> ReconstructionResult:
    """
    normalize -> reconstruct_volume -> denormalize with the same record

    Args:
        params: Trained parameters
        original: Volume in scanner units
        slice_axis: Slice axis used for inference
        bias_sigma: Flatten the bias field first (when training did)
    """
    source = flatten_bias(original, bias_sigma) if bias_sigma else original
    normalized, record = normalize(source)
    recon_normalized = reconstruct_volume(params, normalized, slice_axis)
    return ReconstructionResult(
        reconstruction=denormalize(recon_normalized, record),
        original_normalized=normalized,
        reconstruction_normalized=recon_normalized,
        record=record,
    )


def embed_valid_map(maps: np.ndarray, shape: Tuple[int, int, int], window_size: int,
                    slice_axis: int) -> np.ndarray:
    """Place valid-window SSIM values at window centers; everything else is 1"""
    moved = (shape[slice_axis],) + tuple(d for i, d in enumerate(shape) if i != slice_axis)
    full = np.ones(moved, dtype=np.float32)
    offset = window_size // 2
    _, h, w = maps.shape
    full[:, offset:offset + h, offset:offset + w] = np.clip(maps, -1.0, 1.0)
    return np.moveaxis(full, 0, slice_axis)


def anomaly_map(original: Volume, reconstruction: Volume, cfg: SsimConfig = SsimConfig(),
                threshold: float = DEFAULT_ANOMALY_THRESHOLD, mask: Optional[BinaryMask3] = None,
                slice_axis: int = 2) -> AnomalyResult:
    """
    Local SSIM between two normalized volumes, thresholded inside the brain

    Args:
        original: Normalized original
        reconstruction: Normalized reconstruction
        cfg: SSIM window and constants
        threshold: Voxels with SSIM below this are anomalous
        mask: Brain mask; computed from the original when omitted
        slice_axis: Axis of the 2D slices

    Returns:
        AnomalyResult with mask = (map < threshold) & brain
    """
    if original.dims != reconstruction.dims:
        raise ShapeMismatchError("original and reconstruction dims differ",
                                 original=original.dims, reconstruction=reconstruction.dims)
    brain = mask if mask is not None else brain_mask(original)
    if brain.dims != original.dims:
        raise ShapeMismatchError("brain mask dims differ from the volume", mask=brain.dims, volume=original.dims)
    maps = slice_ssim_maps(original.data, reconstruction.data, cfg, slice_axis)
    full = embed_valid_map(maps, original.dims, cfg.window_size, slice_axis)
    anomalies = BinaryMask3((full < threshold) & brain.voxels)
    logger.debug("anomaly_map: threshold %.3f, %d anomalous voxels", threshold, anomalies.count)
    return AnomalyResult(ssim_map=full, mask=anomalies, threshold=float(threshold))
