"""
Training objectives

Voxelwise L2, differentiable SSIM with a Gaussian 11x11 window, the closed-form
KL divergence to N(0, I) and their combination. All functions build on
tensor_engine ops, so they differentiate under a GradTape and run plainly
without one.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np

from mra_errors import ConfigError, ShapeMismatchError
from tensor_engine import (
    Tensor,
    add,
    clamp,
    div,
    exp,
    fixed_window_mean,
    mul,
    reduce_mean,
    reduce_sum,
    square,
    sub,
)
from vae_model import LatentStats

logger = logging.getLogger(__name__)


class LossMode(str, Enum):
    L2 = "l2"
    SSIM = "ssim"

    @classmethod
    def parse(cls, value) -> "LossMode":
        if isinstance(value, LossMode):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown loss mode {value!r}; expected 'l2' or 'ssim'")


@dataclass(frozen=True)
class SsimConfig:
    """SSIM window and stabilizing constants"""
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def window(self) -> np.ndarray:
        """Normalized 2D Gaussian weights, float64"""
        offsets = np.arange(self.window_size, dtype=np.float64) - (self.window_size - 1) / 2.0
        g = np.exp(-(offsets ** 2) / (2.0 * self.sigma ** 2))
        w = np.outer(g, g)
        return w / w.sum()


@dataclass
class LossConfig:
    mode: LossMode = LossMode.L2
    ssim_weight: float = 1000.0
    kl_weight: float = 1.0
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        self.mode = LossMode.parse(self.mode)
        if not self.ssim_weight > 0:
            raise ConfigError("ssim_weight must be positive", ssim_weight=self.ssim_weight)
        if not self.kl_weight >= 0:
            raise ConfigError("kl_weight must be nonnegative", kl_weight=self.kl_weight)


@dataclass
class LossComponents:
    """Per-term values of one total_loss evaluation"""
    mode: str
    reconstruction: float
    kl: float
    kl_weight: float
    total: float

    @property
    def weighted_kl(self) -> float:
        return self.kl_weight * self.kl


def _require_same_shape(name: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"{name}: input shapes differ", left=x.shape, right=y.shape)


def l2_loss(x: Tensor, y: Tensor) -> Tensor:
    """Per-patch sum of squared differences, averaged over the batch"""
    _require_same_shape("l2_loss", x, y)
    n = x.shape[0]
    return mul(reduce_sum(square(sub(x, y))), 1.0 / n)


def ssim_map(x: Tensor, y: Tensor, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """
    Local SSIM over every valid window position

    Args:
        x, y: N x C x H x W tensors with H, W >= window_size
        cfg: Window and constants

    Returns:
        N x C x (H - window_size + 1) x (W - window_size + 1) map
    """
    _require_same_shape("ssim_map", x, y)
    if x.ndim != 4 or min(x.shape[2:]) < cfg.window_size:
        raise ShapeMismatchError("ssim_map input smaller than the window",
                                 shape=x.shape, window=cfg.window_size)
    window = cfg.window()
    mu_x = fixed_window_mean(x, window)
    mu_y = fixed_window_mean(y, window)
    mu_xx = square(mu_x)
    mu_yy = square(mu_y)
    mu_xy = mul(mu_x, mu_y)

    # variances floored at 0; the covariance keeps its sign
    var_x = clamp(sub(fixed_window_mean(square(x), window), mu_xx), low=0.0)
    var_y = clamp(sub(fixed_window_mean(square(y), window), mu_yy), low=0.0)
    cov = sub(fixed_window_mean(mul(x, y), window), mu_xy)

    numerator = mul(add(mul(mu_xy, 2.0), cfg.c1), add(mul(cov, 2.0), cfg.c2))
    denominator = mul(add(add(mu_xx, mu_yy), cfg.c1), add(add(var_x, var_y), cfg.c2))
    return div(numerator, denominator)


def ssim_loss(x: Tensor, y: Tensor, cfg: SsimConfig = SsimConfig(), weight: float = 1000.0) -> Tensor:
    """weight * (1 - mean SSIM)"""
    return mul(sub(1.0, reduce_mean(ssim_map(x, y, cfg))), weight)


def kl_loss(stats: LatentStats) -> Tensor:
    """0.5 * sum(mu^2 + e^logvar - 1 - logvar), averaged over the batch"""
    mu, logvar = stats.mu, stats.logvar
    _require_same_shape("kl_loss", mu, logvar)
    terms = sub(sub(add(square(mu), exp(logvar)), 1.0), logvar)
    return mul(reduce_sum(terms), 0.5 / mu.shape[0])


def total_loss(x: Tensor, recon: Tensor, stats: LatentStats, cfg: LossConfig
               ) -> Tuple[Tensor, LossComponents]:
    """
    Reconstruction term for the configured mode plus kl_weight * KL

    Returns:
        (scalar loss tensor, LossComponents for logging)
    """
    if cfg.mode is LossMode.SSIM:
        rec = ssim_loss(recon, x, cfg.ssim, cfg.ssim_weight)
    else:
        rec = l2_loss(recon, x)
    kl = kl_loss(stats)
    total = add(rec, mul(kl, cfg.kl_weight))
    components = LossComponents(
        mode=cfg.mode.value,
        reconstruction=rec.item(),
        kl=kl.item(),
        kl_weight=cfg.kl_weight,
        total=total.item(),
    )
    return total, components


def slice_ssim_maps(x: np.ndarray, y: np.ndarray, cfg: SsimConfig = SsimConfig(), slice_axis: int = 2,
                    chunk: int = 16) -> np.ndarray:
    """
    Valid-region SSIM maps of every 2D slice of two 3D arrays, in double precision

    Returns:
        (slices, rows - window_size + 1, cols - window_size + 1) array
    """
    if x.shape != y.shape or x.ndim != 3:
        raise ShapeMismatchError("slice_ssim_maps needs two 3D arrays of equal shape",
                                 left=x.shape, right=y.shape)
    xs = np.moveaxis(np.asarray(x, dtype=np.float64), slice_axis, 0)
    ys = np.moveaxis(np.asarray(y, dtype=np.float64), slice_axis, 0)
    maps = []
    for start in range(0, xs.shape[0], chunk):
        xb = Tensor(np.ascontiguousarray(xs[start:start + chunk, None]))
        yb = Tensor(np.ascontiguousarray(ys[start:start + chunk, None]))
        maps.append(ssim_map(xb, yb, cfg).data[:, 0])
    return np.concatenate(maps, axis=0)
