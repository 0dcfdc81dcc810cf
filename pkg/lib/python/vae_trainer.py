"""
VAE Trainer

Patch-based training with Adam, validation-loss early stopping and a per-epoch
log. Parameters are treated as immutable values: every optimizer step returns
a new VaeParams.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mra_errors import (
    ConfigError,
    NonFiniteError,
    NonFiniteGradientError,
    PatchSamplingError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from run_config import __version__, check_keys, load_json_object
from tensor_engine import GradTape, Tensor
from vae_model import CheckpointMetadata, VaeArchitecture, VaeParams, forward
from vae_objectives import LossConfig, LossMode, total_loss
from volume_preprocessor import NORMALIZATION_CONVENTION

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATES = {LossMode.L2: 0.01, LossMode.SSIM: 0.001}

INT_FIELDS = ("batch_size", "max_epochs", "patience", "seed", "patches_per_volume", "slice_axis")
FLOAT_FIELDS = ("min_delta", "validation_fraction", "kl_weight", "ssim_weight", "bias_sigma")


def _is_int(value: Any) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, (bool, np.bool_))


def _is_number(value: Any) -> bool:
    return _is_int(value) or isinstance(value, (float, np.floating))


@dataclass
class TrainConfig:
    """Training hyperparameters; JSON keys mirror the field names"""
    loss_mode: str = "l2"
    learning_rate: Optional[float] = None  # None -> default for the loss mode
    batch_size: int = 100
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-3
    seed: int = 0
    patches_per_volume: int = 1000
    validation_fraction: float = 0.2
    kl_weight: float = 1.0
    ssim_weight: float = 1000.0
    slice_axis: int = 2
    flatten_bias: bool = False
    bias_sigma: float = 8.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        check_keys(cls, data, "train config")
        config = cls(**data)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Path) -> "TrainConfig":
        """Load configuration from JSON file"""
        return cls.from_dict(load_json_object(path))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        """Apply non-None overrides (command-line flags win over the file)"""
        check_keys(TrainConfig, overrides, "train config")
        config = replace(self, **{k: v for k, v in overrides.items() if v is not None})
        config.validate()
        return config

    @property
    def mode(self) -> LossMode:
        return LossMode.parse(self.loss_mode)

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is None:
            return DEFAULT_LEARNING_RATES[self.mode]
        return float(self.learning_rate)

    def loss_config(self) -> LossConfig:
        return LossConfig(mode=self.mode, ssim_weight=self.ssim_weight, kl_weight=self.kl_weight)

    def check_types(self) -> None:
        """JSON values of the wrong type fail here rather than in a comparison"""
        for name in INT_FIELDS:
            value = getattr(self, name)
            if not _is_int(value):
                raise ConfigError(f"{name} must be an integer", **{name: value})
        for name in FLOAT_FIELDS:
            value = getattr(self, name)
            if not _is_number(value):
                raise ConfigError(f"{name} must be a number", **{name: value})
        if self.learning_rate is not None and not _is_number(self.learning_rate):
            raise ConfigError("learning_rate must be a number or null", learning_rate=self.learning_rate)
        if not isinstance(self.flatten_bias, (bool, np.bool_)):
            raise ConfigError("flatten_bias must be true or false", flatten_bias=self.flatten_bias)
        if not isinstance(self.loss_mode, (str, LossMode)):
            raise ConfigError("loss_mode must be a string", loss_mode=self.loss_mode)

    def validate(self) -> None:
        self.check_types()
        self.loss_mode = self.mode.value
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative", seed=self.seed)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1", batch_size=self.batch_size)
        if self.patience < 1:
            raise ConfigError("patience must be at least 1", patience=self.patience)
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1", max_epochs=self.max_epochs)
        if not 0 < self.min_delta < 1:
            raise ConfigError("min_delta must lie in (0, 1)", min_delta=self.min_delta)
        if self.learning_rate is not None and not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be nonnegative", learning_rate=self.learning_rate)
        if self.patches_per_volume < 1:
            raise ConfigError("patches_per_volume must be at least 1", patches_per_volume=self.patches_per_volume)
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)",
                              validation_fraction=self.validation_fraction)
        if self.slice_axis not in (0, 1, 2):
            raise ConfigError("slice_axis must be 0, 1 or 2", slice_axis=self.slice_axis)
        if self.flatten_bias and not self.bias_sigma > 0:
            raise ConfigError("bias_sigma must be positive", bias_sigma=self.bias_sigma)
        self.loss_config()


@dataclass
class OptimizerState:
    """Adam moments and step counter"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: VaeParams) -> "OptimizerState":
        arrays = params.arrays()
        return cls(m={n: np.zeros_like(a) for n, a in arrays.items()},
                   v={n: np.zeros_like(a) for n, a in arrays.items()})


def adam_step(params: VaeParams, grads: Dict[str, np.ndarray], state: OptimizerState,
              lr: float) -> Tuple[VaeParams, OptimizerState]:
    """
    One bias-corrected Adam update

    Args:
        params: Current parameters
        grads: Gradient per parameter name; missing names count as zero
        state: Moments from the previous step
        lr: Learning rate

    Returns:
        (new params, new state)
    """
    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    new_arrays, new_m, new_v = {}, {}, {}
    for name, value in params.arrays().items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise ShapeMismatchError("gradient shape differs from parameter", parameter=name,
                                     expected=value.shape, got=grad.shape)
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name}", layer=name.split(".")[0])
        m = state.beta1 * state.m[name] + (1 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1 - state.beta2) * grad * grad
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays[name] = (value - update).astype(value.dtype)
        new_m[name], new_v[name] = m.astype(value.dtype), v.astype(value.dtype)
    new_state = replace(state, m=new_m, v=new_v, step=step)
    return VaeParams.from_arrays(params.arch, new_arrays), new_state


@dataclass
class LossSummary:
    total: float
    reconstruction: float
    kl: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_reconstruction: float
    train_kl: float
    val_loss: float
    val_reconstruction: float
    val_kl: float
    improved: bool
    seconds: float


@dataclass
class TrainLog:
    """One record per completed epoch"""
    loss_mode: str
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def best(self) -> Optional[EpochRecord]:
        if not self.records:
            return None
        return min(self.records, key=lambda r: r.val_loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records],
                            columns=[f.name for f in fields(EpochRecord)])

    def write_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False)


def gradient_step(params: VaeParams, batch: np.ndarray, loss_cfg: LossConfig,
                  rng: np.random.Generator) -> Tuple[Dict[str, np.ndarray], LossSummary]:
    """Loss and parameter gradients for one batch"""
    leaves = params.as_leaves()
    x = Tensor(batch)
    with GradTape() as tape:
        recon, stats = forward(leaves, x, rng=rng)
        loss, components = total_loss(x, recon, stats, loss_cfg)
    grads = tape.backward(loss)
    named = {}
    for name, tensor in leaves.tensors.items():
        grad = grads.get(id(tensor))
        named[name] = grad if grad is not None else np.zeros_like(tensor.data)
    return named, LossSummary(components.total, components.reconstruction, components.kl)


def evaluate_loss(params: VaeParams, patches: np.ndarray, loss_cfg: LossConfig, batch_size: int,
                  seed: int) -> LossSummary:
    """Size-weighted mean loss over all batches (partial last batch included)"""
    rng = np.random.default_rng(seed)
    totals = np.zeros(3)
    for start in range(0, len(patches), batch_size):
        batch = patches[start:start + batch_size]
        x = Tensor(batch)
        recon, stats = forward(params, x, rng=rng)
        _, components = total_loss(x, recon, stats, loss_cfg)
        totals += len(batch) * np.array([components.total, components.reconstruction, components.kl])
    total, reconstruction, kl = totals / len(patches)
    return LossSummary(float(total), float(reconstruction), float(kl))


def split_volumes(ids: Sequence[str], validation_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """
    Volume-level train/validation split, at least one volume on each side

    Returns:
        (train ids, validation ids), each in input order
    """
    ids = list(ids)
    if len(ids) < 2:
        raise ConfigError("need at least two volumes to split", volumes=len(ids))
    n_val = min(len(ids) - 1, max(1, int(np.floor(len(ids) * validation_fraction + 0.5))))
    picked = set(int(i) for i in np.random.default_rng(seed).permutation(len(ids))[:n_val])
    train = [v for i, v in enumerate(ids) if i not in picked]
    val = [v for i, v in enumerate(ids) if i in picked]
    return train, val


def validation_seed(root: np.random.SeedSequence, epoch: int) -> int:
    """Noise seed for the validation pass of one epoch; depends only on the root and the epoch index"""
    child = np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (epoch,))
    return int(child.generate_state(1)[0])


def train(
    train_patches: np.ndarray,
    val_patches: np.ndarray,
    arch: VaeArchitecture,
    cfg: TrainConfig,
    initial_params: Optional[VaeParams] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[VaeParams, TrainLog]:
    """
    Train until validation loss stops improving

    An epoch improves when val_loss < best * (1 - min_delta). Training stops
    after `patience` consecutive non-improving epochs or at max_epochs.

    Args:
        train_patches: (n, 1, 32, 32) float32 patches
        val_patches: Validation patches, same layout
        arch: Model architecture
        cfg: Training configuration
        initial_params: Start point; Glorot init from cfg.seed otherwise
        on_epoch: Called with each EpochRecord (progress display)

    Returns:
        (parameters of the best validation epoch, TrainLog)
    """
    cfg.validate()
    if len(train_patches) < cfg.batch_size:
        raise PatchSamplingError("fewer training patches than one batch",
                                 patches=len(train_patches), batch_size=cfg.batch_size)
    if len(val_patches) < 1:
        raise PatchSamplingError("validation set is empty")

    loss_cfg = cfg.loss_config()
    lr = cfg.resolved_learning_rate()
    shuffle_seq, noise_seq, val_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)

    params = initial_params or VaeParams.initialize(arch, cfg.seed)
    state = OptimizerState.init(params)
    log = TrainLog(loss_mode=loss_cfg.mode.value)
    best_params, best_val = params, None
    reference, stale = None, 0
    n_batches = len(train_patches) // cfg.batch_size

    logger.info("Training %s: %d train / %d val patches, batch %d, lr %g",
                loss_cfg.mode.value, len(train_patches), len(val_patches), cfg.batch_size, lr)
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(train_patches))
        sums = np.zeros(3)
        for b in range(n_batches):
            batch = train_patches[order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            try:
                grads, summary = gradient_step(params, batch, loss_cfg, noise_rng)
                params, state = adam_step(params, grads, state, lr)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"training diverged: {e.message}", best_params=best_params,
                                            epoch=epoch, batch=b + 1, best_val_loss=best_val,
                                            **e.details) from e
            sums += [summary.total, summary.reconstruction, summary.kl]
        train_mean = sums / n_batches

        val = evaluate_loss(params, val_patches, loss_cfg, cfg.batch_size, validation_seed(val_seq, epoch))
        if not np.isfinite(val.total):
            raise TrainingDivergedError("validation loss is not finite", best_params=best_params,
                                        epoch=epoch, best_val_loss=best_val)
        improved = reference is None or val.total < reference * (1 - cfg.min_delta)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(train_mean[0]),
            train_reconstruction=float(train_mean[1]),
            train_kl=float(train_mean[2]),
            val_loss=val.total,
            val_reconstruction=val.reconstruction,
            val_kl=val.kl,
            improved=improved,
            seconds=time.perf_counter() - started,
        )
        log.records.append(record)
        logger.info("epoch %d: train %.5g val %.5g (recon %.5g, kl %.5g)%s", epoch, record.train_loss,
                    val.total, val.reconstruction, val.kl, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(record)

        if best_val is None or val.total < best_val:
            best_val, best_params = val.total, params
        if improved:
            reference, stale = val.total, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("Stopping after %d epochs without improvement", stale)
                break
    return best_params, log


def checkpoint_metadata(arch: VaeArchitecture, cfg: TrainConfig) -> CheckpointMetadata:
    """Metadata stored with a checkpoint trained under cfg"""
    return CheckpointMetadata(
        architecture=arch.descriptor(),
        loss_mode=cfg.mode.value,
        normalization=NORMALIZATION_CONVENTION,
        extra={
            "seed": str(cfg.seed),
            "slice_axis": str(cfg.slice_axis),
            "bias_sigma": str(cfg.bias_sigma if cfg.flatten_bias else 0),
            "tool_version": __version__,
        },
    )
