"""
Reconstruction Study

End-to-end experiment on phantoms: train one network per loss mode on a
healthy cohort, test on a held-out healthy cohort and on a paired aneurysm
cohort (same seeds, aneurysm added), and tabulate DSI, MSE, mean SSIM and
PSNR as "mean (std)" per network.

Cohort seeds: training base_seed, validation base_seed + 1000, both test
cohorts base_seed + 2000.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from metrics_evaluator import MetricsReport, build_report, evaluate_pair
from nifti_io import Volume
from run_config import check_keys, load_json_object
from vae_model import VaeArchitecture, VaeParams, save_checkpoint
from vae_objectives import LossMode
from vae_trainer import TrainConfig, TrainLog, checkpoint_metadata, train
from vessel_phantom import CohortMember, PhantomSpec, generate_cohort
from volume_preprocessor import PatchConfig, brain_mask, flatten_bias, normalize, sample_patches
from volume_reconstructor import anomaly_map, reconstruct_and_rescale

logger = logging.getLogger(__name__)

VALIDATION_SEED_OFFSET = 1000
TEST_SEED_OFFSET = 2000

TABLE_COLUMNS = {
    "DSI": ("dsi", "{:.3f}"),
    "MSE": ("mse", "{:.2e}"),
    "Mean SSIM": ("mean_ssim", "{:.3f}"),
    "PSNR": ("psnr_db", "{:.1f}"),
}


@dataclass
class StudyConfig:
    n_train_volumes: int = 8
    n_validation_volumes: int = 2
    n_test_volumes: int = 10
    patches_per_volume: int = 250
    max_epochs: int = 20
    base_seed: int = 0
    anomaly_threshold: float = 0.6
    train_overrides: Dict[str, Any] = field(default_factory=dict)
    phantom: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StudyConfig":
        check_keys(cls, data, "study config")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Path) -> "StudyConfig":
        return cls.from_dict(load_json_object(path))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def train_config(self, mode: LossMode) -> TrainConfig:
        base = TrainConfig(loss_mode=mode.value, seed=self.base_seed, max_epochs=self.max_epochs,
                           patches_per_volume=self.patches_per_volume)
        return base.with_overrides(**self.train_overrides)

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec.from_dict(self.phantom)


@dataclass
class ModeResult:
    mode: str
    params: VaeParams
    log: TrainLog
    train_config: TrainConfig
    healthy: MetricsReport
    aneurysm: MetricsReport
    anomaly_hits: int
    anomaly_volumes: int


@dataclass
class StudyResult:
    modes: Dict[str, ModeResult]
    checks: Dict[str, bool]


def prepare_patches(volumes: Sequence[Volume], cfg: TrainConfig, seed_offset: int = 0) -> np.ndarray:
    """
    normalize -> brain_mask -> (flatten_bias) -> sample_patches per volume

    Volume i is sampled with seed cfg.seed + seed_offset + i.
    """
    batches = []
    for i, volume in enumerate(volumes):
        source = flatten_bias(volume, cfg.bias_sigma) if cfg.flatten_bias else volume
        normalized, _ = normalize(source)
        mask = brain_mask(normalized)
        patch_cfg = PatchConfig(patches_per_volume=cfg.patches_per_volume, seed=cfg.seed + seed_offset + i)
        batches.append(sample_patches(normalized, mask, patch_cfg, cfg.slice_axis).patches)
    return np.concatenate(batches, axis=0)


def _bias_sigma(cfg: TrainConfig) -> Optional[float]:
    return cfg.bias_sigma if cfg.flatten_bias else None


def evaluate_cohort(params: VaeParams, cohort: Sequence[CohortMember], cfg: TrainConfig,
                    threshold: Optional[float] = None) -> Tuple[MetricsReport, int]:
    """
    Metrics for every member and, when threshold is given, the number of
    members whose anomaly mask touches their true aneurysm
    """
    rows, hits = [], 0
    for member in cohort:
        result = reconstruct_and_rescale(params, member.volume, cfg.slice_axis, _bias_sigma(cfg))
        rows.append(evaluate_pair(member.volume, result.reconstruction, member.id, slice_axis=cfg.slice_axis))
        if threshold is not None and member.has_aneurysm:
            found = anomaly_map(result.original_normalized, result.reconstruction_normalized,
                                threshold=threshold, slice_axis=cfg.slice_axis)
            if np.any(found.mask.voxels & member.aneurysm_mask.voxels):
                hits += 1
    return build_report(rows), hits


def run_study(cfg: StudyConfig) -> StudyResult:
    spec = cfg.phantom_spec()
    arch = VaeArchitecture.default()
    base = cfg.base_seed
    train_cohort = generate_cohort(cfg.n_train_volumes, 0.0, base, spec)
    val_cohort = generate_cohort(cfg.n_validation_volumes, 0.0, base + VALIDATION_SEED_OFFSET, spec)
    healthy = generate_cohort(cfg.n_test_volumes, 0.0, base + TEST_SEED_OFFSET, spec)
    aneurysm = generate_cohort(cfg.n_test_volumes, 1.0, base + TEST_SEED_OFFSET, spec)

    modes: Dict[str, ModeResult] = {}
    for mode in (LossMode.L2, LossMode.SSIM):
        tcfg = cfg.train_config(mode)
        train_patches = prepare_patches([m.volume for m in train_cohort], tcfg)
        val_patches = prepare_patches([m.volume for m in val_cohort], tcfg, VALIDATION_SEED_OFFSET)
        params, log = train(train_patches, val_patches, arch, tcfg)
        healthy_report, _ = evaluate_cohort(params, healthy, tcfg)
        aneurysm_report, hits = evaluate_cohort(params, aneurysm, tcfg, cfg.anomaly_threshold)
        modes[mode.value] = ModeResult(mode.value, params, log, tcfg, healthy_report, aneurysm_report,
                                       hits, len(aneurysm))
        logger.info("%s: healthy mean SSIM %.4f, aneurysm mean SSIM %.4f, anomaly hits %d/%d", mode.value,
                    healthy_report.mean("mean_ssim"), aneurysm_report.mean("mean_ssim"), hits, len(aneurysm))

    checks = {}
    for name, res in modes.items():
        checks[f"{name}_aneurysm_ssim_lower"] = res.aneurysm.mean("mean_ssim") < res.healthy.mean("mean_ssim")
    l2, ssim = modes["l2"].healthy, modes["ssim"].healthy
    checks["l2_lower_mse"] = l2.mean("mse") < ssim.mean("mse")
    checks["l2_higher_psnr"] = (l2.mean("psnr_db") or 0.0) > (ssim.mean("psnr_db") or 0.0)
    for name, ok in checks.items():
        if not ok:
            logger.warning("Expected-direction check not met: %s", name)
    return StudyResult(modes=modes, checks=checks)


def summary_tables(result: StudyResult) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """(healthy, aneurysm) tables; rows are networks, cells are "mean (std)" """
    def table(cohort: str) -> pd.DataFrame:
        rows = {}
        for name, res in result.modes.items():
            report: MetricsReport = getattr(res, cohort)
            cells = {}
            for column, (metric, fmt) in TABLE_COLUMNS.items():
                agg = report.aggregate[metric]
                cells[column] = "n/a" if agg["mean"] is None else \
                    f"{fmt.format(agg['mean'])} ({fmt.format(agg['std'])})"
            rows[name.upper()] = cells
        frame = pd.DataFrame.from_dict(rows, orient="index", columns=list(TABLE_COLUMNS))
        frame.index.name = "network"
        return frame

    return table("healthy"), table("aneurysm")


def write_study(result: StudyResult, out_dir: Path) -> List[Path]:
    """Tables, reports, train logs and checkpoints; returns the written paths"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    healthy_table, aneurysm_table = summary_tables(result)
    for name, frame in (("table_healthy.csv", healthy_table), ("table_aneurysm.csv", aneurysm_table)):
        frame.to_csv(out_dir / name)
        written.append(out_dir / name)
    for name, res in result.modes.items():
        for cohort in ("healthy", "aneurysm"):
            report: MetricsReport = getattr(res, cohort)
            report.write_csv(out_dir / f"report_{name}_{cohort}.csv")
            report.write_json(out_dir / f"report_{name}_{cohort}.json")
            written += [out_dir / f"report_{name}_{cohort}.csv", out_dir / f"report_{name}_{cohort}.json"]
        res.log.write_csv(out_dir / f"train_log_{name}.csv")
        save_checkpoint(res.params, checkpoint_metadata(res.params.arch, res.train_config),
                        out_dir / f"model_{name}.avae")
        written += [out_dir / f"train_log_{name}.csv", out_dir / f"model_{name}.avae"]
    return written
