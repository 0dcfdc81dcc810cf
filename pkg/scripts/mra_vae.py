#!/usr/bin/env python3
"""
MRA VAE command line

Generate vessel phantoms, train the patch VAE with an L2 or SSIM loss,
reconstruct volumes slice by slice, evaluate reconstructions, compute SSIM
anomaly maps, run the gradient checks and the end-to-end phantom study.
Every command writes a run manifest next to its outputs; `replay` re-runs one.

Usage:
    python scripts/mra_vae.py <command> [options]

Exit codes:
    0 success, 1 usage error, 2 data error, 3 numeric failure
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

# Add lib/python to path
sys.path.insert(0, str(Path(__file__).parent.parent / "lib" / "python"))

import pandas as pd
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

import gradcheck_suite
from metrics_evaluator import build_report, evaluate_pair
from mra_errors import EXIT_OK, EXIT_USAGE, ConfigError, MraVaeError, PairingError, TrainingDivergedError
from mra_logging import configure_logging
from nifti_io import read_mask, read_nifti, volume_id, write_mask, write_nifti
from reconstruction_study import (
    VALIDATION_SEED_OFFSET,
    StudyConfig,
    prepare_patches,
    run_study,
    summary_tables,
    write_study,
)
from run_config import RunManifest, manifest_path_for
from vae_model import VaeArchitecture, load_checkpoint, save_checkpoint
from vae_objectives import LossMode
from vae_trainer import EpochRecord, TrainConfig, checkpoint_metadata, split_volumes, train
from vessel_phantom import PhantomSpec, generate_cohort, write_cohort
from volume_preprocessor import apply_normalization, normalize
from volume_reconstructor import (
    DEFAULT_ANOMALY_THRESHOLD,
    anomaly_map,
    check_normalization,
    reconstruct_and_rescale,
)

logger = logging.getLogger("mra_vae")
console = Console()

NIFTI_SUFFIXES = (".nii", ".nii.gz")


def _is_gzip_path(path: Path) -> bool:
    return path.name.endswith(".gz")


def _nifti_files(directory: Path) -> Dict[str, Path]:
    """Map volume id -> file for every NIfTI file directly inside directory"""
    if not directory.is_dir():
        raise PairingError("not a directory", path=str(directory))
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.name.endswith(NIFTI_SUFFIXES))
    return {volume_id(p): p for p in files}


def pair_by_id(orig_dir: Path, recon_dir: Path) -> List[Tuple[str, Path, Path]]:
    """
    Pair originals and reconstructions by file stem

    Raises:
        PairingError: an id appears on one side only, or nothing matched
    """
    originals, reconstructions = _nifti_files(orig_dir), _nifti_files(recon_dir)
    unmatched = sorted(set(originals) ^ set(reconstructions))
    if unmatched:
        raise PairingError("volumes without a counterpart", unmatched=unmatched)
    if not originals:
        raise PairingError("no NIfTI volumes found", orig=str(orig_dir), recon=str(recon_dir))
    return [(vid, originals[vid], reconstructions[vid]) for vid in sorted(originals)]


def _aggregate_table(title: str, aggregate: Dict[str, Dict[str, Optional[float]]]) -> Table:
    table = Table(title=title)
    table.add_column("metric")
    table.add_column("mean", justify="right")
    table.add_column("std", justify="right")
    table.add_column("n", justify="right")
    for metric, agg in aggregate.items():
        if agg["mean"] is None:
            table.add_row(metric, "n/a", "n/a", "0")
        else:
            table.add_row(metric, f"{agg['mean']:.5g}", f"{agg['std']:.5g}", str(agg["n"]))
    return table


def _frame_table(title: str, frame: pd.DataFrame) -> Table:
    table = Table(title=title)
    table.add_column(frame.index.name or "")
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for index, row in frame.iterrows():
        table.add_row(str(index), *[str(v) for v in row])
    return table


# Commands

def cmd_phantom(args: argparse.Namespace, manifest: RunManifest) -> int:
    spec = PhantomSpec.from_file(args.spec) if args.spec else PhantomSpec()
    cohort = generate_cohort(args.count, args.aneurysm_fraction, args.seed, spec)
    labels = write_cohort(cohort, args.out)
    manifest.config = {"count": args.count, "aneurysm_fraction": args.aneurysm_fraction, "phantom": spec.to_dict()}
    manifest.seeds = {"base_seed": args.seed}
    manifest.outputs = [str(args.out)]
    console.print(f"Wrote {len(labels)} phantoms ({int(labels['aneurysm'].sum())} with aneurysm) to {args.out}")
    return EXIT_OK


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """defaults < --config file < flags"""
    base = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    return base.with_overrides(
        loss_mode=args.loss,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        patches_per_volume=args.patches_per_volume,
        flatten_bias=True if args.flatten_bias else None,
    )


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> int:
    cfg = resolve_train_config(args)
    files = _nifti_files(args.data)
    train_ids, val_ids = split_volumes(list(files), cfg.validation_fraction, cfg.seed)
    logger.info("Training volumes: %s", ", ".join(train_ids))
    logger.info("Validation volumes: %s", ", ".join(val_ids))
    train_patches = prepare_patches([read_nifti(files[v]) for v in train_ids], cfg)
    val_patches = prepare_patches([read_nifti(files[v]) for v in val_ids], cfg, VALIDATION_SEED_OFFSET)

    arch = VaeArchitecture.default()
    with Progress(TextColumn("[bold]{task.description}"), BarColumn(), TextColumn("{task.fields[status]}"),
                  TimeElapsedColumn(), console=console) as progress:
        task = progress.add_task(f"train ({cfg.mode.value})", total=cfg.max_epochs, status="")

        def on_epoch(record: EpochRecord) -> None:
            progress.update(task, advance=1, status=f"epoch {record.epoch} val {record.val_loss:.5g}")

        try:
            params, log = train(train_patches, val_patches, arch, cfg, on_epoch=on_epoch)
        except TrainingDivergedError as e:
            if e.best_params is not None:
                args.out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(e.best_params, checkpoint_metadata(arch, cfg), args.out / "model.avae")
                logger.warning("Kept the last good parameters in %s", args.out / "model.avae")
            raise

    args.out.mkdir(parents=True, exist_ok=True)
    model_path, log_path = args.out / "model.avae", args.out / "train_log.csv"
    save_checkpoint(params, checkpoint_metadata(arch, cfg), model_path)
    log.write_csv(log_path)
    manifest.config = {**cfg.to_dict(), "resolved_learning_rate": cfg.resolved_learning_rate()}
    manifest.inputs = [str(files[v]) for v in train_ids + val_ids]
    manifest.outputs = [str(model_path), str(log_path)]
    manifest.seeds = {"seed": cfg.seed}
    best = log.best
    console.print(f"Best validation loss {best.val_loss:.6g} at epoch {best.epoch} of {len(log.records)}; "
                  f"checkpoint {model_path}")
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace, manifest: RunManifest) -> int:
    params, metadata = load_checkpoint(args.model)
    check_normalization(metadata)
    slice_axis = args.slice_axis if args.slice_axis is not None else int(metadata.extra.get("slice_axis", 2))
    bias_sigma = float(metadata.extra.get("bias_sigma", 0)) or None
    original = read_nifti(args.input)
    result = reconstruct_and_rescale(params, original, slice_axis, bias_sigma)
    write_nifti(result.reconstruction, args.out, gzip=_is_gzip_path(args.out))
    manifest.config = {"slice_axis": slice_axis, "bias_sigma": bias_sigma, "loss_mode": metadata.loss_mode,
                       "normalization": metadata.normalization}
    manifest.inputs = [str(args.model), str(args.input)]
    manifest.outputs = [str(args.out)]
    console.print(f"Reconstructed {volume_id(args.input)} {original.dims} -> {args.out}")
    return EXIT_OK


def _report_paths(out: Path) -> Tuple[Path, Path]:
    base = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    return base.with_name(base.name + ".csv"), base.with_name(base.name + ".json")


def cmd_evaluate(args: argparse.Namespace, manifest: RunManifest) -> int:
    pairs = pair_by_id(args.orig, args.recon)
    rows = [evaluate_pair(read_nifti(o), read_nifti(r), vid, slice_axis=args.slice_axis) for vid, o, r in pairs]
    report = build_report(rows)
    csv_path, json_path = _report_paths(args.out)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(csv_path)
    report.write_json(json_path)
    manifest.config = {"slice_axis": args.slice_axis}
    manifest.inputs = [str(p) for _, o, r in pairs for p in (o, r)]
    manifest.outputs = [str(csv_path), str(json_path)]
    console.print(_aggregate_table(f"{len(rows)} volume pairs", report.aggregate))
    if report.infinite_psnr_rows:
        console.print(f"{report.infinite_psnr_rows} row(s) with infinite PSNR left out of the PSNR aggregate")
    return EXIT_OK


def cmd_anomaly(args: argparse.Namespace, manifest: RunManifest) -> int:
    original, reconstruction = read_nifti(args.orig), read_nifti(args.recon)
    normalized, record = normalize(original)
    mask = read_mask(args.mask) if args.mask else None
    result = anomaly_map(normalized, apply_normalization(reconstruction, record), threshold=args.threshold,
                         mask=mask, slice_axis=args.slice_axis)
    args.out.mkdir(parents=True, exist_ok=True)
    map_path, mask_path = args.out / "ssim_map.nii.gz", args.out / "anomaly_mask.nii.gz"
    write_nifti(original.with_data(result.ssim_map), map_path, gzip=True)
    write_mask(result.mask, original, mask_path, gzip=True)
    manifest.config = {"threshold": result.threshold, "slice_axis": args.slice_axis,
                       "brain_mask": "file" if args.mask else "otsu"}
    manifest.inputs = [str(p) for p in (args.orig, args.recon, args.mask) if p]
    manifest.outputs = [str(map_path), str(mask_path)]
    console.print(f"{result.mask.count} anomalous voxels below SSIM {result.threshold:g} -> {mask_path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, manifest: RunManifest) -> int:
    outcomes = gradcheck_suite.run_suite(seeds=args.seeds)
    console.print(gradcheck_suite.outcome_table(outcomes))
    manifest.seeds = {f"seed_{i}": s for i, s in enumerate(args.seeds)}
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        report_path = args.out / "gradcheck.csv"
        pd.DataFrame([{"operation": o.name, "max_rel_error": o.max_rel_error, "tolerance": o.tolerance,
                       "passed": o.passed, "error": o.error or ""} for o in outcomes]).to_csv(report_path, index=False)
        manifest.outputs = [str(report_path)]
    gradcheck_suite.require_pass(outcomes)
    return EXIT_OK


def cmd_study(args: argparse.Namespace, manifest: RunManifest) -> int:
    cfg = StudyConfig.from_file(args.config) if args.config else StudyConfig()
    if args.seed is not None:
        cfg.base_seed = args.seed
    result = run_study(cfg)
    written = write_study(result, args.out)
    healthy, aneurysm = summary_tables(result)
    console.print(_frame_table("Healthy test cohort", healthy))
    console.print(_frame_table("Aneurysm test cohort", aneurysm))
    for name, res in result.modes.items():
        console.print(f"{name}: anomaly mask hits the aneurysm in {res.anomaly_hits}/{res.anomaly_volumes} volumes")
    manifest.config = cfg.to_dict()
    manifest.seeds = {"base_seed": cfg.base_seed}
    manifest.outputs = [str(p) for p in written]
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, manifest: RunManifest) -> int:
    recorded = RunManifest.from_file(args.manifest)
    if recorded.command == "replay":
        raise ConfigError("manifest records a replay, not a command", path=str(args.manifest))
    logger.info("Replaying %s: %s", recorded.command, " ".join(recorded.argv))
    return main(recorded.argv)


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "anomaly": cmd_anomaly,
    "gradcheck": cmd_gradcheck,
    "study": cmd_study,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mra_vae.py",
        description="Patch VAE for TOF-MRA: phantoms, training, reconstruction, evaluation and anomaly maps",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Ten phantoms, half with an aneurysm
  python scripts/mra_vae.py phantom --count 10 --aneurysm-fraction 0.5 --seed 0 --out data/phantoms

  # Train with the SSIM loss (learning rate defaults to 0.001)
  python scripts/mra_vae.py train --data data/phantoms --loss ssim --out runs/ssim

  # Reconstruct a volume and evaluate a directory of reconstructions
  python scripts/mra_vae.py reconstruct --model runs/ssim/model.avae --in a.nii.gz --out recon/a.nii.gz
  python scripts/mra_vae.py evaluate --orig data/test --recon recon --out reports/ssim

  # Anomaly map at the default SSIM threshold of 0.6
  python scripts/mra_vae.py anomaly --orig a.nii.gz --recon recon/a.nii.gz --out anomaly/a

  # Gradient checks and the full phantom study
  python scripts/mra_vae.py gradcheck
  python scripts/mra_vae.py study --out runs/study --seed 0

  # Re-run a command from its manifest
  python scripts/mra_vae.py replay runs/ssim/manifest.json
        """
    )
    parser.add_argument("--log-level", help="Log level (default: $MRA_VAE_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="Generate a synthetic vessel phantom cohort")
    p.add_argument("--count", type=int, required=True, help="Number of volumes")
    p.add_argument("--aneurysm-fraction", type=float, default=0.0, help="Share of volumes with an aneurysm")
    p.add_argument("--seed", type=int, default=0, help="Base seed; volume i uses seed + i")
    p.add_argument("--spec", type=Path, help="PhantomSpec JSON (see templates/phantom_spec.json)")
    p.add_argument("--out", type=Path, required=True, help="Output directory")

    p = sub.add_parser("train", help="Train the VAE on a directory of volumes")
    p.add_argument("--config", type=Path, help="TrainConfig JSON (see templates/train_config.json)")
    p.add_argument("--data", type=Path, required=True, help="Directory of .nii/.nii.gz training volumes")
    p.add_argument("--loss", choices=[m.value for m in LossMode], help="Reconstruction loss")
    p.add_argument("--lr", type=float, help="Learning rate (default: 0.01 for l2, 0.001 for ssim)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int, help="Maximum number of epochs")
    p.add_argument("--patience", type=int, help="Epochs without improvement before stopping")
    p.add_argument("--seed", type=int)
    p.add_argument("--patches-per-volume", type=int)
    p.add_argument("--flatten-bias", action="store_true", help="Flatten the bias field before sampling")
    p.add_argument("--out", type=Path, required=True, help="Output directory")

    p = sub.add_parser("reconstruct", help="Reconstruct a volume slice by slice")
    p.add_argument("--model", type=Path, required=True, help="Checkpoint (.avae)")
    p.add_argument("--in", dest="input", type=Path, required=True, help="Input volume")
    p.add_argument("--out", type=Path, required=True, help="Output volume (.nii or .nii.gz)")
    p.add_argument("--slice-axis", type=int, choices=[0, 1, 2], help="Default: the training slice axis")

    p = sub.add_parser("evaluate", help="Metrics for originals vs reconstructions paired by file stem")
    p.add_argument("--orig", type=Path, required=True, help="Directory of original volumes")
    p.add_argument("--recon", type=Path, required=True, help="Directory of reconstructions")
    p.add_argument("--out", type=Path, required=True, help="Report base path; writes <out>.csv and <out>.json")
    p.add_argument("--slice-axis", type=int, choices=[0, 1, 2], default=2)

    p = sub.add_parser("anomaly", help="SSIM anomaly map and mask for one volume pair")
    p.add_argument("--orig", type=Path, required=True, help="Original volume")
    p.add_argument("--recon", type=Path, required=True, help="Reconstruction in the original's units")
    p.add_argument("--threshold", type=float, default=DEFAULT_ANOMALY_THRESHOLD,
                   help=f"SSIM threshold (default: {DEFAULT_ANOMALY_THRESHOLD})")
    p.add_argument("--mask", type=Path, help="Brain mask volume (default: Otsu mask of the original)")
    p.add_argument("--slice-axis", type=int, choices=[0, 1, 2], default=2)
    p.add_argument("--out", type=Path, required=True, help="Output directory")

    p = sub.add_parser("gradcheck", help="Check every gradient against finite differences")
    p.add_argument("--seeds", type=int, nargs="+", default=list(gradcheck_suite.DEFAULT_SEEDS))
    p.add_argument("--out", type=Path, help="Optional directory for gradcheck.csv and a manifest")

    p = sub.add_parser("study", help="Train L2 and SSIM models on phantoms and tabulate the test metrics")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--seed", type=int, help="Base seed (overrides the config)")
    p.add_argument("--config", type=Path, help="StudyConfig JSON")

    p = sub.add_parser("replay", help="Re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path, help="manifest.json written by an earlier run")
    return parser


def _manifest_target(args: argparse.Namespace) -> Optional[Path]:
    if args.command == "replay":
        return None
    if args.command == "evaluate":
        return manifest_path_for(_report_paths(args.out)[1])
    out = getattr(args, "out", None)
    if out is None:
        return None
    return manifest_path_for(out) if args.command == "reconstruct" else out / "manifest.json"


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command and return its exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    configure_logging(args.log_level)

    manifest = RunManifest(command=args.command, argv=argv)
    try:
        code = COMMANDS[args.command](args, manifest)
    except MraVaeError as e:
        logger.error("%s", e.message)
        for key, value in e.details.items():
            logger.error("  %s: %s", key, value)
        return e.exit_code

    target = _manifest_target(args)
    if target is not None:
        manifest.finish().write(target)
        logger.info("Manifest: %s", target)
    return code


if __name__ == "__main__":
    sys.exit(main())
