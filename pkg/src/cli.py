# src/cli.py

"""
Command-line entry point:

    python src/cli.py datagen   --out-dir data/train --count 200
    python src/cli.py train     --data data/train --out-dir runs/toy
    python src/cli.py infer     --checkpoint runs/toy/model.ckpt --left l.png --right r.png --out-dir out
    python src/cli.py eval      --pred out --gt data/test --out-dir reports
    python src/cli.py ablate    --checkpoint runs/toy/model.ckpt --data data/test --out-dir ablation
    python src/cli.py gradcheck

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric-health abort.
"""

from __future__ import annotations

import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import pandas as pd
import torch
from joblib import Parallel, delayed

from config import device, load_run_config, log_level
from core.errors import NumericHealthError, StereoError
from core.models import InferenceConfig, RunConfig, STOP_RULES, TrainSample
from core.scoring import build_report, score_scene
from data_access import (
    read_manifest,
    read_mask_png,
    read_pfm,
    read_png_rgb,
    write_manifest,
    write_mask_png,
    write_pfm,
    write_scene,
)
from gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, gradcheck_suite
from network.stereo_net import StereoNet, with_switches
from pipeline import evaluate_model, infer
from providers.base import SceneProvider
from providers.directory_provider import DirectoryProvider
from providers.synthetic_provider import SPLIT_OFFSETS, SyntheticProvider, generate_scene, split_specs
from rendering import save_disparity_png, save_snapshot_strip
from services.checkpoint_store import CheckpointStore
from training import train_loop

logger = logging.getLogger(__name__)

ABLATION_ITERS = (1, 4, 10, 15, 20)
PRED_DISPARITY = "disparity.pfm"
# a ground-truth scene directory also works as a prediction
GT_DISPARITY = "disp_left.pfm"
PRED_OCCLUSION = "occlusion.png"

EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
EXISTING_DIR = click.Path(exists=True, file_okay=False, path_type=Path)
LOG_LEVELS = click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False)


# -----------------------------------------------------------------------------
# Helpers
# -----------------------------------------------------------------------------

def _parse_patch(ctx, param, value: Optional[str]) -> Optional[Tuple[int, int]]:
    if value is None:
        return None
    parts = value.lower().split("x")
    try:
        sizes = [int(p) for p in parts]
    except ValueError:
        raise click.BadParameter(f"expected N or HxW, got {value!r}", ctx, param) from None
    if len(sizes) == 1:
        return sizes[0], sizes[0]
    if len(sizes) == 2:
        return sizes[0], sizes[1]
    raise click.BadParameter(f"expected N or HxW, got {value!r}", ctx, param)


def _run_config(ctx: click.Context, **flags: Any) -> RunConfig:
    """Config file + environment, then the flags given on this command line."""
    overrides: Dict[str, Any] = {
        "train.seed": flags.get("seed"),
        "train.steps": flags.get("steps"),
        "train.workers": flags.get("workers"),
        "infer.workers": flags.get("workers"),
        "infer.rru_iters": flags.get("iters"),
        "infer.stop_rule": flags.get("stop_rule"),
        "infer.downsample_factor": flags.get("downsample"),
        "infer.overlap": flags.get("overlap"),
    }
    if flags.get("patch") is not None:
        overrides["infer.patch_h"], overrides["infer.patch_w"] = flags["patch"]
    if flags.get("no_occlusion"):
        overrides["model.use_occlusion_path"] = False
    if flags.get("no_nlr"):
        overrides["model.use_nlr"] = False
    return load_run_config(ctx.obj.get("config"), overrides)


def _model_switches(flags: Dict[str, Any]) -> Dict[str, Any]:
    switches = {}
    if flags.get("no_occlusion"):
        switches["use_occlusion_path"] = False
    if flags.get("no_nlr"):
        switches["use_nlr"] = False
    return switches


def _load_model(checkpoint: Path, switches: Optional[Dict[str, Any]] = None) -> StereoNet:
    model = CheckpointStore(checkpoint).load_model()
    if switches:
        model = with_switches(model, **switches)
    model.eval()
    return model.to(device())


def _scenes(data: Optional[Path], cfg: RunConfig, split: str, count: int) -> SceneProvider:
    if data is not None:
        return DirectoryProvider(data)
    return SyntheticProvider(cfg.scene, split, count, workers=cfg.train.workers)


def _write_prediction(result, out_dir: Path, reference: Optional[torch.Tensor],
                      colormap: bool, snapshots: bool) -> None:
    write_pfm(result.disparity, out_dir / PRED_DISPARITY)
    write_pfm(result.phase1_disparity, out_dir / "phase1_disparity.pfm")
    write_mask_png(result.occlusion.mask(), out_dir / PRED_OCCLUSION)
    if colormap:
        save_disparity_png(result.disparity.data, out_dir / "disparity.png", reference)
    if snapshots and result.iteration_disparities:
        save_snapshot_strip(result.iteration_disparities, out_dir / "snapshots.png", reference)


inference_options = [
    click.option("--iters", type=click.IntRange(min=0), help="Recurrent iterations per patch."),
    click.option("--no-occlusion", is_flag=True, help="Disable the occlusion path."),
    click.option("--no-nlr", is_flag=True, help="Disable normalized local refinement."),
    click.option("--stop-rule", type=click.Choice(STOP_RULES), help="Fixed count or SSIM early stop."),
    click.option("--downsample", type=click.IntRange(min=1), help="Phase-1 downsampling factor."),
    click.option("--patch", callback=_parse_patch, help="Phase-2 patch size, N or HxW."),
    click.option("--overlap", type=click.IntRange(min=0), help="Patch overlap in pixels."),
    click.option("--workers", type=click.IntRange(min=1), help="Parallel workers."),
]


def with_options(options):
    def decorate(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return decorate


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------

@click.group()
@click.option("--config", "config_path", type=EXISTING_FILE, help="key=value configuration file.")
@click.option("--log-level", "level_name", type=LOG_LEVELS, help="Default: HIRES_STEREO_LOG_LEVEL or INFO.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], level_name: Optional[str]):
    """High-resolution stereo matching: data, training, inference and evaluation."""
    level = (level_name or log_level()).upper()
    logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path


@cli.command()
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--manifest", type=EXISTING_FILE, help="One scene spec per line (key=value tokens).")
@click.option("--split", type=click.Choice(sorted(SPLIT_OFFSETS)), default="train", show_default=True)
@click.option("--count", type=click.IntRange(min=0), default=20, show_default=True)
@click.option("--start", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--workers", type=click.IntRange(min=1))
@click.pass_context
def datagen(ctx, out_dir: Path, manifest: Optional[Path], split: str, count: int,
            start: int, workers: Optional[int]):
    """Render synthetic scenes (PNG images, PFM disparities, occlusion masks)."""
    cfg = _run_config(ctx, workers=workers)
    if manifest is not None:
        specs = read_manifest(manifest, cfg.scene)
    else:
        specs = split_specs(cfg.scene, split, count, start)

    n_jobs = cfg.train.workers
    if n_jobs > 1:
        samples = Parallel(n_jobs=n_jobs)(delayed(generate_scene)(s) for s in specs)
    else:
        samples = [generate_scene(s) for s in specs]
    for sample in samples:
        write_scene(sample, out_dir)
    write_manifest(specs, out_dir / "manifest.txt")
    logger.info("Wrote %d scenes to %s", len(samples), out_dir)
    click.echo(f"{len(samples)} scenes written to {out_dir}")


@cli.command()
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--data", type=EXISTING_DIR, help="Training scenes from datagen (default: synthetic).")
@click.option("--val-data", type=EXISTING_DIR, help="Validation scenes (default: synthetic).")
@click.option("--steps", type=click.IntRange(min=0))
@click.option("--seed", type=int)
@click.option("--no-occlusion", is_flag=True)
@click.option("--no-nlr", is_flag=True)
@click.option("--workers", type=click.IntRange(min=1))
@click.pass_context
def train(ctx, out_dir: Path, data: Optional[Path], val_data: Optional[Path], **flags):
    """Train the network; writes model.ckpt and metrics.csv."""
    cfg = _run_config(ctx, **flags)
    train_samples = _scenes(data, cfg, "train", cfg.train.train_count).load()
    val_samples = _scenes(val_data, cfg, "val", cfg.train.val_count).load()
    result = train_loop(train_samples, val_samples, cfg, out_dir)
    click.echo(f"checkpoint: {result.checkpoint}")
    if not result.metrics.empty:
        click.echo(result.metrics.tail(1).to_string(index=False))


@cli.command(name="infer")
@click.option("--checkpoint", type=EXISTING_FILE, required=True)
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--left", type=EXISTING_FILE, help="Left image (PNG).")
@click.option("--right", type=EXISTING_FILE, help="Right image (PNG).")
@click.option("--data", type=EXISTING_DIR, help="Predict every scene of a datagen directory.")
@click.option("--gt", type=EXISTING_FILE, help="Ground-truth PFM; sets the colormap range.")
@click.option("--colormap/--no-colormap", default=True, show_default=True)
@click.option("--snapshots", is_flag=True, help="Render one frame per recurrent iteration.")
@with_options(inference_options)
@click.pass_context
def infer_cmd(ctx, checkpoint: Path, out_dir: Path, left: Optional[Path], right: Optional[Path],
              data: Optional[Path], gt: Optional[Path], colormap: bool, snapshots: bool, **flags):
    """Two-phase inference on one pair (--left/--right) or a scene directory (--data)."""
    if data is None and (left is None or right is None):
        raise click.UsageError("give --left and --right, or --data")
    cfg = _run_config(ctx, **flags)
    icfg = dataclasses.replace(cfg.infer, keep_history=snapshots)
    model = _load_model(checkpoint, _model_switches(flags))
    dev = device()

    if data is None:
        pairs = [("", read_png_rgb(left), read_png_rgb(right), read_pfm(gt).data if gt else None)]
    else:
        pairs = [(s.scene_id, s.left, s.right, s.disp_left) for s in DirectoryProvider(data)]

    for scene_id, l_img, r_img, reference in pairs:
        result = infer(model, l_img.to(dev), r_img.to(dev), icfg)
        target = out_dir / scene_id if scene_id else out_dir
        _write_prediction(result, target, reference, colormap, snapshots)
        click.echo(f"{target / PRED_DISPARITY}: {result.patch_count} patches, "
                   f"{result.timings.get('total_s', 0.0):.2f}s")


def _prediction_file(scene_dir: Path) -> Path:
    path = scene_dir / PRED_DISPARITY
    if not path.exists() and (scene_dir / GT_DISPARITY).exists():
        return scene_dir / GT_DISPARITY
    return path


@cli.command(name="eval")
@click.option("--pred", type=EXISTING_DIR, required=True,
              help="Predictions: <scene>/disparity.pfm (or disp_left.pfm) and <scene>/occlusion.png.")
@click.option("--gt", type=EXISTING_DIR, required=True, help="Ground-truth scenes from datagen.")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--max-disparity", type=float, help="Exclude ground truth above this value.")
@click.option("--label", default="eval", show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1)
def eval_cmd(pred: Path, gt: Path, out_dir: Path, max_disparity: Optional[float], label: str,
             workers: int):
    """Score predictions against ground truth; writes report.csv and report.txt."""
    provider = DirectoryProvider(gt)
    if len(provider) == 0:
        raise FileNotFoundError(f"No ground-truth scenes under {gt}")

    def one(index: int):
        sample: TrainSample = provider.get(index)
        scene_dir = pred / sample.scene_id
        return score_scene(
            sample.scene_id,
            read_pfm(_prediction_file(scene_dir)).data,
            sample.disp_left,
            read_mask_png(scene_dir / PRED_OCCLUSION),
            sample.occlusion,
            max_disparity,
        )

    indices = range(len(provider))
    if workers > 1:
        rows = Parallel(n_jobs=workers, prefer="threads")(delayed(one)(i) for i in indices)
    else:
        rows = [one(i) for i in indices]
    report = build_report(rows, label, max_disparity)
    report.to_csv(out_dir / "report.csv")
    text = report.to_text()
    (out_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    click.echo(text)


def ablation_variants(base: InferenceConfig) -> List[Tuple[str, Dict[str, Any], InferenceConfig]]:
    """(name, model switches, inference config) for every ablation run."""
    variants = [("full", {}, base)]
    variants += [(f"iters_{n}", {}, dataclasses.replace(base, rru_iters=n)) for n in ABLATION_ITERS]
    variants += [
        ("no_occlusion", {"use_occlusion_path": False}, base),
        ("no_nlr", {"use_nlr": False}, base),
        ("no_rru", {"use_rru": False}, base),
        ("ssim_stop", {}, dataclasses.replace(base, stop_rule="ssim")),
    ]
    return variants


@cli.command()
@click.option("--checkpoint", type=EXISTING_FILE, required=True)
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--data", type=EXISTING_DIR, help="Held-out scenes (default: synthetic test split).")
@click.option("--count", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--max-disparity", type=float)
@with_options(inference_options)
@click.pass_context
def ablate(ctx, checkpoint: Path, out_dir: Path, data: Optional[Path], count: int,
           max_disparity: Optional[float], **flags):
    """Evaluate ablation variants; one report per variant plus summary.csv."""
    cfg = _run_config(ctx, **flags)
    base_model = _load_model(checkpoint, _model_switches(flags))
    samples = _scenes(data, cfg, "test", count).load()
    workers = cfg.infer.workers

    summary = []
    for name, switches, icfg in ablation_variants(cfg.infer):
        model = with_switches(base_model, **switches) if switches else base_model
        report = evaluate_model(model, samples, icfg, name, workers, max_disparity)
        report.to_csv(out_dir / f"{name}.csv")
        row = report.aggregate.to_dict()
        row["scene"] = name
        summary.append(row)

    table = pd.DataFrame(summary).rename(columns={"scene": "variant"})
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "summary.csv", index=False, float_format="%.6f", lineterminator="\n")
    click.echo(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tolerance", type=float, default=DEFAULT_TOLERANCE, show_default=True)
@click.option("--step", type=float, default=DEFAULT_STEP, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path))
def gradcheck(seed: int, tolerance: float, step: float, out_dir: Optional[Path]):
    """Finite-difference check of every differentiable operation."""
    report = gradcheck_suite(seed=seed, tolerance=tolerance, step=step)
    click.echo(report.to_text())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.to_frame().to_csv(out_dir / "gradcheck.csv", index=False)
    if not report.passed:
        raise click.ClickException(f"gradient check failed for: {', '.join(report.failures)}")


# -----------------------------------------------------------------------------
# Entry point
# -----------------------------------------------------------------------------

def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    try:
        rv = cli.main(args=list(argv) if argv is not None else None,
                      prog_name="hires-stereo", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except NumericHealthError as e:
        logger.error("numeric-health abort: %s", e)
        click.echo(f"Error: numeric-health abort: {e}", err=True)
        return 2
    except (StereoError, ValueError, FileNotFoundError) as e:
        click.echo(f"Error: {e}", err=True)
        return 1
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(run_cli())
