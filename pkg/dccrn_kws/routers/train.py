# dccrn_kws/routers/train.py
import logging
from pathlib import Path
from typing import Optional

import typer

from dccrn_kws.config import Architecture, BiasMode, ProjectionMode
from dccrn_kws.model import build_model
from dccrn_kws.routers.common import Switch, console, print_merge_weights, required, run_config
from dccrn_kws.simulate import load_manifest
from dccrn_kws.trainer import Trainer

logger = logging.getLogger(__name__)

router = typer.Typer()


@router.command("train")
def train(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config file"),
    projection: Optional[ProjectionMode] = typer.Option(None, help="Projection layer before the detector"),
    bias_mode: Optional[BiasMode] = typer.Option(None, help="How the bias embedding is chosen"),
    feature_merge: Optional[Switch] = typer.Option(None, help="Merge every encoder layer (on) or use the last (off)"),
    architecture: Optional[Architecture] = typer.Option(None, help="Multi-task model or detector-only baseline"),
    manifest: Optional[Path] = typer.Option(None, help="Training manifest (default: train_manifest)"),
    bias_list: Optional[Path] = typer.Option(None, help="Bias list file from make-bias-list"),
    output_dir: Optional[Path] = typer.Option(None, "--output-dir", "--checkpoint-dir", help="Checkpoint directory"),
    resume: Optional[Path] = typer.Option(None, help="Checkpoint to continue from"),
    iterations: Optional[int] = typer.Option(None, min=1, help="Override the iteration count"),
    seed: Optional[int] = typer.Option(None),
):
    """Train on mixtures generated on the fly; writes checkpoints and train_log.tsv."""
    run_cfg = run_config(
        config,
        projection=projection,
        bias_mode=bias_mode,
        feature_merge=feature_merge,
        architecture=architecture,
        train_manifest=str(manifest) if manifest else None,
        bias_list=str(bias_list) if bias_list else None,
        output_dir=str(output_dir) if output_dir else None,
        iterations=iterations,
        seed=seed,
    )
    entries = load_manifest(required(run_cfg.paths.train_manifest, "training manifest"))
    out = run_cfg.paths.output_dir
    run_cfg.write_resolved(out)
    logger.info(
        f"🚀 Training {run_cfg.model.architecture.value}: projection={run_cfg.model.projection.value} "
        f"bias={run_cfg.model.bias_mode.value} merge={run_cfg.model.feature_merge} hash={run_cfg.config_hash()}"
    )

    model = build_model(run_cfg)
    trainer = Trainer(run_cfg, model, entries)
    if resume is not None:
        trainer.resume(resume)
    last = None
    for last in trainer.run():
        pass

    print_merge_weights(model)
    console.print(f"final checkpoint: {last}  smoothed accuracy: {trainer.smoothed_accuracy():.4f}")
