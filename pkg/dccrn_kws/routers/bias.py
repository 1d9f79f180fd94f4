# dccrn_kws/routers/bias.py
import logging
from pathlib import Path
from typing import Optional

import typer

from dccrn_kws.config import BiasMode
from dccrn_kws.context_bias import make_bias_list
from dccrn_kws.routers.common import console, required, run_config
from dccrn_kws.simulate import load_manifest

logger = logging.getLogger(__name__)

router = typer.Typer()


@router.command("make-bias-list")
def make_bias_list_command(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config file"),
    manifest: Optional[Path] = typer.Option(None, help="Manifest with keyword clips (default: train_manifest)"),
    output: Path = typer.Option(Path("runs/bias_list.json"), help="Bias list file to write"),
    mode: Optional[BiasMode] = typer.Option(None, "--mode", "--bias-mode", help="Bias list mode"),
    size: Optional[int] = typer.Option(None, min=1, max=50, help="Entries in the list (max 50)"),
    speaker: Optional[str] = typer.Option(None, help="Speaker id for speaker lists"),
    seed: Optional[int] = typer.Option(None),
):
    """Pick keyword clips for a bias list; the choice depends only on the seed and the pool."""
    run_cfg = run_config(config, bias_mode=mode, bias_list_size=size, seed=seed)
    entries = load_manifest(required(manifest or run_cfg.paths.train_manifest, "manifest"))
    bias_list = make_bias_list(
        entries, run_cfg.model.bias_mode, run_cfg.train.seed, run_cfg.model.bias_list_size, speaker,
    )
    bias_list.save(output)
    run_cfg.with_overrides(bias_list=str(output)).write_resolved(output.parent)
    logger.info(f"💾 Bias list with {len(bias_list.entries)} entries written to {output}")
    console.print(f"{bias_list.mode.value} list, {len(bias_list.entries)} entries -> {output}")
