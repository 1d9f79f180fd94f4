# dccrn_kws/routers/bench.py
import logging
from pathlib import Path
from typing import List, Optional

import pandas as pd
import typer

from dccrn_kws.audio_dsp import read_wav
from dccrn_kws.config import Architecture, ProjectionMode, RunConfig
from dccrn_kws.evaluate import RTF_MODES, load_trained_model, rtf_benchmark, write_summary
from dccrn_kws.routers.common import print_table, run_config

logger = logging.getLogger(__name__)

router = typer.Typer()


@router.command("bench-rtf")
def bench_rtf(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config file"),
    mode: Optional[List[str]] = typer.Option(None, "--mode", help=f"Modes to time (default: all of {', '.join(RTF_MODES)})"),
    audio: Optional[Path] = typer.Option(None, help="WAV to stream (default: seeded noise)"),
    checkpoint: Optional[Path] = typer.Option(None, help="Trained model timed as the mode matching its config"),
    output_dir: Path = typer.Option(Path("runs/rtf"), help="Report directory"),
):
    """Single-threaded streaming real-time factor per configuration."""
    run_cfg = run_config(config, output_dir=str(output_dir))
    modes = list(mode) if mode else list(RTF_MODES)
    models = {}
    if checkpoint is not None:
        model, ckpt_cfg = load_trained_model(checkpoint)
        run_cfg = run_cfg.with_overrides(**ckpt_cfg.spectro.model_dump(mode="json"))
        models[_mode_of(ckpt_cfg)] = model
    buffer = read_wav(audio, run_cfg.spectro.sample_rate) if audio is not None else None
    report = rtf_benchmark(run_cfg, buffer, modes, models)

    run_cfg.write_resolved(output_dir)
    pd.DataFrame([
        {"mode": r.mode, "rtf": r.rtf, "audio_s": r.audio_s, "seconds": r.seconds, **r.components}
        for r in report.rows
    ]).to_csv(output_dir / "rtf.tsv", sep="\t", index=False)
    write_summary(output_dir / "summary.json", report)
    print_table("Real-time factor (1 thread)", ["mode", "RTF"], [(r.mode, r.rtf) for r in report.rows])


def _mode_of(cfg: RunConfig) -> str:
    """Name of the benchmark row a trained config corresponds to."""
    m = cfg.model
    if m.architecture == Architecture.KWS:
        return "KWS-only"
    if m.projection == ProjectionMode.PLAIN:
        return "DCCRN-KWS"
    if m.projection == ProjectionMode.CCL:
        return "+CCL"
    return "+FM" if m.feature_merge else "+AudioBias"
