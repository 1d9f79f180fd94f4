# dccrn_kws/routers/evaluation.py
import logging
from pathlib import Path
from typing import Optional

import pandas as pd
import typer

from dccrn_kws.audio_dsp import read_wav
from dccrn_kws.checkpoint import load_checkpoint
from dccrn_kws.evaluate import (
    EvalReport,
    evaluate_roc,
    evaluate_wake,
    export_energy,
    load_trained_model,
    plot_energy,
    roc_table,
    write_summary,
)
from dccrn_kws.routers.common import adopt_sections, console, print_merge_weights, print_table, required, run_config
from dccrn_kws.simulate import load_manifest

logger = logging.getLogger(__name__)

router = typer.Typer()


def _prepare(checkpoint: Path, config: Optional[Path], manifest: Optional[Path], output_dir: Optional[Path]):
    model, run_cfg = load_trained_model(checkpoint)
    if config is not None:
        run_cfg = adopt_sections(run_cfg, run_config(config))
    run_cfg = run_cfg.with_overrides(
        test_manifest=str(manifest) if manifest else None,
        output_dir=str(output_dir or checkpoint.parent / "eval"),
    )
    entries = load_manifest(required(run_cfg.paths.test_manifest, "test manifest"))
    out = run_cfg.paths.output_dir
    run_cfg.write_resolved(out)
    return model, run_cfg, entries, out


@router.command("eval-roc")
def eval_roc(
    checkpoint: Path = typer.Option(..., help="Trained checkpoint"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Config for eval/simulation/paths keys"),
    manifest: Optional[Path] = typer.Option(None, help="Test manifest (default: test_manifest)"),
    output_dir: Optional[Path] = typer.Option(None, help="Report directory (default: <checkpoint dir>/eval)"),
):
    """ROC per test condition (each SNR and clean) from utterance-level max smoothed scores."""
    model, run_cfg, entries, out = _prepare(checkpoint, config, manifest, output_dir)
    reports = evaluate_roc(model, run_cfg, entries)
    for report in reports:
        roc_table(report.roc).to_csv(out / f"roc_{report.condition}.tsv", sep="\t", index=False)
    summary = EvalReport(
        checkpoint=str(checkpoint),
        config_hash=run_cfg.config_hash(),
        conditions=reports,
        dataset=[str(run_cfg.paths.test_manifest)],
    )
    write_summary(out / "summary.json", summary)
    print_table(
        "ROC (false alarms per utterance)",
        ["condition", "positives", "negatives", "AUC"],
        [(r.condition, r.n_positive, r.n_negative, r.auc) for r in reports],
    )


@router.command("eval-wake")
def eval_wake(
    checkpoint: Path = typer.Option(..., help="Trained checkpoint"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Config for eval/simulation/paths keys"),
    manifest: Optional[Path] = typer.Option(None, help="Test manifest (default: test_manifest)"),
    output_dir: Optional[Path] = typer.Option(None, help="Report directory (default: <checkpoint dir>/eval)"),
):
    """Wake accuracy at the threshold that keeps false alarms within the per-10-hour budget."""
    model, run_cfg, entries, out = _prepare(checkpoint, config, manifest, output_dir)
    results = evaluate_wake(model, run_cfg, entries)
    pd.DataFrame([r.model_dump() for r in results]).to_csv(out / "wake.tsv", sep="\t", index=False)
    summary = EvalReport(
        checkpoint=str(checkpoint),
        config_hash=run_cfg.config_hash(),
        fa_axis="per hour of negative stream",
        wake=results,
        dataset=[str(run_cfg.paths.test_manifest)],
    )
    write_summary(out / "summary_wake.json", summary)
    print_table(
        "Wake accuracy",
        ["condition", "threshold", "accuracy", "FA", "budget"],
        [(r.condition, r.threshold, r.accuracy, r.fa_count, r.fa_budget) for r in results],
    )


@router.command("export-energy")
def export_energy_command(
    checkpoint: Path = typer.Option(..., help="Trained checkpoint"),
    audio: Path = typer.Option(..., help="16 kHz mono WAV"),
    output: Path = typer.Option(Path("runs/energy.tsv"), help="Energy table to write"),
):
    """Per-layer frame energy plus the merged-feature magnitude sum as a TSV table; prints the merge weights."""
    model, run_cfg = load_trained_model(checkpoint)
    table = export_energy(model, read_wav(audio, run_cfg.spectro.sample_rate))
    output.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(output, sep="\t", index=False)
    run_cfg.write_resolved(output.parent)
    logger.info(f"💾 Energy table ({table['row'].nunique()} rows) written to {output}")
    print_merge_weights(model)


@router.command("plot")
def plot(
    table: Path = typer.Option(..., help="Energy table from export-energy"),
    output: Path = typer.Option(Path("runs/energy.png"), help="Image to write"),
    checkpoint: Optional[Path] = typer.Option(None, help="Checkpoint whose hop length sets the time axis"),
    title: Optional[str] = typer.Option(None),
):
    """Render the energy table as one stacked panel per row."""
    hop_s = 0.01
    if checkpoint is not None:
        ckpt = load_checkpoint(checkpoint)
        hop_s = float(ckpt.config.get("hop_ms", 10.0)) / 1000.0
    frame = pd.read_csv(table, sep="\t")
    plot_energy(frame, output, hop_s=hop_s, title=title)
    console.print(f"plot written to {output}")
