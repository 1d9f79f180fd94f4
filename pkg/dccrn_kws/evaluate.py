# dccrn_kws/evaluate.py
"""Evaluation: ROC over utterance scores, wake accuracy under a false-alarm
budget, the per-layer energy table/plot and the real-time-factor benchmark."""
import logging
import math
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import pandas as pd
import torch
import torch.nn as nn
from pydantic import BaseModel, Field

from dccrn_kws.audio_dsp import AudioBuffer
from dccrn_kws.checkpoint import load_checkpoint, restore_model
from dccrn_kws.context_bias import CACHE_TENSOR
from dccrn_kws.config import Architecture, BiasMode, ProjectionMode, RunConfig, build_config
from dccrn_kws.errors import EvaluationError
from dccrn_kws.dccrn_core import encoder_input
from dccrn_kws.kws_head import ComplexContextLinear, decide, smooth_posteriors
from dccrn_kws.model import StreamingDetector, build_model, offline_posteriors
from dccrn_kws.simulate import ManifestEntry, Simulator, UtteranceType

logger = logging.getLogger(__name__)

CLEAN = "clean"


class RocPoint(BaseModel):
    threshold: float
    false_reject_rate: float = Field(..., ge=0, le=1)
    false_alarm_rate: float = Field(..., ge=0, le=1)
    false_alarms_per_hour: Optional[float] = None


class WakeResult(BaseModel):
    condition: str
    threshold: float
    accuracy: float
    fa_budget: int
    fa_count: int
    negative_hours: float
    budget_met: bool


class ConditionReport(BaseModel):
    condition: str
    n_positive: int
    n_negative: int
    auc: float
    roc: List[RocPoint]


class EvalReport(BaseModel):
    checkpoint: Optional[str] = None
    config_hash: str
    fa_axis: str = "per-utterance rate; per-hour alongside when stream duration is known"
    conditions: List[ConditionReport] = Field(default_factory=list)
    wake: List[WakeResult] = Field(default_factory=list)
    operating_threshold: Optional[float] = None
    dataset: List[str] = Field(default_factory=list)


class RtfRow(BaseModel):
    mode: str
    rtf: float = Field(..., gt=0)
    audio_s: float
    seconds: float
    components: Dict[str, float] = Field(default_factory=dict)


class RtfReport(BaseModel):
    threads: int = 1
    chunk_s: float
    rows: List[RtfRow]


# --- ROC ---

def roc_curve(
    pos_scores: Sequence[float],
    neg_scores: Sequence[float],
    negative_hours: Optional[float] = None,
    thresholds: Optional[Sequence[float]] = None,
) -> List[RocPoint]:
    """Sweep every distinct score (or the given ``thresholds``):
    ``FR = #{pos < t}/#pos``, ``FA = #{neg >= t}/#neg``."""
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError(f"ROC needs positive and negative scores (got {pos.size} / {neg.size})")
    if thresholds is None:
        thresholds = np.unique(np.concatenate([pos, neg, [np.inf]]))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    fr = np.searchsorted(pos, thresholds, side="left") / pos.size
    fa_count = neg.size - np.searchsorted(neg, thresholds, side="left")
    points = []
    for t, r, c in zip(thresholds, fr, fa_count):
        points.append(RocPoint(
            threshold=float(t),
            false_reject_rate=float(r),
            false_alarm_rate=float(c / neg.size),
            false_alarms_per_hour=None if not negative_hours else float(c / negative_hours),
        ))
    return points


def roc_auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Probability a positive outscores a negative (ties count half)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("AUC needs positive and negative scores")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    return float((below + 0.5 * ties).sum() / (pos.size * neg.size))


def roc_table(points: Sequence[RocPoint]) -> pd.DataFrame:
    return pd.DataFrame([p.model_dump() for p in points])


# --- wake accuracy ---

def fa_budget(negative_hours: float, fa_per_10h: int = 1) -> int:
    return max(1, int(math.floor(fa_per_10h * negative_hours / 10.0)))


def wake_accuracy(
    pos_scores: Sequence[float],
    negative_smoothed: np.ndarray,
    negative_hours: float,
    refractory: int = 100,
    fa_per_10h: int = 1,
    condition: str = CLEAN,
) -> WakeResult:
    """Accuracy at the lowest threshold whose false alarms on the negative stream fit the budget."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    if pos.size == 0:
        raise EvaluationError("wake accuracy needs positive scores")
    if negative_hours <= 0:
        raise EvaluationError(f"negative stream duration must be positive, got {negative_hours} h")
    smoothed = np.asarray(negative_smoothed, dtype=np.float64)
    budget = fa_budget(negative_hours, fa_per_10h)
    candidates = np.unique(np.concatenate([pos, smoothed[smoothed > 0]]))
    chosen, count, met = None, 0, False
    for threshold in candidates:
        count = len(decide(smoothed, threshold, refractory))
        if count <= budget:
            chosen, met = float(threshold), True
            break
    if chosen is None:
        chosen = float(candidates[-1])
        count = len(decide(smoothed, chosen, refractory))
        logger.warning(f"⚠️ No threshold meets {budget} false alarms in {negative_hours:.3f} h ({condition})")
    return WakeResult(
        condition=condition,
        threshold=chosen,
        accuracy=float(np.mean(pos >= chosen)),
        fa_budget=budget,
        fa_count=count,
        negative_hours=negative_hours,
        budget_met=met,
    )


# --- scoring ---

def utterance_score(posteriors: np.ndarray, smooth_win: int) -> float:
    """Maximum smoothed posterior over a clip."""
    if len(posteriors) == 0:
        return 0.0
    return float(np.max(smooth_posteriors(posteriors, smooth_win)))


def condition_clips(
    simulator: Simulator,
    entries: Sequence[ManifestEntry],
    condition: str,
    seed: int = 0,
) -> List[Tuple[ManifestEntry, np.ndarray]]:
    """Test audio for one condition: the source clip when clean, otherwise a mixture at that SNR.

    Every condition draws the same negative segments, so all conditions score the same clips.
    """
    clips = []
    for index, entry in enumerate(e for e in entries if e.type != UtteranceType.NOISE):
        if condition == CLEAN:
            audio, _ = simulator.source(entry, [seed, index])
            if audio is not None:
                clips.append((entry, audio.samples))
            continue
        utt = simulator.generate(entry, [seed, index], snr_db=float(condition), reverb=False)
        if utt is not None:
            clips.append((entry, utt.pair.noisy.samples))
    return clips


def score_clips(model: nn.Module, clips, smooth_win: int) -> Tuple[List[float], List[float], List[np.ndarray]]:
    pos, neg, neg_posteriors = [], [], []
    dtype = next(model.parameters()).dtype
    for entry, audio in clips:
        post = offline_posteriors(model, torch.from_numpy(np.asarray(audio)).to(dtype))[0].cpu().numpy()
        score = utterance_score(post, smooth_win)
        if entry.type == UtteranceType.KEYWORD:
            pos.append(score)
        else:
            neg.append(score)
            neg_posteriors.append(post)
    return pos, neg, neg_posteriors


def negative_stream(model: nn.Module, clips, run_cfg: RunConfig) -> Tuple[np.ndarray, float]:
    """Smoothed posteriors over all negative clips played back to back, and the stream length in hours."""
    audio = [np.asarray(a, dtype=np.float32) for e, a in clips if e.type == UtteranceType.NEGATIVE]
    if not audio:
        raise EvaluationError("no negative clips for the false-alarm stream")
    stream = np.concatenate(audio)
    dtype = next(model.parameters()).dtype
    post = offline_posteriors(model, torch.from_numpy(stream).to(dtype))[0].cpu().numpy()
    hours = len(stream) / run_cfg.spectro.sample_rate / 3600.0
    return smooth_posteriors(post, run_cfg.eval.smooth_window), hours


def conditions(run_cfg: RunConfig, include_clean: bool = True) -> List[str]:
    out = [f"{snr:g}" for snr in run_cfg.eval.test_snrs]
    return out + [CLEAN] if include_clean else out


def evaluate_roc(model: nn.Module, run_cfg: RunConfig, entries: Sequence[ManifestEntry]) -> List[ConditionReport]:
    simulator = Simulator(entries, run_cfg.simulation, run_cfg.spectro, seed=run_cfg.train.seed)
    reports = []
    for condition in conditions(run_cfg):
        clips = condition_clips(simulator, entries, condition, run_cfg.train.seed)
        pos, neg, _ = score_clips(model, clips, run_cfg.eval.smooth_window)
        points = roc_curve(pos, neg)
        reports.append(ConditionReport(
            condition=condition, n_positive=len(pos), n_negative=len(neg), auc=roc_auc(pos, neg), roc=points,
        ))
        logger.info(f"ROC [{condition}] pos={len(pos)} neg={len(neg)} AUC={reports[-1].auc:.4f}")
    return reports


def evaluate_wake(model: nn.Module, run_cfg: RunConfig, entries: Sequence[ManifestEntry]) -> List[WakeResult]:
    simulator = Simulator(entries, run_cfg.simulation, run_cfg.spectro, seed=run_cfg.train.seed)
    results = []
    for condition in conditions(run_cfg):
        clips = condition_clips(simulator, entries, condition, run_cfg.train.seed)
        pos, _, _ = score_clips(model, clips, run_cfg.eval.smooth_window)
        smoothed, hours = negative_stream(model, clips, run_cfg)
        results.append(wake_accuracy(
            pos, smoothed, hours, run_cfg.eval.refractory, run_cfg.eval.fa_per_10h, condition,
        ))
        logger.info(f"Wake [{condition}] accuracy={results[-1].accuracy:.4f} at {results[-1].threshold:.4f}")
    return results


# --- energy ---

def export_energy(model: nn.Module, audio: AudioBuffer) -> pd.DataFrame:
    """Long table with columns ``row, frame, energy``: one row per layer plus ``merged`` per frame."""
    if not hasattr(model, "energy_tracks"):
        raise EvaluationError("energy export needs the encoder model, not the detector-only baseline")
    model.eval()
    dtype = next(model.parameters()).dtype
    tracks = model.energy_tracks(audio.tensor(dtype))
    frames = []
    for row, values in tracks.items():
        frames.append(pd.DataFrame({"row": row, "frame": np.arange(len(values)), "energy": values}))
    return pd.concat(frames, ignore_index=True)


def plot_energy(table: pd.DataFrame, path: Path, hop_s: float = 0.01, title: Optional[str] = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = list(dict.fromkeys(table["row"]))
    fig, axes = plt.subplots(len(rows), 1, figsize=(10, 1.6 * len(rows)), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, row in zip(axes, rows):
        part = table[table["row"] == row]
        ax.plot(part["frame"] * hop_s, part["energy"], linewidth=0.8)
        ax.set_ylabel(row, rotation=0, ha="right", fontsize=8)
        ax.grid(True, alpha=0.3)
    axes[-1].set_xlabel("time (s)")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"📈 Energy plot written to {path}")
    return path


# --- real-time factor ---

RTF_MODES: Dict[str, Dict[str, object]] = {
    "KWS-only": {"architecture": Architecture.KWS},
    "DCCRN-KWS": {"projection": ProjectionMode.PLAIN, "feature_merge": False},
    "+AudioBias": {"projection": ProjectionMode.BIAS_CONCAT, "feature_merge": False, "bias_mode": BiasMode.FIXED},
    "+FM": {"projection": ProjectionMode.BIAS_CONCAT, "feature_merge": True, "bias_mode": BiasMode.FIXED},
    "+CCL": {"projection": ProjectionMode.CCL, "feature_merge": True, "bias_mode": BiasMode.FIXED},
}


def _mode_config(run_cfg: RunConfig, mode: str) -> RunConfig:
    overrides = {"architecture": Architecture.DCCRN_KWS, **RTF_MODES[mode]}
    return run_cfg.with_overrides(**overrides)


def _ready_bias(model: nn.Module) -> None:
    bias = getattr(model, "context_bias", None)
    if bias is not None and float(bias.cache_ready) < 0.5:
        # no clips attached: keep the stored embedding as the inference bias
        bias.cache_ready.fill_(1.0)


def time_stream(model: nn.Module, audio: np.ndarray, chunk: int, warmup: int) -> float:
    detector = StreamingDetector(model)
    if warmup:
        detector.run(audio[:warmup], chunk)
        detector.reset()
    start = time.perf_counter()
    detector.run(audio, chunk)
    return time.perf_counter() - start


def rtf_benchmark(
    run_cfg: RunConfig,
    audio: Optional[AudioBuffer] = None,
    modes: Sequence[str] = tuple(RTF_MODES),
    models: Optional[Dict[str, nn.Module]] = None,
) -> RtfReport:
    """Single-threaded streaming RTF per mode over ``rtf_audio_s`` seconds after warmup."""
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    rate = run_cfg.spectro.sample_rate
    try:
        if audio is None:
            rng = np.random.default_rng(run_cfg.train.seed)
            n = int((run_cfg.eval.rtf_audio_s + run_cfg.eval.rtf_warmup_s) * rate)
            samples = (0.1 * rng.standard_normal(n)).astype(np.float32)
        else:
            samples = audio.samples
        warmup = int(run_cfg.eval.rtf_warmup_s * rate)
        measured = samples[warmup:] if len(samples) > warmup else samples
        chunk = int(run_cfg.eval.rtf_chunk_s * rate)
        rows = []
        for mode in modes:
            if mode not in RTF_MODES:
                raise EvaluationError(f"unknown RTF mode '{mode}' (choose from {list(RTF_MODES)})")
            model = (models or {}).get(mode) or build_model(_mode_config(run_cfg, mode))
            _ready_bias(model)
            seconds = time_stream(model, measured, chunk, min(warmup, len(samples)))
            duration = len(measured) / rate
            rows.append(RtfRow(
                mode=mode, rtf=seconds / duration, audio_s=duration, seconds=seconds,
                components=component_times(model, measured[: min(len(measured), 10 * rate)], rate),
            ))
            logger.info(f"⏱️ {mode}: RTF {rows[-1].rtf:.4f} over {duration:.1f} s")
        return RtfReport(threads=1, chunk_s=run_cfg.eval.rtf_chunk_s, rows=rows)
    finally:
        torch.set_num_threads(previous_threads)


@torch.no_grad()
def component_times(model: nn.Module, audio: np.ndarray, rate: int) -> Dict[str, float]:
    """Offline RTF of each inference stage over ``audio``."""
    if not hasattr(model, "core"):
        return {}
    model.eval()
    x = torch.from_numpy(np.asarray(audio, dtype=np.float32))
    duration = len(audio) / rate
    times: Dict[str, float] = {}

    t0 = time.perf_counter()
    spec = model.spectrum(x)
    inp = encoder_input(spec, model.cfg.freq_bins)
    t1 = time.perf_counter()
    stack, _ = model.core.encode(inp)
    t2 = time.perf_counter()
    merged = model.merge(stack)
    t3 = time.perf_counter()
    bias = model.resolve_bias(1)
    if isinstance(model.projection, ComplexContextLinear):
        kws_in, _ = model.projection(merged, bias)
    else:
        kws_in = model.projection(merged, bias)
    t4 = time.perf_counter()
    model.dtc(kws_in)
    t5 = time.perf_counter()
    for name, (a, b) in {
        "stft": (t0, t1), "encoder": (t1, t2), "merge": (t2, t3), "projection": (t3, t4), "dtc": (t4, t5),
    }.items():
        times[name] = (b - a) / duration
    return times


# --- checkpoints and summaries ---

def load_trained_model(path: Path, **overrides) -> Tuple[nn.Module, RunConfig]:
    """Rebuild the model recorded in a checkpoint header and load its weights."""
    ckpt = load_checkpoint(path)
    run_cfg = build_config(ckpt.config, source=str(path)) if ckpt.config else RunConfig()
    if overrides:
        run_cfg = run_cfg.with_overrides(**overrides)
    model = build_model(run_cfg)
    restore_model(model, ckpt, expected_hash=run_cfg.config_hash())
    bias = getattr(model, "context_bias", None)
    if bias is not None and bias.mode != BiasMode.LEARNABLE and float(bias.cache_ready) < 0.5:
        logger.warning(f"⚠️ {path} has no cached {CACHE_TENSOR}; attach bias clips before inference")
    model.eval()
    logger.info(f"Loaded {path} (iteration {ckpt.iteration}, hash {ckpt.config_hash})")
    return model, run_cfg


def write_summary(path: Path, report: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(report.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return path
