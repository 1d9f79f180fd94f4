# dccrn_kws/routers/stream.py
import logging
import sys
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import typer

from dccrn_kws.audio_dsp import read_wav
from dccrn_kws.evaluate import load_trained_model
from dccrn_kws.model import StreamingDetector

logger = logging.getLogger(__name__)

router = typer.Typer()

PCM16_SCALE = 32768.0


def pcm_chunks(fh, chunk_samples: int) -> Iterator[np.ndarray]:
    """Little-endian 16-bit mono PCM from a binary stream, ``chunk_samples`` at a time."""
    carry = b""
    while True:
        block = fh.read(2 * chunk_samples)
        if not block:
            break
        block = carry + block
        usable = len(block) - len(block) % 2
        carry = block[usable:]
        yield np.frombuffer(block[:usable], dtype="<i2").astype(np.float32) / PCM16_SCALE


def wav_chunks(path: Path, rate: int, chunk_samples: int) -> Iterator[np.ndarray]:
    samples = read_wav(path, rate).samples
    for start in range(0, len(samples), chunk_samples):
        yield samples[start:start + chunk_samples]


@router.command("stream")
def stream(
    checkpoint: Path = typer.Option(..., help="Trained checkpoint"),
    audio: str = typer.Option("-", help="16 kHz mono WAV, or '-' for raw PCM16 on stdin"),
    chunk_ms: float = typer.Option(100.0, min=10.0, help="Chunk size fed to the detector"),
    threshold: Optional[float] = typer.Option(None, min=0.0, max=1.0, help="Override the configured threshold"),
):
    """Causal streaming detection; prints one ``frame time score`` line per detection."""
    model, run_cfg = load_trained_model(checkpoint)
    detector = StreamingDetector(
        model,
        threshold=run_cfg.eval.threshold if threshold is None else threshold,
        smooth_win=run_cfg.eval.smooth_window,
        refractory=run_cfg.eval.refractory,
    )
    rate = run_cfg.spectro.sample_rate
    hop_s = run_cfg.spectro.hop_ms / 1000.0
    chunk_samples = max(1, int(chunk_ms * rate / 1000.0))
    source = pcm_chunks(sys.stdin.buffer, chunk_samples) if audio == "-" else wav_chunks(Path(audio), rate, chunk_samples)

    fired = 0
    for chunk in source:
        _, detections = detector.process(chunk)
        for d in detections:
            typer.echo(f"{d.frame} {d.time_s(hop_s):.2f} {d.score:.4f}")
            fired += 1
    logger.info(f"Stream finished: {detector.state.frames} frames, {fired} detections")
