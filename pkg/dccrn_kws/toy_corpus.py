# dccrn_kws/toy_corpus.py
"""Synthetic desk-scale corpus: harmonic "syllable" speech, a four-syllable
keyword, confusable non-keywords and a handful of stationary/modulated noises.

Train and test partitions never share speakers or noise recordings.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from dccrn_kws.audio_dsp import AudioBuffer, write_wav
from dccrn_kws.simulate import ManifestEntry, UtteranceType, validate_partition, write_manifest

logger = logging.getLogger(__name__)

KEYWORD_PATTERN: Tuple[int, ...] = (0, 1, 0, 1)
SYLLABLE_S = 0.16
GAP_S = 0.04
# formant-like partial weights per syllable type
SYLLABLE_TIMBRES: Tuple[Tuple[float, ...], ...] = (
    (1.0, 0.8, 0.1, 0.05),
    (0.2, 0.3, 1.0, 0.6),
    (0.6, 0.1, 0.6, 0.1),
    (0.1, 1.0, 0.2, 0.9),
)
NOISE_KINDS = ("white", "pink", "brown", "hum", "tonal", "babble")


@dataclass(frozen=True)
class ToyCorpusSpec:
    train_speakers: int = 10
    test_speakers: int = 4
    keywords_per_speaker: int = 2
    negatives_per_speaker: int = 2
    noise_seconds: float = 6.0
    sample_rate: int = 16000
    seed: int = 0


def speaker_pitch(speaker_index: int, rng: np.random.Generator) -> float:
    return float(100.0 + 120.0 * ((speaker_index * 0.61803) % 1.0) + rng.uniform(-5, 5))


def synth_syllable(kind: int, f0: float, rate: int, rng: np.random.Generator) -> np.ndarray:
    n = int(SYLLABLE_S * rate * rng.uniform(0.9, 1.1))
    t = np.arange(n) / rate
    glide = f0 * (1.0 + 0.05 * rng.uniform(-1, 1) * t / t[-1])
    phase = 2 * np.pi * np.cumsum(glide) / rate
    x = np.zeros(n)
    for h, weight in enumerate(SYLLABLE_TIMBRES[kind], start=1):
        x += weight * np.sin(h * phase)
    envelope = np.sin(np.pi * np.arange(n) / n) ** 2
    return x * envelope


def synth_utterance(
    syllables: Sequence[int],
    f0: float,
    rate: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, float]:
    """Concatenate syllables with short gaps and silence padding; returns (audio, speech end in s)."""
    lead = np.zeros(int(rng.uniform(0.2, 0.5) * rate))
    parts: List[np.ndarray] = [lead]
    for s in syllables:
        parts.append(synth_syllable(s, f0, rate, rng))
        parts.append(np.zeros(int(GAP_S * rate)))
    speech_end = sum(len(p) for p in parts[:-1]) / rate
    parts.append(np.zeros(int(rng.uniform(0.3, 0.6) * rate)))
    audio = np.concatenate(parts)
    audio = 0.5 * audio / np.max(np.abs(audio))
    return audio.astype(np.float32), speech_end


def random_negative_syllables(rng: np.random.Generator, count: int = 0) -> List[int]:
    while True:
        n = count or int(rng.integers(3, 8))
        seq = [int(v) for v in rng.integers(0, len(SYLLABLE_TIMBRES), size=n)]
        padded = tuple(seq)
        if not any(padded[i:i + len(KEYWORD_PATTERN)] == KEYWORD_PATTERN for i in range(len(seq))):
            return seq


def synth_noise(kind: str, seconds: float, rate: int, rng: np.random.Generator) -> np.ndarray:
    n = int(seconds * rate)
    t = np.arange(n) / rate
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind in ("pink", "brown"):
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / rate)
        freqs[0] = freqs[1]
        spectrum /= np.sqrt(freqs) if kind == "pink" else freqs
        x = np.fft.irfft(spectrum, n)
    elif kind == "hum":
        base = rng.choice([50.0, 60.0])
        x = sum(np.sin(2 * np.pi * base * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 6))
        x = x + 0.05 * rng.standard_normal(n)
    elif kind == "tonal":
        x = sum(np.sin(2 * np.pi * f * t) for f in rng.uniform(600, 4000, size=3))
    elif kind == "babble":
        carrier = rng.standard_normal(n)
        x = carrier * (1.0 + np.sin(2 * np.pi * rng.uniform(2, 6) * t))
    else:
        raise ValueError(f"unknown noise kind '{kind}'")
    x = np.asarray(x, dtype=np.float64)
    return (0.3 * x / np.max(np.abs(x))).astype(np.float32)


def _write_speakers(
    root: Path,
    partition: str,
    speaker_ids: Sequence[int],
    spec: ToyCorpusSpec,
    rng: np.random.Generator,
) -> List[ManifestEntry]:
    entries: List[ManifestEntry] = []
    for spk in speaker_ids:
        speaker = f"spk{spk:03d}"
        f0 = speaker_pitch(spk, rng)
        for k in range(spec.keywords_per_speaker):
            audio, end_s = synth_utterance(KEYWORD_PATTERN, f0, spec.sample_rate, rng)
            path = root / partition / "keyword" / f"{speaker}_kw{k:02d}.wav"
            write_wav(path, AudioBuffer(audio, spec.sample_rate))
            entries.append(ManifestEntry(
                id=f"{speaker}_kw{k:02d}", path=path, type=UtteranceType.KEYWORD,
                speaker=speaker, keyword_end_s=round(end_s, 4),
            ))
        for k in range(spec.negatives_per_speaker):
            syllables = random_negative_syllables(rng, count=int(rng.integers(6, 12)))
            audio, _ = synth_utterance(syllables, f0, spec.sample_rate, rng)
            path = root / partition / "negative" / f"{speaker}_neg{k:02d}.wav"
            write_wav(path, AudioBuffer(audio, spec.sample_rate))
            entries.append(ManifestEntry(
                id=f"{speaker}_neg{k:02d}", path=path, type=UtteranceType.NEGATIVE, speaker=speaker,
            ))
    return entries


def make_toy_corpus(output_dir: Path, spec: ToyCorpusSpec = ToyCorpusSpec()) -> Dict[str, Path]:
    """Write WAVs plus ``train.jsonl`` / ``test.jsonl`` under ``output_dir``."""
    output_dir = Path(output_dir)
    rng = np.random.default_rng(spec.seed)
    train_ids = list(range(spec.train_speakers))
    test_ids = list(range(spec.train_speakers, spec.train_speakers + spec.test_speakers))

    train = _write_speakers(output_dir, "train", train_ids, spec, rng)
    test = _write_speakers(output_dir, "test", test_ids, spec, rng)

    for partition, bucket in (("train", train), ("test", test)):
        for kind in NOISE_KINDS:
            audio = synth_noise(kind, spec.noise_seconds, spec.sample_rate, rng)
            path = output_dir / partition / "noise" / f"{kind}.wav"
            write_wav(path, AudioBuffer(audio, spec.sample_rate))
            bucket.append(ManifestEntry(id=f"{partition}_{kind}", path=path, type=UtteranceType.NOISE))

    validate_partition(train, test)
    manifests = {"train": output_dir / "train.jsonl", "test": output_dir / "test.jsonl"}
    write_manifest(manifests["train"], train)
    write_manifest(manifests["test"], test)
    logger.info(
        f"✅ Toy corpus written to {output_dir}: {len(train)} train / {len(test)} test entries"
    )
    return manifests
