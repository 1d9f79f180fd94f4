# dccrn_kws/audio_dsp.py
"""Signal front-end: framing, STFT / inverse STFT, log-mel features and WAV I/O.

Framing is causal: no padding is added at either end, so a signal of ``N``
samples yields ``1 + (N - win) // hop`` frames and frame ``t`` covers samples
``[t*hop, t*hop + win)``.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torchaudio.functional as AF
from scipy.io import wavfile

from dccrn_kws.config import SpectroConfig
from dccrn_kws.errors import AudioError, ConfigError

logger = logging.getLogger(__name__)

PADDING_CONVENTION = "none"
LOG_MEL_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise AudioError(f"audio must be mono (1-D), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.samples.copy()).to(dtype)


@dataclass
class ComplexSpectrogram:
    """Real and imaginary parts with shape ``[..., F, T]``."""

    real: torch.Tensor
    imag: torch.Tensor
    padding: str = PADDING_CONVENTION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise AudioError(f"real/imag shape mismatch: {tuple(self.real.shape)} vs {tuple(self.imag.shape)}")

    @property
    def n_bins(self) -> int:
        return int(self.real.shape[-2])

    @property
    def n_frames(self) -> int:
        return int(self.real.shape[-1])

    def magnitude(self) -> torch.Tensor:
        return torch.sqrt(self.real ** 2 + self.imag ** 2)

    def as_complex(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)


def frame_count(num_samples: int, cfg: SpectroConfig) -> int:
    if num_samples < cfg.win_length:
        return 0
    return 1 + (num_samples - cfg.win_length) // cfg.hop_length


def covered_length(n_frames: int, cfg: SpectroConfig) -> int:
    """Number of samples reconstructed from ``n_frames`` frames."""
    return (n_frames - 1) * cfg.hop_length + cfg.win_length


def analysis_window(cfg: SpectroConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    base = torch.hann_window(cfg.win_length, periodic=True, dtype=torch.float64)
    if cfg.window == "sqrt_hann":
        base = base.sqrt()
    return base.to(dtype)


def _as_tensor(audio: Union[AudioBuffer, torch.Tensor], cfg: SpectroConfig) -> torch.Tensor:
    if isinstance(audio, AudioBuffer):
        if audio.sample_rate != cfg.sample_rate:
            raise AudioError(f"audio at {audio.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
        return audio.tensor()
    return audio


def stft(audio: Union[AudioBuffer, torch.Tensor], cfg: SpectroConfig) -> ComplexSpectrogram:
    """Causal STFT of ``audio`` (``[..., N]``) into ``[..., fft_size//2 + 1, T]``."""
    x = _as_tensor(audio, cfg)
    if x.shape[-1] < cfg.win_length:
        raise AudioError(f"audio of {x.shape[-1]} samples is shorter than one window ({cfg.win_length})")
    frames = x.unfold(-1, cfg.win_length, cfg.hop_length)
    frames = frames * analysis_window(cfg, x.dtype)
    spec = torch.fft.rfft(frames, n=cfg.fft_size, dim=-1).transpose(-1, -2)
    return ComplexSpectrogram(
        real=spec.real.contiguous(),
        imag=spec.imag.contiguous(),
        meta={"win": cfg.win_length, "hop": cfg.hop_length, "fft": cfg.fft_size, "window": cfg.window},
    )


def overlap_envelope(n_frames: int, cfg: SpectroConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sum of squared windows at every output sample."""
    w2 = analysis_window(cfg, dtype) ** 2
    cols = w2.reshape(1, -1, 1).expand(1, cfg.win_length, n_frames).contiguous()
    return torch.nn.functional.fold(
        cols, output_size=(1, covered_length(n_frames, cfg)),
        kernel_size=(1, cfg.win_length), stride=(1, cfg.hop_length),
    ).reshape(-1)


@lru_cache(maxsize=16)
def validate_reconstruction(cfg: SpectroConfig) -> None:
    """Reject window/hop pairs whose overlap envelope vanishes inside a signal."""
    n = max(4, 2 * cfg.win_length // cfg.hop_length + 2)
    env = overlap_envelope(n, cfg, torch.float64)
    interior = env[cfg.win_length:-cfg.win_length]
    if interior.numel() == 0 or float(interior.min()) < 1e-6:
        raise ConfigError(
            f"window '{cfg.window}' ({cfg.win_length}) with hop {cfg.hop_length} "
            "cannot be inverted by overlap-add"
        )


def istft(spec: ComplexSpectrogram, cfg: SpectroConfig) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft`; returns ``[..., (T-1)*hop + win]``."""
    validate_reconstruction(cfg)
    if spec.n_bins != cfg.n_bins:
        raise AudioError(f"spectrogram has {spec.n_bins} bins, config expects {cfg.n_bins}")
    lead = spec.real.shape[:-2]
    n_frames = spec.n_frames
    cplx = torch.complex(spec.real, spec.imag).transpose(-1, -2)
    frames = torch.fft.irfft(cplx, n=cfg.fft_size, dim=-1)[..., : cfg.win_length]
    frames = frames * analysis_window(cfg, frames.dtype)
    cols = frames.reshape(-1, n_frames, cfg.win_length).transpose(1, 2).contiguous()
    length = covered_length(n_frames, cfg)
    ola = torch.nn.functional.fold(
        cols, output_size=(1, length), kernel_size=(1, cfg.win_length), stride=(1, cfg.hop_length)
    ).reshape(-1, length)
    env = overlap_envelope(n_frames, cfg, ola.dtype)
    safe = env > 1e-8
    out = torch.where(safe, ola / torch.where(safe, env, torch.ones_like(env)), torch.zeros_like(ola))
    return out.reshape(*lead, length)


@lru_cache(maxsize=8)
def _mel_filterbank(n_bins: int, n_mels: int, sample_rate: int) -> torch.Tensor:
    return AF.melscale_fbanks(
        n_freqs=n_bins, f_min=0.0, f_max=sample_rate / 2.0, n_mels=n_mels,
        sample_rate=sample_rate, norm="slaney", mel_scale="slaney",
    )


def log_mel(
    audio: Union[AudioBuffer, torch.Tensor],
    n_mels: int = 64,
    cfg: Optional[SpectroConfig] = None,
) -> torch.Tensor:
    """Log mel energies ``[..., n_mels, T]`` on the STFT frame grid (no padding).

    Slaney area normalisation keeps white noise flat across bands; energies are
    floored at ``LOG_MEL_FLOOR`` before the log.
    """
    cfg = cfg or SpectroConfig()
    spec = stft(audio, cfg)
    power = spec.real ** 2 + spec.imag ** 2
    fb = _mel_filterbank(cfg.n_bins, n_mels, cfg.sample_rate).to(power.dtype)
    mel = torch.matmul(power.transpose(-1, -2), fb).transpose(-1, -2)
    return torch.log(torch.clamp(mel, min=LOG_MEL_FLOOR))


def read_wav(path: Union[str, Path], expected_rate: int = 16000) -> AudioBuffer:
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise AudioError(f"cannot read WAV {path}: {e}") from e
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype} (PCM16 or float32 only)")
    return AudioBuffer(samples, rate)


def write_wav(path: Union[str, Path], audio: AudioBuffer) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), audio.sample_rate, audio.samples.astype(np.float32))
