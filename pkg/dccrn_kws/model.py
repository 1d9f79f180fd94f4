# dccrn_kws/model.py
"""Assembled networks: the multi-task enhancement + detection model, the
detector-only baseline, and the chunked streaming engine around either."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from dccrn_kws.audio_dsp import ComplexSpectrogram, covered_length, frame_count, stft
from dccrn_kws.config import Architecture, ModelConfig, ProjectionMode, RunConfig, SpectroConfig
from dccrn_kws.context_bias import ContextBias
from dccrn_kws.dccrn_core import (
    DccrnCore,
    EncoderFeatureStack,
    apply_mask_and_reconstruct,
    encoder_input,
    frame_energy,
    shape_ledger,
)
from dccrn_kws.errors import InferenceModeError, ShapeError, StreamStateError
from dccrn_kws.feature_merge import FeatureMerge
from dccrn_kws.kws_head import ComplexContextLinear, DecisionState, Detection, DtcStack, build_projection

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    posteriors: torch.Tensor
    enhanced: Optional[torch.Tensor] = None
    stack: Optional[EncoderFeatureStack] = None
    merged: Optional[torch.Tensor] = None


def _batched(audio: torch.Tensor) -> torch.Tensor:
    return audio.unsqueeze(0) if audio.dim() == 1 else audio


class DccrnKws(nn.Module):
    """Shared complex encoder feeding both the enhancement decoder and the detector."""

    def __init__(self, cfg: ModelConfig, spectro_cfg: SpectroConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.spectro_cfg = spectro_cfg
        if cfg.freq_bins >= spectro_cfg.n_bins:
            raise ShapeError(f"freq_bins {cfg.freq_bins} must be below the {spectro_cfg.n_bins} STFT bins")
        self.core = DccrnCore(cfg)
        self.merge = FeatureMerge(cfg)
        self.context_bias = ContextBias(cfg, spectro_cfg, seed) if cfg.uses_bias else None
        self.projection = build_projection(self.merge.out_dim, cfg)
        self.dtc = DtcStack(cfg)
        self._assert_ledger()

    def _assert_ledger(self) -> None:
        last = shape_ledger(self.cfg)[-1]
        if self.merge.out_dim != last.flat_dim:
            raise ShapeError(f"merged width {self.merge.out_dim} != final layer width {last.flat_dim}")
        for name, shape in self.projection_shapes().items():
            expected = self.expected_projection_shapes()[name]
            if shape != expected:
                raise ShapeError(f"projection {name} has shape {shape}, expected {expected}")

    def expected_projection_shapes(self) -> Dict[str, Tuple[int, int]]:
        d, k, b = self.merge.out_dim, self.cfg.kws_dim, self.cfg.bias_dim
        if self.cfg.projection == ProjectionMode.PLAIN:
            return {"linear": (d, k)}
        if self.cfg.projection == ProjectionMode.BIAS_CONCAT:
            return {"linear": (d + b, k)}
        shapes = {}
        for i in range(self.cfg.ccl_context):
            shapes[f"real_{i}"] = (d // 2 + b // 2, k // 2)
            shapes[f"imag_{i}"] = (d // 2 + b // 2, k // 2)
        return shapes

    def projection_shapes(self) -> Dict[str, Tuple[int, int]]:
        """Projection matrices as ``(in, out)``."""
        p = self.projection
        if isinstance(p, ComplexContextLinear):
            shapes = {}
            for i, (r, m) in enumerate(zip(p.real_branches, p.imag_branches)):
                shapes[f"real_{i}"] = (r.in_features, r.out_features)
                shapes[f"imag_{i}"] = (m.in_features, m.out_features)
            return shapes
        return {"linear": (p.linear.in_features, p.linear.out_features)}

    # --- forward paths ---

    def spectrum(self, audio: torch.Tensor) -> ComplexSpectrogram:
        return stft(_batched(audio), self.spectro_cfg)

    def resolve_bias(self, batch: int, speakers=None, iteration: int = 0) -> Optional[torch.Tensor]:
        if self.context_bias is None:
            return None
        return self.context_bias(batch, speakers, iteration)

    def detect_from_stack(
        self,
        stack: EncoderFeatureStack,
        bias: Optional[torch.Tensor],
        state: Optional[dict] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor, dict]:
        merged = self.merge(stack)
        new_state = {}
        if isinstance(self.projection, ComplexContextLinear):
            kws_in, new_state["ccl"] = self.projection(merged, bias, None if state is None else state["ccl"])
        else:
            kws_in = self.projection(merged, bias)
        probs, new_state["dtc"] = self.dtc(kws_in, None if state is None else state["dtc"])
        return probs[..., 1], merged, new_state

    def forward(
        self,
        noisy: torch.Tensor,
        speakers: Optional[Sequence[Optional[str]]] = None,
        iteration: int = 0,
        enhance: bool = True,
    ) -> ModelOutput:
        """``noisy``: ``[B, N]`` waveforms. Posteriors are ``[B, T]``; enhanced is ``[B, (T-1)*hop + win]``."""
        noisy = _batched(noisy)
        spec = self.spectrum(noisy)
        stack, _ = self.core.encode(encoder_input(spec, self.cfg.freq_bins))
        bias = self.resolve_bias(noisy.shape[0], speakers, iteration)
        posteriors, merged, _ = self.detect_from_stack(stack, bias)
        enhanced = None
        if enhance:
            mask = self.core.decoder_forward(stack)
            enhanced = apply_mask_and_reconstruct(mask, spec, self.spectro_cfg)
        return ModelOutput(posteriors=posteriors, enhanced=enhanced, stack=stack, merged=merged)

    def enhance(self, noisy: torch.Tensor) -> torch.Tensor:
        return self.forward(noisy, enhance=True).enhanced

    def strip_enhancement(self) -> None:
        self.core.strip_enhancement()

    def stream_step(self, audio: torch.Tensor, state: Optional[dict]) -> Tuple[torch.Tensor, dict]:
        """Posteriors for the frames covered by ``audio`` given the previous chunk's state."""
        spec = self.spectrum(audio)
        enc_state = None if state is None else state["encoder"]
        stack, enc_state = self.core.encode(encoder_input(spec, self.cfg.freq_bins), enc_state)
        bias = self.resolve_bias(1)
        posteriors, _, head_state = self.detect_from_stack(stack, bias, None if state is None else state["head"])
        return posteriors[0], {"encoder": enc_state, "head": head_state}

    @torch.no_grad()
    def energy_tracks(self, audio: torch.Tensor) -> Dict[str, np.ndarray]:
        """Per-layer frame energy and the analogous magnitude sum over the merged feature."""
        spec = self.spectrum(audio)
        stack, _ = self.core.encode(encoder_input(spec, self.cfg.freq_bins))
        tracks = {f"layer{i + 1}": frame_energy(layer)[0].cpu().numpy() for i, layer in enumerate(stack.layers)}
        real, imag = self.merge.merge_parts(stack)
        tracks["merged"] = torch.sqrt(real ** 2 + imag ** 2).sum(dim=-1)[0].cpu().numpy()
        return tracks

    def describe(self) -> Dict[str, object]:
        return {
            "architecture": Architecture.DCCRN_KWS.value,
            "layers": [s.__dict__ for s in shape_ledger(self.cfg)],
            "projection": {k: list(v) for k, v in self.projection_shapes().items()},
            "merge_weights": self.merge.learned_weights(),
            "receptive_field": self.dtc.receptive_field,
        }


class KwsBaseline(nn.Module):
    """Detector alone on log-magnitude frames; trained with the detection loss only."""

    LOG_FLOOR = 1e-6

    def __init__(self, cfg: ModelConfig, spectro_cfg: SpectroConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.spectro_cfg = spectro_cfg
        self.input = nn.Linear(cfg.freq_bins, cfg.kws_dim)
        self.dtc = DtcStack(cfg)
        self.context_bias = None

    def _features(self, audio: torch.Tensor) -> torch.Tensor:
        spec = stft(_batched(audio), self.spectro_cfg)
        mag = spec.magnitude()[..., 1:self.cfg.freq_bins + 1, :]
        return torch.log(mag + self.LOG_FLOOR).transpose(1, 2)

    def forward(self, noisy: torch.Tensor, speakers=None, iteration: int = 0, enhance: bool = False) -> ModelOutput:
        kws_in = torch.relu(self.input(self._features(noisy)))
        probs, _ = self.dtc(kws_in)
        return ModelOutput(posteriors=probs[..., 1])

    def strip_enhancement(self) -> None:
        logger.debug("Detector-only baseline has no enhancement branch to strip")

    def stream_step(self, audio: torch.Tensor, state: Optional[dict]) -> Tuple[torch.Tensor, dict]:
        kws_in = torch.relu(self.input(self._features(audio)))
        probs, dtc_state = self.dtc(kws_in, None if state is None else state["dtc"])
        return probs[0, :, 1], {"dtc": dtc_state}

    def describe(self) -> Dict[str, object]:
        return {
            "architecture": Architecture.KWS.value,
            "input": [self.cfg.freq_bins, self.cfg.kws_dim],
            "receptive_field": self.dtc.receptive_field,
        }


def build_model(run_cfg: RunConfig) -> nn.Module:
    torch.manual_seed(run_cfg.train.seed)
    cls = KwsBaseline if run_cfg.model.architecture == Architecture.KWS else DccrnKws
    model = cls(run_cfg.model, run_cfg.spectro, seed=run_cfg.train.seed)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built {cls.__name__} with {n_params:,} parameters")
    return model


@dataclass
class StreamState:
    pending: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    model_state: Optional[dict] = None
    frames: int = 0


class StreamingDetector:
    """Feeds arbitrary-size chunks through the causal inference graph.

    Every stream owns its ``StreamState``; the model parameters are shared and
    read-only.
    """

    def __init__(
        self,
        model: nn.Module,
        threshold: float = 0.5,
        smooth_win: int = 30,
        refractory: int = 100,
    ):
        if getattr(getattr(model, "core", None), "decoder", None) is not None:
            model.strip_enhancement()
        model.eval()
        self.model = model
        self.spectro_cfg: SpectroConfig = model.spectro_cfg
        self.threshold = threshold
        self.smooth_win = smooth_win
        self.refractory = refractory
        self.reset()

    def reset(self) -> None:
        self.state = StreamState()
        self.decision = DecisionState(self.threshold, self.smooth_win, self.refractory)

    @torch.no_grad()
    def process(self, chunk: np.ndarray) -> Tuple[np.ndarray, List[Detection]]:
        chunk = np.asarray(chunk, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(chunk)):
            raise StreamStateError("stream chunk contains non-finite samples")
        buffer = np.concatenate([self.state.pending, chunk])
        n_frames = frame_count(len(buffer), self.spectro_cfg)
        if n_frames == 0:
            self.state.pending = buffer
            return np.zeros(0), []
        used = covered_length(n_frames, self.spectro_cfg)
        dtype = next(self.model.parameters()).dtype
        audio = torch.from_numpy(buffer[:used].copy()).to(dtype)
        posteriors, self.state.model_state = self.model.stream_step(audio, self.state.model_state)
        self.state.pending = buffer[n_frames * self.spectro_cfg.hop_length:]
        self.state.frames += n_frames
        values = posteriors.cpu().numpy().astype(np.float64)
        return values, self.decision.push(values)

    def run(self, audio: np.ndarray, chunk_samples: int) -> Tuple[np.ndarray, List[Detection]]:
        """Stream a whole signal in fixed-size chunks."""
        posts, detections = [], []
        for start in range(0, len(audio), chunk_samples):
            p, d = self.process(audio[start:start + chunk_samples])
            posts.append(p)
            detections.extend(d)
        return (np.concatenate(posts) if posts else np.zeros(0)), detections


def offline_posteriors(model: nn.Module, audio: torch.Tensor) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return model(audio, enhance=False).posteriors


def require_training_graph(model: nn.Module) -> None:
    core = getattr(model, "core", None)
    if core is not None and core.inference_only:
        raise InferenceModeError("model was stripped for inference; reload the checkpoint to train")
