# dccrn_kws/kws_head.py
"""Detector head: projection of the merged encoder feature, the dilated temporal
convolution stack, and the smoothing/decision rule on its posteriors."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from dccrn_kws.config import ModelConfig, ProjectionMode
from dccrn_kws.errors import BiasError, ShapeError, StreamStateError

logger = logging.getLogger(__name__)


def _expand_bias(bias: torch.Tensor, batch: int, frames: int) -> torch.Tensor:
    if bias.dim() == 1:
        bias = bias.unsqueeze(0)
    if bias.shape[0] == 1 and batch > 1:
        bias = bias.expand(batch, -1)
    return bias.unsqueeze(1).expand(-1, frames, -1)


class Projection(nn.Module):
    """Linear map of ``E'`` (optionally concatenated with the bias) to the detector width."""

    def __init__(self, in_dim: int, cfg: ModelConfig, with_bias: bool):
        super().__init__()
        self.in_dim = in_dim
        self.with_bias = with_bias
        self.bias_dim = cfg.bias_dim if with_bias else 0
        self.linear = nn.Linear(in_dim + self.bias_dim, cfg.kws_dim)

    def forward(self, feat: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        if feat.shape[-1] != self.in_dim:
            raise ShapeError(f"projection expects {self.in_dim}-dim frames, got {tuple(feat.shape)}")
        if self.with_bias != (bias is not None):
            state = "requires" if self.with_bias else "takes no"
            raise BiasError(f"projection {state} a bias embedding")
        if bias is not None:
            if bias.shape[-1] != self.bias_dim:
                raise BiasError(f"bias embedding has dim {bias.shape[-1]}, expected {self.bias_dim}")
            feat = torch.cat([feat, _expand_bias(bias, feat.shape[0], feat.shape[1])], dim=-1)
        return F.relu(self.linear(feat))


class ComplexContextLinear(nn.Module):
    """Real and imag halves of the current and previous frames, each joined with half the bias.

    Per offset ``k``: ``u_k = Lr_k([re(E'_{t-k}) || b_r])``, ``v_k = Li_k([im(E'_{t-k}) || b_i])``;
    the output is ``relu(sum_k [u_k || v_k])``. Frames before the stream start are zero.
    """

    def __init__(self, in_dim: int, cfg: ModelConfig):
        super().__init__()
        self.in_dim = in_dim
        self.part = in_dim // 2
        self.half_bias = cfg.bias_dim // 2
        self.bias_dim = cfg.bias_dim
        self.context = cfg.ccl_context
        out = cfg.kws_dim // 2
        self.real_branches = nn.ModuleList(nn.Linear(self.part + self.half_bias, out) for _ in range(self.context))
        self.imag_branches = nn.ModuleList(nn.Linear(self.part + self.half_bias, out) for _ in range(self.context))
        self.kws_dim = cfg.kws_dim

    @property
    def weight_count(self) -> int:
        return sum(m.weight.numel() for m in (*self.real_branches, *self.imag_branches))

    @property
    def bias_count(self) -> int:
        return sum(m.bias.numel() for m in (*self.real_branches, *self.imag_branches))

    @property
    def naive_weight_count(self) -> int:
        """Weights of a single linear layer over all context frames plus the bias."""
        return (self.context * self.in_dim + self.bias_dim) * self.kws_dim

    def forward(
        self,
        feat: torch.Tensor,
        bias: Optional[torch.Tensor],
        history: Optional[torch.Tensor] = None,
        activate: bool = True,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if bias is None:
            raise BiasError("complex context linear requires a bias embedding")
        if bias.shape[-1] != self.bias_dim:
            raise BiasError(f"bias embedding has dim {bias.shape[-1]}, expected {self.bias_dim}")
        b, t, d = feat.shape
        if d != self.in_dim:
            raise ShapeError(f"context linear expects {self.in_dim}-dim frames, got {tuple(feat.shape)}")
        keep = self.context - 1
        if history is None:
            history = feat.new_zeros(b, keep, d)
        elif tuple(history.shape) != (b, keep, d):
            raise StreamStateError(f"context history {tuple(history.shape)} != {(b, keep, d)}")
        padded = torch.cat([history, feat], dim=1)
        full_bias = _expand_bias(bias, b, t)
        b_r, b_i = full_bias[..., : self.half_bias], full_bias[..., self.half_bias:]
        out = None
        for k in range(self.context):
            shifted = padded[:, keep - k: keep - k + t]
            u = self.real_branches[k](torch.cat([shifted[..., : self.part], b_r], dim=-1))
            v = self.imag_branches[k](torch.cat([shifted[..., self.part:], b_i], dim=-1))
            uv = torch.cat([u, v], dim=-1)
            out = uv if out is None else out + uv
        new_history = padded[:, padded.shape[1] - keep:] if keep else padded[:, :0]
        return (F.relu(out) if activate else out), new_history


class DtcBlock(nn.Module):
    """Depthwise dilated causal conv, two pointwise convs, residual."""

    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        self.pad = (kernel - 1) * dilation
        self.depthwise = nn.Conv1d(channels, channels, kernel, dilation=dilation, groups=channels)
        self.bn0 = nn.BatchNorm1d(channels)
        self.pointwise1 = nn.Conv1d(channels, channels, 1)
        self.bn1 = nn.BatchNorm1d(channels)
        self.pointwise2 = nn.Conv1d(channels, channels, 1)
        self.bn2 = nn.BatchNorm1d(channels)

    def forward(self, x: torch.Tensor, history: Optional[torch.Tensor] = None):
        """``x``: ``[B, C, T]``. Returns output and the last ``pad`` input frames."""
        if history is None:
            padded = F.pad(x, (self.pad, 0))
        else:
            if tuple(history.shape) != (x.shape[0], x.shape[1], self.pad):
                raise StreamStateError(f"DTC history {tuple(history.shape)} does not fit input {tuple(x.shape)}")
            padded = torch.cat([history, x], dim=-1)
        y = F.relu(self.bn0(self.depthwise(padded)))
        y = F.relu(self.bn1(self.pointwise1(y)))
        y = self.bn2(self.pointwise2(y))
        new_history = padded[..., padded.shape[-1] - self.pad:]
        return F.relu(y + x), new_history


class DtcStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.channels = cfg.kws_dim
        self.kernel = cfg.dtc_kernel
        self.dilations = cfg.dilation_schedule
        self.blocks = nn.ModuleList(DtcBlock(cfg.kws_dim, cfg.dtc_kernel, d) for d in self.dilations)
        self.classifier = nn.Linear(cfg.kws_dim, 2)

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.kernel - 1) * d for d in self.dilations)

    def forward(
        self, x: torch.Tensor, state: Optional[List[torch.Tensor]] = None
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """``x``: ``[B, T, C]`` -> two-class softmax ``[B, T, 2]`` and per-block histories."""
        if x.shape[-1] != self.channels:
            raise ShapeError(f"DTC stack expects {self.channels}-dim frames, got {tuple(x.shape)}")
        if state is not None and len(state) != len(self.blocks):
            raise StreamStateError(f"DTC state has {len(state)} blocks, model has {len(self.blocks)}")
        y = x.transpose(1, 2)
        new_state = []
        for i, block in enumerate(self.blocks):
            y, h = block(y, None if state is None else state[i])
            new_state.append(h)
        probs = torch.softmax(self.classifier(y.transpose(1, 2)), dim=-1)
        return probs, new_state


# --- Decisions ---

@dataclass
class PosteriorTrack:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ShapeError("posteriors must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class Detection:
    frame: int
    score: float
    threshold: float

    def time_s(self, hop_s: float = 0.01) -> float:
        return self.frame * hop_s


def smooth_posteriors(posteriors: np.ndarray, window: int) -> np.ndarray:
    """Mean over the current and previous ``window - 1`` frames (fewer at the start)."""
    series = pd.Series(np.asarray(posteriors, dtype=np.float64))
    return series.rolling(window, min_periods=1).mean().to_numpy()


def decide(smoothed: np.ndarray, threshold: float, refractory: int, offset: int = 0,
           last_fire: Optional[int] = None) -> List[Detection]:
    """Fire at frames at or above ``threshold`` that are ``refractory`` frames past the last detection."""
    detections = []
    for t in np.flatnonzero(smoothed >= threshold):
        frame = int(t) + offset
        if last_fire is None or frame - last_fire >= refractory:
            detections.append(Detection(frame, float(smoothed[t]), float(threshold)))
            last_fire = frame
    return detections


def smooth_and_decide(
    post: PosteriorTrack,
    threshold: float,
    smooth_win: int = 30,
    refractory: int = 100,
) -> List[Detection]:
    if len(post) == 0:
        return []
    return decide(smooth_posteriors(post.values, smooth_win), threshold, refractory)


@dataclass
class DecisionState:
    """Incremental form of :func:`smooth_and_decide` for chunked streams."""

    threshold: float
    smooth_win: int = 30
    refractory: int = 100
    frames_seen: int = 0
    last_fire: Optional[int] = None
    tail: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def push(self, posteriors: np.ndarray) -> List[Detection]:
        posteriors = np.asarray(posteriors, dtype=np.float64).reshape(-1)
        if posteriors.size == 0:
            return []
        joined = np.concatenate([self.tail, posteriors])
        smoothed = smooth_posteriors(joined, self.smooth_win)[self.tail.size:]
        detections = decide(smoothed, self.threshold, self.refractory, self.frames_seen, self.last_fire)
        if detections:
            self.last_fire = detections[-1].frame
        self.frames_seen += posteriors.size
        self.tail = joined[max(0, joined.size - (self.smooth_win - 1)):] if self.smooth_win > 1 else np.zeros(0)
        return detections


def build_projection(in_dim: int, cfg: ModelConfig) -> nn.Module:
    if cfg.projection == ProjectionMode.CCL:
        return ComplexContextLinear(in_dim, cfg)
    return Projection(in_dim, cfg, with_bias=cfg.projection == ProjectionMode.BIAS_CONCAT)
