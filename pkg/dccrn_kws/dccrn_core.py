# dccrn_kws/dccrn_core.py
"""Complex convolution recurrent enhancement network.

Shapes follow ``[batch, channels, freq, time]``. Channel counts in the config
are total real feature maps; each complex layer carries half of them as pairs.
All time-axis operations are causal: a frame never sees later frames.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from dccrn_kws.audio_dsp import ComplexSpectrogram, istft
from dccrn_kws.config import ModelConfig, SpectroConfig
from dccrn_kws.errors import InferenceModeError, ShapeError, StreamStateError

logger = logging.getLogger(__name__)


@dataclass
class ComplexTensor:
    real: torch.Tensor
    imag: torch.Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {tuple(self.real.shape)} and imag {tuple(self.imag.shape)} differ")

    @property
    def shape(self) -> torch.Size:
        return self.real.shape

    def mul_j(self) -> "ComplexTensor":
        return ComplexTensor(-self.imag, self.real)

    def flatten_frames(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """``[B, C, F, T]`` to per-frame ``[B, T, C*F]`` (channel-major, frequency-minor)."""
        b, c, f, t = self.real.shape
        return (
            self.real.permute(0, 3, 1, 2).reshape(b, t, c * f),
            self.imag.permute(0, 3, 1, 2).reshape(b, t, c * f),
        )

    def cat(self, other: "ComplexTensor", dim: int = 1) -> "ComplexTensor":
        return ComplexTensor(torch.cat([self.real, other.real], dim), torch.cat([self.imag, other.imag], dim))


@dataclass
class LayerShape:
    index: int
    total_maps: int
    pairs: int
    freq: int
    flat_dim: int


def shape_ledger(cfg: ModelConfig) -> List[LayerShape]:
    """Expected per-layer shapes; ``flat_dim`` counts real and imag parts together."""
    ledger = []
    freq = cfg.freq_bins
    for i, maps in enumerate(cfg.encoder_channels):
        freq //= 2
        ledger.append(LayerShape(i + 1, maps, maps // 2, freq, maps * freq))
    return ledger


def frame_energy(layer: ComplexTensor) -> torch.Tensor:
    """Per-frame energy ``m_t = sum_c sum_f |E_{c,f,t}|`` as ``[B, T]``."""
    return torch.sqrt(layer.real ** 2 + layer.imag ** 2).sum(dim=(1, 2))


class ComplexConv2d(nn.Module):
    def __init__(self, in_pairs: int, out_pairs: int, kernel=(5, 2), stride=(2, 1), bias: bool = True):
        super().__init__()
        self.in_pairs = in_pairs
        self.kernel = tuple(kernel)
        pad_f = self.kernel[0] // 2
        self.conv_r = nn.Conv2d(in_pairs, out_pairs, self.kernel, stride, padding=(pad_f, 0), bias=bias)
        self.conv_i = nn.Conv2d(in_pairs, out_pairs, self.kernel, stride, padding=(pad_f, 0), bias=bias)

    @property
    def history(self) -> int:
        return self.kernel[1] - 1

    def forward(self, x: ComplexTensor, state: Optional[ComplexTensor] = None) -> Tuple[ComplexTensor, ComplexTensor]:
        """Returns the output and the trailing input frames needed by the next chunk."""
        if x.shape[1] != self.in_pairs:
            raise ShapeError(f"conv expects {self.in_pairs} input pairs, got shape {tuple(x.shape)}")
        if state is None:
            xr = F.pad(x.real, (self.history, 0))
            xi = F.pad(x.imag, (self.history, 0))
        else:
            if state.shape[:3] != x.shape[:3] or state.shape[3] != self.history:
                raise StreamStateError(f"conv history {tuple(state.shape)} does not fit input {tuple(x.shape)}")
            xr = torch.cat([state.real, x.real], dim=-1)
            xi = torch.cat([state.imag, x.imag], dim=-1)
        y_r = self.conv_r(xr) - self.conv_i(xi)
        y_i = self.conv_i(xr) + self.conv_r(xi)
        keep = xr.shape[-1] - self.history
        new_state = ComplexTensor(xr[..., keep:], xi[..., keep:])
        return ComplexTensor(y_r, y_i), new_state


class ComplexConvTranspose2d(nn.Module):
    def __init__(self, in_pairs: int, out_pairs: int, kernel=(5, 2), stride=(2, 1)):
        super().__init__()
        pad_f = kernel[0] // 2
        kwargs = dict(stride=stride, padding=(pad_f, 0), output_padding=(stride[0] - 1, 0))
        self.conv_r = nn.ConvTranspose2d(in_pairs, out_pairs, kernel, **kwargs)
        self.conv_i = nn.ConvTranspose2d(in_pairs, out_pairs, kernel, **kwargs)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        t = x.shape[-1]
        y_r = self.conv_r(x.real) - self.conv_i(x.imag)
        y_i = self.conv_i(x.real) + self.conv_r(x.imag)
        # transposed conv spills kernel_t - 1 frames into the future; drop them
        return ComplexTensor(y_r[..., :t], y_i[..., :t])


class ComplexLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.lin_r = nn.Linear(in_features, out_features, bias=bias)
        self.lin_i = nn.Linear(in_features, out_features, bias=bias)

    def forward(self, xr: torch.Tensor, xi: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.lin_r(xr) - self.lin_i(xi), self.lin_i(xr) + self.lin_r(xi)


class EncoderLayer(nn.Module):
    def __init__(self, in_pairs: int, out_pairs: int, cfg: ModelConfig):
        super().__init__()
        self.conv = ComplexConv2d(in_pairs, out_pairs, (cfg.kernel_freq, cfg.kernel_time), (2, 1))
        self.norm_r = nn.BatchNorm2d(out_pairs)
        self.norm_i = nn.BatchNorm2d(out_pairs)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x: ComplexTensor, state: Optional[ComplexTensor] = None):
        y, new_state = self.conv(x, state)
        return ComplexTensor(self.act(self.norm_r(y.real)), self.act(self.norm_i(y.imag))), new_state


@dataclass
class EncoderFeatureStack:
    layers: List[ComplexTensor]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> ComplexTensor:
        return self.layers[i]

    @property
    def n_frames(self) -> int:
        return int(self.layers[-1].shape[-1])

    def energies(self) -> List[torch.Tensor]:
        return [frame_energy(layer) for layer in self.layers]


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ledger = shape_ledger(cfg)
        pairs = [1] + [shape.pairs for shape in self.ledger]
        self.layers = nn.ModuleList(EncoderLayer(pairs[i], pairs[i + 1], cfg) for i in range(len(self.ledger)))

    def forward(
        self,
        spec: ComplexTensor,
        state: Optional[List[ComplexTensor]] = None,
    ) -> Tuple[EncoderFeatureStack, List[ComplexTensor]]:
        if spec.real.dim() != 4 or spec.shape[1] != 1 or spec.shape[2] != self.cfg.freq_bins:
            raise ShapeError(
                f"encoder expects [B, 1, {self.cfg.freq_bins}, T], got {tuple(spec.shape)}"
            )
        if state is not None and len(state) != len(self.layers):
            raise StreamStateError(f"encoder state has {len(state)} layers, model has {len(self.layers)}")
        outputs, new_state = [], []
        x = spec
        for i, layer in enumerate(self.layers):
            x, s = layer(x, None if state is None else state[i])
            expected = self.ledger[i]
            if x.shape[1] != expected.pairs or x.shape[2] != expected.freq:
                raise ShapeError(f"layer {i + 1} produced {tuple(x.shape)}, ledger says {expected}")
            outputs.append(x)
            new_state.append(s)
        return EncoderFeatureStack(outputs), new_state


LstmState = Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]


class ComplexLSTM(nn.Module):
    """One complex recurrent layer: ``out_r = Lr(xr) - Li(xi)``, ``out_i = Lr(xi) + Li(xr)``."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.lstm_r = nn.LSTM(input_size, hidden_size, batch_first=True)
        self.lstm_i = nn.LSTM(input_size, hidden_size, batch_first=True)

    def _check_state(self, state: LstmState, batch: int) -> None:
        expected = (1, 2 * batch, self.hidden_size)
        if len(state) != 4 or any(tuple(s.shape) != expected for s in state):
            shapes = [tuple(s.shape) for s in state]
            raise StreamStateError(f"recurrent state shapes {shapes} do not match expected {expected} x4")

    def forward(
        self, xr: torch.Tensor, xi: torch.Tensor, state: Optional[LstmState] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, LstmState]:
        b = xr.shape[0]
        if state is not None:
            self._check_state(state, b)
            hr, cr, hi, ci = state
            out_r, (hr, cr) = self.lstm_r(torch.cat([xr, xi], 0), (hr, cr))
            out_i, (hi, ci) = self.lstm_i(torch.cat([xi, xr], 0), (hi, ci))
        else:
            out_r, (hr, cr) = self.lstm_r(torch.cat([xr, xi], 0))
            out_i, (hi, ci) = self.lstm_i(torch.cat([xi, xr], 0))
        # out_r = [Lr(xr); Lr(xi)], out_i = [Li(xi); Li(xr)]
        y_r = out_r[:b] - out_i[:b]
        y_i = out_r[b:] + out_i[b:]
        return y_r, y_i, (hr, cr, hi, ci)


class ComplexRecurrent(nn.Module):
    """Stacked complex LSTMs, a complex projection, and an expansion back to the encoder width."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        last = shape_ledger(cfg)[-1]
        self.flat = last.pairs * last.freq
        self.pairs, self.freq = last.pairs, last.freq
        sizes = [self.flat] + [cfg.lstm_hidden] * cfg.lstm_layers
        self.layers = nn.ModuleList(ComplexLSTM(sizes[i], sizes[i + 1]) for i in range(cfg.lstm_layers))
        self.projection = ComplexLinear(cfg.lstm_hidden, cfg.lstm_hidden)
        self.expand = ComplexLinear(cfg.lstm_hidden, self.flat)

    def forward(
        self, x: ComplexTensor, state: Optional[List[LstmState]] = None
    ) -> Tuple[ComplexTensor, List[LstmState]]:
        if state is not None and len(state) != len(self.layers):
            raise StreamStateError(f"recurrent state has {len(state)} layers, model has {len(self.layers)}")
        b, _, _, t = x.shape
        xr, xi = x.flatten_frames()
        new_state = []
        for i, layer in enumerate(self.layers):
            xr, xi, s = layer(xr, xi, None if state is None else state[i])
            new_state.append(s)
        xr, xi = self.projection(xr, xi)
        xr, xi = self.expand(xr, xi)
        unflat = lambda v: v.reshape(b, t, self.pairs, self.freq).permute(0, 2, 3, 1)
        return ComplexTensor(unflat(xr), unflat(xi)), new_state


class DecoderLayer(nn.Module):
    def __init__(self, in_pairs: int, out_pairs: int, cfg: ModelConfig, last: bool):
        super().__init__()
        self.deconv = ComplexConvTranspose2d(in_pairs, out_pairs, (cfg.kernel_freq, cfg.kernel_time), (2, 1))
        self.last = last
        if not last:
            self.norm_r = nn.BatchNorm2d(out_pairs)
            self.norm_i = nn.BatchNorm2d(out_pairs)
            self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        y = self.deconv(x)
        if self.last:
            return y
        return ComplexTensor(self.act(self.norm_r(y.real)), self.act(self.norm_i(y.imag)))


class Decoder(nn.Module):
    """Mirror of the encoder with skip connections; emits a one-channel complex mask."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pairs = [shape.pairs for shape in shape_ledger(cfg)]
        outs = pairs[:-1][::-1] + [1]
        ins = pairs[::-1]
        self.layers = nn.ModuleList(
            DecoderLayer(2 * ins[i], outs[i], cfg, last=(i == len(pairs) - 1)) for i in range(len(pairs))
        )

    def forward(self, x: ComplexTensor, stack: EncoderFeatureStack) -> ComplexTensor:
        for layer, skip in zip(self.layers, reversed(stack.layers)):
            x = layer(x.cat(skip, dim=1))
        return x


class DccrnCore(nn.Module):
    """Encoder shared with the detector plus the enhancement-only recurrent/decoder path."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.recurrent: Optional[ComplexRecurrent] = ComplexRecurrent(cfg)
        self.decoder: Optional[Decoder] = Decoder(cfg)

    @property
    def inference_only(self) -> bool:
        return self.decoder is None

    def strip_enhancement(self) -> None:
        """Remove the recurrent block and decoder from the graph."""
        self.recurrent = None
        self.decoder = None
        logger.info("Enhancement branch removed; model is inference-only")

    def encode(self, spec: ComplexTensor, state=None) -> Tuple[EncoderFeatureStack, list]:
        return self.encoder(spec, state)

    def decoder_forward(self, stack: EncoderFeatureStack) -> ComplexTensor:
        if self.inference_only:
            raise InferenceModeError("decoder is not part of the inference graph")
        hidden, _ = self.recurrent(stack[-1])
        return self.decoder(hidden, stack)


def encoder_input(spec: ComplexSpectrogram, freq_bins: int) -> ComplexTensor:
    """Drop DC and keep bins ``1..freq_bins`` as a one-pair ``[B, 1, F, T]`` tensor."""
    if spec.n_bins <= freq_bins:
        raise ShapeError(f"spectrogram has {spec.n_bins} bins, need more than {freq_bins}")
    real = spec.real[..., 1:freq_bins + 1, :]
    imag = spec.imag[..., 1:freq_bins + 1, :]
    if real.dim() == 2:
        real, imag = real[None], imag[None]
    return ComplexTensor(real.unsqueeze(1), imag.unsqueeze(1))


def expand_mask(mask: ComplexTensor, n_bins: int) -> ComplexTensor:
    """``[B, 1, F, T]`` mask over bins 1..F to ``[B, n_bins, T]``; DC copies bin 1, bins above F are zero."""
    mr, mi = mask.real[:, 0], mask.imag[:, 0]
    b, f, t = mr.shape
    if f + 1 > n_bins:
        raise ShapeError(f"mask covers {f} bins, spectrogram has only {n_bins}")
    pad = n_bins - 1 - f
    full_r = torch.cat([mr[:, :1], mr, mr.new_zeros(b, pad, t)], dim=1)
    full_i = torch.cat([mi[:, :1], mi, mi.new_zeros(b, pad, t)], dim=1)
    return ComplexTensor(full_r, full_i)


def apply_mask_and_reconstruct(
    mask: ComplexTensor,
    noisy: ComplexSpectrogram,
    cfg: SpectroConfig,
) -> torch.Tensor:
    """Complex-multiply the mask into the noisy spectrogram and invert to ``[B, samples]``."""
    nr, ni = noisy.real, noisy.imag
    if nr.dim() == 2:
        nr, ni = nr[None], ni[None]
    full = expand_mask(mask, nr.shape[-2])
    if full.shape[-1] != nr.shape[-1]:
        raise ShapeError(f"mask has {full.shape[-1]} frames, spectrogram {nr.shape[-1]}")
    er = full.real * nr - full.imag * ni
    ei = full.real * ni + full.imag * nr
    return istft(ComplexSpectrogram(er, ei), cfg)


def layer_summary(cfg: ModelConfig) -> List[Dict[str, int]]:
    return [shape.__dict__.copy() for shape in shape_ledger(cfg)]
