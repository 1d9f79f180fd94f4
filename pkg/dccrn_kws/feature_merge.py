# dccrn_kws/feature_merge.py
"""Learnable weighted merge of every encoder layer into one per-frame feature."""
import logging
from typing import List, Tuple

import torch
import torch.nn as nn

from dccrn_kws.config import ModelConfig
from dccrn_kws.dccrn_core import ComplexTensor, EncoderFeatureStack, shape_ledger
from dccrn_kws.errors import MergeError, ShapeError

logger = logging.getLogger(__name__)

MERGE_EPS = 1e-8


def downsample_layer(layer: ComplexTensor, target_dim: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Flatten per frame and average adjacent groups down to ``target_dim`` per part."""
    xr, xi = layer.flatten_frames()
    width = xr.shape[-1]
    if width % target_dim:
        raise ShapeError(f"layer of per-part width {width} cannot be pooled to {target_dim}")
    factor = width // target_dim
    if factor == 1:
        return xr, xi
    b, t, _ = xr.shape
    return (
        xr.reshape(b, t, target_dim, factor).mean(dim=-1),
        xi.reshape(b, t, target_dim, factor).mean(dim=-1),
    )


class FeatureMerge(nn.Module):
    """``E' = sum_i w_i * downsample(E_i) / sum_i |w_i|``; real and imag share ``w``.

    Weights start at ``(0, ..., 0, 1)`` so an untrained merge is the final layer.
    When disabled the final layer is passed through and no weights exist.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ledger = shape_ledger(cfg)
        self.part_dim = ledger[-1].flat_dim // 2
        self.enabled = cfg.feature_merge
        if self.enabled:
            init = torch.zeros(len(ledger))
            init[-1] = 1.0
            self.weights = nn.Parameter(init)
        else:
            self.register_parameter("weights", None)

    @property
    def out_dim(self) -> int:
        return 2 * self.part_dim

    def merge_parts(self, stack: EncoderFeatureStack) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.enabled:
            return downsample_layer(stack[-1], self.part_dim)
        if len(stack) != self.weights.shape[0]:
            raise ShapeError(f"stack has {len(stack)} layers, merge expects {self.weights.shape[0]}")
        norm = self.weights.abs().sum()
        if float(norm) <= MERGE_EPS:
            raise MergeError(f"merge weights {self.weights.detach().tolist()} sum to |w| <= {MERGE_EPS}")
        acc_r, acc_i = None, None
        for w, layer in zip(self.weights, stack.layers):
            dr, di = downsample_layer(layer, self.part_dim)
            acc_r = w * dr if acc_r is None else acc_r + w * dr
            acc_i = w * di if acc_i is None else acc_i + w * di
        return acc_r / norm, acc_i / norm

    def forward(self, stack: EncoderFeatureStack) -> torch.Tensor:
        """Merged feature ``[B, T, out_dim]`` laid out as ``real || imag``."""
        real, imag = self.merge_parts(stack)
        return torch.cat([real, imag], dim=-1)

    def learned_weights(self) -> List[float]:
        if not self.enabled:
            return []
        return [float(w) for w in self.weights.detach().cpu()]
