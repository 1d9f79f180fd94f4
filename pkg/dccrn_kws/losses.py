# dccrn_kws/losses.py
"""Multi-task objective: negative SI-SNR on the enhanced waveform plus masked
binary cross-entropy on the keyword posteriors, and the Noam learning rate."""
import math
from typing import Optional, Sequence, Tuple

import torch

from dccrn_kws.config import TrainConfig
from dccrn_kws.errors import LossError

SI_SNR_EPS = 1e-8
POSTERIOR_CLAMP = 1e-7


def si_snr(est: torch.Tensor, ref: torch.Tensor, eps: float = SI_SNR_EPS) -> torch.Tensor:
    """Scale-invariant SNR in dB over the last axis."""
    if est.shape != ref.shape:
        raise LossError(f"si_snr shapes differ: est {tuple(est.shape)} vs ref {tuple(ref.shape)}")
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = (ref ** 2).sum(dim=-1, keepdim=True)
    if bool((ref_energy <= 0).any()):
        raise LossError("si_snr reference has zero power")
    s_target = (est * ref).sum(dim=-1, keepdim=True) / ref_energy * ref
    e_noise = est - s_target
    return 10 * torch.log10(((s_target ** 2).sum(dim=-1) + eps) / ((e_noise ** 2).sum(dim=-1) + eps))


def bce_masked(posteriors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean BCE over frames whose label is 0 or 1; label -1 frames are skipped."""
    if posteriors.shape != labels.shape:
        raise LossError(f"posteriors {tuple(posteriors.shape)} and labels {tuple(labels.shape)} differ")
    keep = labels >= 0
    if not bool(keep.any()):
        raise LossError("every frame is labelled ignore; nothing to train on")
    y = posteriors[keep].clamp(POSTERIOR_CLAMP, 1.0 - POSTERIOR_CLAMP)
    target = labels[keep].to(y.dtype)
    return -(target * torch.log(y) + (1.0 - target) * torch.log(1.0 - y)).mean()


def total_loss(
    posteriors: torch.Tensor,
    labels: torch.Tensor,
    enhanced: Optional[torch.Tensor] = None,
    target: Optional[torch.Tensor] = None,
    lengths: Optional[Sequence[int]] = None,
) -> Tuple[torch.Tensor, dict]:
    """``-mean(si_snr) + bce``; the SI-SNR term is skipped when there is no enhancement output.

    With ``lengths`` each item is scored over its own unpadded samples.
    """
    bce = bce_masked(posteriors, labels)
    parts = {"bce": float(bce.detach())}
    if enhanced is None:
        return bce, parts
    if target is None:
        raise LossError("enhanced output given without a target waveform")
    n = min(enhanced.shape[-1], target.shape[-1])
    if lengths is None:
        snr = si_snr(enhanced[..., :n], target[..., :n]).mean()
    else:
        snr = torch.stack([
            si_snr(enhanced[i, : min(n, m)], target[i, : min(n, m)]) for i, m in enumerate(lengths)
        ]).mean()
    parts["si_snr"] = float(snr.detach())
    return bce - snr, parts


def noam_lr(step: int, cfg: TrainConfig) -> float:
    if step < 1:
        raise LossError(f"noam schedule is defined from step 1, got {step}")
    return cfg.noam_factor * cfg.d_model ** -0.5 * min(step ** -0.5, step * cfg.warmup ** -1.5)


def frame_accuracy(posteriors: torch.Tensor, labels: torch.Tensor, threshold: float = 0.5) -> float:
    keep = labels >= 0
    if not bool(keep.any()):
        return math.nan
    predicted = (posteriors[keep] >= threshold).to(labels.dtype)
    return float((predicted == labels[keep]).float().mean())
