# dccrn_kws/context_bias.py
"""Keyword audio context bias: a reduced ECAPA-style extractor, bias lists and
the per-mode resolution of the embedding fed to the detector."""
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import orjson
import torch
import torch.nn as nn
from pydantic import BaseModel, Field, model_validator

from dccrn_kws.audio_dsp import AudioBuffer, log_mel, read_wav
from dccrn_kws.config import BiasMode, ModelConfig, SpectroConfig
from dccrn_kws.errors import BiasError
from dccrn_kws.simulate import ManifestEntry, UtteranceType

logger = logging.getLogger(__name__)

MAX_LIST_SIZE = 50
CACHE_TENSOR = "context_bias.cached_embedding"


class TdnnBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, dilation: int = 1):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, kernel, dilation=dilation,
                              padding=dilation * (kernel - 1) // 2)
        self.act = nn.ReLU()
        self.norm = nn.BatchNorm1d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.act(self.conv(x)))


class SeBlock(nn.Module):
    def __init__(self, channels: int, se_channels: int):
        super().__init__()
        self.down = nn.Conv1d(channels, se_channels, 1)
        self.up = nn.Conv1d(se_channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=2, keepdim=True)
        s = torch.sigmoid(self.up(torch.relu(self.down(s))))
        return x * s


class SeResBlock(nn.Module):
    def __init__(self, channels: int, se_channels: int, dilation: int):
        super().__init__()
        self.tdnn1 = TdnnBlock(channels, channels, 1)
        self.tdnn2 = TdnnBlock(channels, channels, 3, dilation)
        self.tdnn3 = TdnnBlock(channels, channels, 1)
        self.se = SeBlock(channels, se_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.se(self.tdnn3(self.tdnn2(self.tdnn1(x)))) + x


class AttentiveStatsPool(nn.Module):
    eps = 1e-12

    def __init__(self, channels: int, attention_channels: int):
        super().__init__()
        self.tdnn = TdnnBlock(channels * 3, attention_channels, 1)
        self.attn = nn.Conv1d(attention_channels, channels, 1)

    @classmethod
    def _stats(cls, x: torch.Tensor, w: torch.Tensor):
        mean = (w * x).sum(dim=2)
        std = torch.sqrt((w * (x - mean.unsqueeze(2)).pow(2)).sum(dim=2).clamp(min=cls.eps))
        return mean, std

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[-1]
        uniform = torch.full_like(x[:, :1], 1.0 / t)
        mean, std = self._stats(x, uniform)
        context = torch.cat([x, mean.unsqueeze(2).expand(-1, -1, t), std.unsqueeze(2).expand(-1, -1, t)], dim=1)
        weights = torch.softmax(self.attn(torch.tanh(self.tdnn(context))), dim=2)
        mean, std = self._stats(x, weights)
        return torch.cat([mean, std], dim=1)


class EcapaLite(nn.Module):
    """Log-mel frames ``[B, n_mels, T]`` to a ``bias_dim`` embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ecapa_channels
        self.front = TdnnBlock(cfg.n_mels, c, 5)
        dilations = [2 + (i % 3) for i in range(cfg.ecapa_blocks)]
        self.blocks = nn.ModuleList(SeResBlock(c, cfg.ecapa_se, d) for d in dilations)
        self.mfa = TdnnBlock(c * cfg.ecapa_blocks, c * cfg.ecapa_blocks, 1)
        self.pool = AttentiveStatsPool(c * cfg.ecapa_blocks, cfg.ecapa_attention)
        self.fc = nn.Linear(2 * c * cfg.ecapa_blocks, cfg.bias_dim)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = self.front(feats)
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        x = self.mfa(torch.cat(outs, dim=1))
        return self.fc(self.pool(x))


def extract_embedding(
    audio: Union[AudioBuffer, torch.Tensor],
    extractor: EcapaLite,
    model_cfg: ModelConfig,
    spectro_cfg: Optional[SpectroConfig] = None,
) -> torch.Tensor:
    """Embedding of one clip (``[bias_dim]``); mean-normalised log-mel front-end."""
    spectro_cfg = spectro_cfg or SpectroConfig()
    n = len(audio) if isinstance(audio, AudioBuffer) else audio.shape[-1]
    min_samples = int(round(model_cfg.min_bias_audio_s * spectro_cfg.sample_rate))
    if n < min_samples:
        raise BiasError(
            f"bias clip of {n / spectro_cfg.sample_rate:.3f} s is shorter than {model_cfg.min_bias_audio_s} s"
        )
    if isinstance(audio, AudioBuffer):
        audio = audio.tensor(next(extractor.parameters()).dtype)
    feats = log_mel(audio, model_cfg.n_mels, spectro_cfg)
    feats = feats - feats.mean(dim=-1, keepdim=True)
    return extractor(feats.unsqueeze(0))[0]


class BiasList(BaseModel):
    mode: BiasMode
    seed: int = 0
    entries: List[str] = Field(default_factory=list, max_length=MAX_LIST_SIZE)
    speaker: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.mode != BiasMode.LEARNABLE and not self.entries:
            raise ValueError(f"{self.mode.value} bias list needs at least one entry")
        if self.mode == BiasMode.SPEAKER and not self.speaker:
            raise ValueError("speaker bias list must name its speaker")
        return self

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))

    @classmethod
    def load(cls, path: Path) -> "BiasList":
        try:
            return cls(**orjson.loads(Path(path).read_bytes()))
        except (OSError, orjson.JSONDecodeError, ValueError) as e:
            raise BiasError(f"cannot load bias list {path}: {e}") from e


def select_entries(ids: Sequence[str], size: int, rng: np.random.Generator) -> List[str]:
    pool = sorted(ids)
    if not pool:
        return []
    size = min(size, len(pool), MAX_LIST_SIZE)
    picks = rng.choice(len(pool), size=size, replace=False)
    return sorted(pool[i] for i in picks)


def make_bias_list(
    entries: Sequence[ManifestEntry],
    mode: BiasMode,
    seed: int = 0,
    size: int = MAX_LIST_SIZE,
    speaker: Optional[str] = None,
) -> BiasList:
    """Choose keyword clips for a bias list; the choice depends only on ``(seed, pool)``."""
    if mode == BiasMode.LEARNABLE:
        return BiasList(mode=mode, seed=seed)
    keywords = [e for e in entries if e.type == UtteranceType.KEYWORD]
    if mode == BiasMode.SPEAKER:
        if speaker is None:
            raise BiasError("speaker bias list requires a speaker id")
        keywords = [e for e in keywords if e.speaker == speaker]
    if not keywords:
        raise BiasError(f"no keyword clips available for a {mode.value} bias list")
    ids = select_entries([e.id for e in keywords], size, np.random.default_rng(seed))
    return BiasList(mode=mode, seed=seed, entries=ids, speaker=speaker if mode == BiasMode.SPEAKER else None)


class ContextBias(nn.Module):
    """Resolves the bias embedding per batch for the configured mode.

    ``cached_embedding`` holds the fixed-list mean for inference so the extractor
    never runs per frame; it is saved with the checkpoint.
    """

    def __init__(self, cfg: ModelConfig, spectro_cfg: Optional[SpectroConfig] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.spectro_cfg = spectro_cfg or SpectroConfig()
        self.mode = cfg.bias_mode
        self.seed = seed
        if self.mode == BiasMode.LEARNABLE:
            gen = torch.Generator().manual_seed(seed)
            self.learnable = nn.Parameter(torch.randn(cfg.bias_dim, generator=gen) * 0.01)
            self.extractor = None
        else:
            self.register_parameter("learnable", None)
            self.extractor = EcapaLite(cfg)
        self.register_buffer("cached_embedding", torch.zeros(cfg.bias_dim))
        self.register_buffer("cache_ready", torch.zeros(()))
        self.bias_list: Optional[BiasList] = None
        self._audio: Dict[str, AudioBuffer] = {}
        self._speakers: Dict[str, List[str]] = {}
        self._speaker_cache: Dict[str, torch.Tensor] = {}

    def attach(self, bias_list: Optional[BiasList], audio: Mapping[str, AudioBuffer],
               speakers: Optional[Mapping[str, Optional[str]]] = None) -> None:
        """Provide the clean keyword clips the list entries refer to."""
        self.bias_list = bias_list
        self._audio = dict(audio)
        self._speakers = {}
        for clip_id, spk in (speakers or {}).items():
            if spk is not None and clip_id in self._audio:
                self._speakers.setdefault(spk, []).append(clip_id)
        self._speaker_cache.clear()
        if bias_list is not None and bias_list.mode != self.mode:
            logger.warning(f"Bias list mode {bias_list.mode.value} differs from model mode {self.mode.value}")
        missing = [e for e in (bias_list.entries if bias_list else []) if e not in self._audio]
        if missing:
            raise BiasError(f"bias list entries without audio: {missing[:5]}")

    def embed(self, clip_id: str) -> torch.Tensor:
        if clip_id not in self._audio:
            raise BiasError(f"no audio attached for bias clip '{clip_id}'")
        return extract_embedding(self._audio[clip_id], self.extractor, self.cfg, self.spectro_cfg)

    def mean_embedding(self, ids: Sequence[str]) -> torch.Tensor:
        if self.mode == BiasMode.LEARNABLE:
            return self.learnable
        if not ids:
            raise BiasError(f"empty bias list in {self.mode.value} mode")
        embeddings = torch.stack([self.embed(i) for i in sorted(ids)])
        return embeddings.mean(dim=0)

    def _list_ids(self) -> List[str]:
        if self.bias_list is None:
            raise BiasError(f"{self.mode.value} bias mode needs a bias list")
        return list(self.bias_list.entries)

    def _speaker_ids(self, speaker: Optional[str]) -> List[str]:
        ids = self._speakers.get(speaker or "", [])
        if not ids:
            return self._list_ids()
        rng = np.random.default_rng([self.seed, *speaker.encode("utf-8")])
        return select_entries(ids, self.cfg.bias_list_size, rng)

    @torch.no_grad()
    def refresh_cache(self) -> torch.Tensor:
        """Recompute and store the inference embedding from the fixed list."""
        if self.mode == BiasMode.LEARNABLE:
            return self.learnable.detach()
        was_training = self.extractor.training
        self.extractor.eval()
        try:
            mean = self.mean_embedding(self._list_ids())
        finally:
            self.extractor.train(was_training)
        self.cached_embedding.copy_(mean)
        self.cache_ready.fill_(1.0)
        logger.info(f"Cached bias embedding from {len(self._list_ids())} clips")
        return self.cached_embedding

    def forward(
        self,
        batch: int,
        speakers: Optional[Sequence[Optional[str]]] = None,
        iteration: int = 0,
    ) -> torch.Tensor:
        """Bias embeddings ``[B or 1, bias_dim]`` for a batch."""
        if self.mode == BiasMode.LEARNABLE:
            return self.learnable.unsqueeze(0)
        if self.mode == BiasMode.SPEAKER and speakers is not None:
            rows = [self._speaker_embedding(spk) for spk in speakers]
            return torch.stack(rows)
        if self.training:
            if self.mode == BiasMode.VARIED:
                rng = np.random.default_rng([self.seed, iteration])
                ids = select_entries(list(self._audio), self.cfg.bias_list_size, rng)
            else:
                ids = self._list_ids()
            return self.mean_embedding(ids).unsqueeze(0)
        if float(self.cache_ready) < 0.5:
            self.refresh_cache()
        return self.cached_embedding.unsqueeze(0)

    def _speaker_embedding(self, speaker: Optional[str]) -> torch.Tensor:
        ids = self._speaker_ids(speaker)
        if self.training:
            return self.mean_embedding(ids)
        key = speaker or ""
        if key not in self._speaker_cache:
            with torch.no_grad():
                self._speaker_cache[key] = self.mean_embedding(ids)
        return self._speaker_cache[key]

    def invalidate(self) -> None:
        self.cache_ready.fill_(0.0)
        self._speaker_cache.clear()


def load_bias_audio(entries: Sequence[ManifestEntry], rate: int = 16000) -> Dict[str, AudioBuffer]:
    return {e.id: read_wav(e.path, rate) for e in entries if e.type == UtteranceType.KEYWORD}
