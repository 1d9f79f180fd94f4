# dccrn_kws/config.py
"""Run configuration.

Config files are flat ``key: value`` documents. Every key belongs to exactly one
section model below; unknown keys and badly typed values are rejected with the
file name and line number.
"""
import hashlib
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dccrn_kws.errors import ConfigError

logger = logging.getLogger(__name__)


class ProjectionMode(str, Enum):
    PLAIN = "plain"
    BIAS_CONCAT = "bias"
    CCL = "ccl"


class BiasMode(str, Enum):
    FIXED = "fixed"
    VARIED = "varied"
    SPEAKER = "speaker"
    LEARNABLE = "learnable"


class Architecture(str, Enum):
    KWS = "kws"
    DCCRN_KWS = "dccrn-kws"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)


class SpectroConfig(_Section):
    sample_rate: int = Field(16000, gt=0, description="Sample rate in Hz")
    win_ms: float = Field(25.0, gt=0, description="Analysis window length")
    hop_ms: float = Field(10.0, gt=0, description="Frame shift")
    fft_size: int = Field(512, gt=0, description="STFT length")
    window: str = Field("sqrt_hann", description="Analysis/synthesis window family")

    @field_validator("window")
    @classmethod
    def _known_window(cls, v: str) -> str:
        if v not in ("sqrt_hann", "hann"):
            raise ValueError(f"unknown window family '{v}' (expected sqrt_hann or hann)")
        return v

    @model_validator(mode="after")
    def _check_framing(self):
        win = self.win_ms * self.sample_rate / 1000.0
        hop = self.hop_ms * self.sample_rate / 1000.0
        if abs(win - round(win)) > 1e-9 or abs(hop - round(hop)) > 1e-9:
            raise ValueError(f"window {win} / hop {hop} samples must be whole numbers of samples")
        if round(win) > self.fft_size:
            raise ValueError(f"window of {round(win)} samples exceeds fft_size {self.fft_size}")
        if round(hop) > round(win):
            raise ValueError(f"hop {round(hop)} longer than window {round(win)} leaves gaps")
        return self

    @property
    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


class SimulationConfig(_Section):
    snr_min_db: float = 0.0
    snr_max_db: float = 15.0
    rt60_min_s: float = Field(0.05, gt=0)
    rt60_max_s: float = Field(0.95, gt=0)
    noise_types_min: int = Field(1, ge=1, le=4)
    noise_types_max: int = Field(4, ge=1, le=4)
    negative_clip_min_s: float = Field(1.0, gt=0)
    negative_clip_max_s: float = Field(3.0, gt=0)
    reverb_probability: float = Field(1.0, ge=0, le=1)
    rir_bank_size: int = Field(64, ge=1)
    rir_max_seconds: float = Field(1.0, gt=0)
    absorption_model: str = "eyring"
    room_min_m: List[float] = Field(default_factory=lambda: [3.0, 3.0, 2.5])
    room_max_m: List[float] = Field(default_factory=lambda: [8.0, 6.0, 3.5])
    wall_margin_m: float = Field(0.3, gt=0)
    active_threshold_dbfs: float = -60.0
    peak_limit: float = Field(0.95, gt=0, le=1)
    positive_frames: int = Field(10, ge=1)

    @field_validator("absorption_model")
    @classmethod
    def _known_model(cls, v: str) -> str:
        if v not in ("eyring", "sabine"):
            raise ValueError(f"absorption_model must be eyring or sabine, got '{v}'")
        return v

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.snr_min_db > self.snr_max_db:
            raise ValueError("snr_min_db > snr_max_db")
        if self.rt60_min_s > self.rt60_max_s:
            raise ValueError("rt60_min_s > rt60_max_s")
        if self.noise_types_min > self.noise_types_max:
            raise ValueError("noise_types_min > noise_types_max")
        if self.negative_clip_min_s > self.negative_clip_max_s:
            raise ValueError("negative_clip_min_s > negative_clip_max_s")
        if len(self.room_min_m) != 3 or len(self.room_max_m) != 3:
            raise ValueError("room_min_m / room_max_m need three dimensions (L, W, H)")
        return self


class ModelConfig(_Section):
    architecture: Architecture = Architecture.DCCRN_KWS
    freq_bins: int = Field(256, ge=2, description="Encoder input bins (1..freq_bins, DC dropped)")
    encoder_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128, 256, 256])
    kernel_freq: int = Field(5, ge=1)
    kernel_time: int = Field(2, ge=1)
    lstm_hidden: int = Field(128, ge=1, description="Hidden units per real/imag part")
    lstm_layers: int = Field(2, ge=1)
    leaky_slope: float = Field(0.01, ge=0)
    projection: ProjectionMode = ProjectionMode.CCL
    bias_mode: BiasMode = BiasMode.FIXED
    feature_merge: bool = True
    bias_dim: int = Field(192, ge=2)
    bias_list_size: int = Field(50, ge=1, le=50)
    min_bias_audio_s: float = Field(0.5, gt=0)
    kws_dim: int = Field(128, ge=2)
    ccl_context: int = Field(3, ge=1)
    dtc_blocks: int = Field(16, ge=1)
    dtc_kernel: int = Field(5, ge=1)
    dtc_dilations: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    n_mels: int = Field(64, ge=1)
    ecapa_channels: int = Field(128, ge=2)
    ecapa_blocks: int = Field(3, ge=1)
    ecapa_attention: int = Field(64, ge=1)
    ecapa_se: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self):
        if any(c % 2 for c in self.encoder_channels):
            raise ValueError(f"encoder_channels {self.encoder_channels} must be even (real+imag maps)")
        if self.freq_bins % (2 ** len(self.encoder_channels)):
            raise ValueError(
                f"freq_bins {self.freq_bins} cannot be halved {len(self.encoder_channels)} times"
            )
        if self.kws_dim % 2 or self.bias_dim % 2:
            raise ValueError("kws_dim and bias_dim must be even to split into real/imag halves")
        return self

    @property
    def uses_bias(self) -> bool:
        return self.projection != ProjectionMode.PLAIN

    @property
    def dilation_schedule(self) -> List[int]:
        cycle = self.dtc_dilations
        return [cycle[i % len(cycle)] for i in range(self.dtc_blocks)]


class TrainConfig(_Section):
    iterations: int = Field(17500, ge=1)
    batch_positive: int = Field(4, ge=0)
    batch_negative: int = Field(4, ge=0)
    noam_factor: float = Field(5.0, gt=0)
    warmup: int = Field(1000, ge=1)
    d_model: int = Field(128, ge=1)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)
    max_utterance_s: float = Field(3.0, gt=0)
    data_workers: int = Field(0, ge=0)
    prefetch: int = Field(4, ge=1)
    grad_clip: Optional[float] = None

    @model_validator(mode="after")
    def _non_empty_batch(self):
        if self.batch_positive + self.batch_negative == 0:
            raise ValueError("batch must contain at least one utterance")
        return self


class EvalConfig(_Section):
    smooth_window: int = Field(30, ge=1)
    refractory: int = Field(100, ge=1)
    fa_per_10h: int = Field(1, ge=0)
    test_snrs: List[float] = Field(default_factory=lambda: [-5.0, 0.0, 5.0])
    threshold: float = Field(0.5, ge=0, le=1)
    rtf_audio_s: float = Field(60.0, gt=0)
    rtf_warmup_s: float = Field(5.0, ge=0)
    rtf_chunk_s: float = Field(1.0, gt=0)


class PathsConfig(_Section):
    train_manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    bias_list: Optional[Path] = None
    checkpoint: Optional[Path] = None
    output_dir: Path = Path("runs/default")


SECTIONS: Dict[str, type] = {
    "spectro": SpectroConfig,
    "simulation": SimulationConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}

_KEY_OWNER: Dict[str, str] = {}
for _section, _model in SECTIONS.items():
    for _key in _model.model_fields:
        if _key in _KEY_OWNER:
            raise RuntimeError(f"config key '{_key}' declared in two sections")
        _KEY_OWNER[_key] = _section


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    spectro: SpectroConfig = Field(default_factory=SpectroConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    def flat(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for section in SECTIONS:
            dumped = getattr(self, section).model_dump(mode="json")
            out.update(dumped)
        return dict(sorted(out.items()))

    def dump(self) -> str:
        return yaml.safe_dump(self.flat(), sort_keys=True, default_flow_style=None)

    def config_hash(self) -> str:
        shaping = {**self.spectro.model_dump(mode="json"), **self.model.model_dump(mode="json")}
        canonical = yaml.safe_dump(dict(sorted(shaping.items())), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Return a copy with flat keys replaced (``None`` values are ignored)."""
        flat = self.flat()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in _KEY_OWNER:
                raise ConfigError(f"unknown config key '{key}'")
            flat[key] = value.value if isinstance(value, Enum) else value
        return build_config(flat, source="<overrides>")

    def write_resolved(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved.conf"
        path.write_text(self.dump(), encoding="utf-8")
        return path


def build_config(
    flat: Dict[str, Any],
    source: str = "<dict>",
    lines: Optional[Dict[str, int]] = None,
    base_dir: Optional[Path] = None,
) -> RunConfig:
    """Assemble a ``RunConfig`` from flat keys, naming offending keys on failure."""
    lines = lines or {}
    grouped: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        owner = _KEY_OWNER.get(key)
        if owner is None:
            where = f"{source}:{lines[key]}" if key in lines else source
            raise ConfigError(f"unknown config key '{key}' at {where}")
        grouped[owner][key] = value

    if base_dir is not None:
        for key, value in grouped["paths"].items():
            if value is not None and not Path(value).is_absolute():
                grouped["paths"][key] = str(base_dir / value)

    sections = {}
    for name, model in SECTIONS.items():
        try:
            sections[name] = model(**grouped[name])
        except ValidationError as e:
            first = e.errors()[0]
            key = str(first["loc"][0]) if first["loc"] else name
            where = f"{source}:{lines[key]}" if key in lines else source
            raise ConfigError(f"invalid value for '{key}' at {where}: {first['msg']}") from e
    return RunConfig(**sections)


def parse_flat_file(path: Path) -> Tuple[Dict[str, Any], Dict[str, int]]:
    """Read a flat ``key: value`` file, keeping the 1-based line of every key."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
        if node is None:
            return {}, {}
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{path}: expected flat key-value pairs")
        values: Dict[str, Any] = {}
        lines: Dict[str, int] = {}
        for key_node, value_node in node.value:
            key = loader.construct_object(key_node, deep=True)
            line = key_node.start_mark.line + 1
            if isinstance(value_node, yaml.MappingNode):
                raise ConfigError(f"nested value for '{key}' at {path}:{line}; config is flat")
            if key in values:
                raise ConfigError(f"duplicate config key '{key}' at {path}:{line}")
            values[str(key)] = loader.construct_object(value_node, deep=True)
            lines[str(key)] = line
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    finally:
        loader.dispose()
    return values, lines


def load_config(path: Path) -> RunConfig:
    values, lines = parse_flat_file(path)
    config = build_config(values, source=str(path), lines=lines, base_dir=path.parent.resolve())
    logger.info(f"Loaded config {path} (hash {config.config_hash()})")
    return config
