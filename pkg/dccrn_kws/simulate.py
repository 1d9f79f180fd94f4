# dccrn_kws/simulate.py
"""On-the-fly mixture simulation: image-method RIRs, noise mixing at a target
SNR, negative clipping and per-frame labels.

Reverberation is applied to speech only; noise is added dry. The enhancement
target is the reverberant clean speech at the gain it has inside the mixture.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from threading import Lock
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.signal import fftconvolve

from dccrn_kws.audio_dsp import AudioBuffer, frame_count, read_wav
from dccrn_kws.config import SimulationConfig, SpectroConfig
from dccrn_kws.errors import RirError, SimulationError

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
SABINE_CONSTANT = 0.161

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


class UtteranceType(str, Enum):
    KEYWORD = "keyword"
    NEGATIVE = "negative"
    NOISE = "noise"


class ManifestEntry(BaseModel):
    id: str = Field(..., min_length=1)
    path: Path
    type: UtteranceType
    speaker: Optional[str] = None
    keyword_end_s: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _keyword_has_end(self):
        if self.type == UtteranceType.KEYWORD and self.keyword_end_s is None:
            raise ValueError(f"keyword entry '{self.id}' has no keyword_end_s")
        return self


class RoomSpec(BaseModel):
    dimensions: Tuple[float, float, float]
    source_pos: Tuple[float, float, float]
    mic_pos: Tuple[float, float, float]
    rt60_s: float = Field(..., gt=0)

    @field_validator("dimensions")
    @classmethod
    def _positive_dims(cls, v):
        if min(v) <= 0:
            raise ValueError(f"room dimensions must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _inside(self):
        for name in ("source_pos", "mic_pos"):
            pos = getattr(self, name)
            if any(p <= 0 or p >= d for p, d in zip(pos, self.dimensions)):
                raise ValueError(f"{name} {pos} is not strictly inside room {self.dimensions}")
        return self

    @property
    def volume(self) -> float:
        l, w, h = self.dimensions
        return l * w * h

    @property
    def surface(self) -> float:
        l, w, h = self.dimensions
        return 2.0 * (l * w + l * h + w * h)

    @property
    def sabine_bound(self) -> float:
        """Shortest RT60 Sabine's formula allows (fully absorbing walls)."""
        return SABINE_CONSTANT * self.volume / self.surface


class MixtureSpec(BaseModel):
    snr_db: float
    n_noise_types: int = Field(..., ge=1, le=4)
    noise_refs: List[str] = Field(default_factory=list)
    seed: int = 0

    @model_validator(mode="after")
    def _refs_match(self):
        if self.noise_refs and len(self.noise_refs) != self.n_noise_types:
            raise ValueError(f"{len(self.noise_refs)} noise refs for n_noise_types={self.n_noise_types}")
        return self


class MixtureMeta(BaseModel):
    utterance_id: str
    kind: UtteranceType
    spec: MixtureSpec
    speaker: Optional[str] = None
    rt60_s: Optional[float] = None
    keyword_end_sample: Optional[int] = None


@dataclass
class MixturePair:
    noisy: AudioBuffer
    target: AudioBuffer
    meta: MixtureMeta
    active: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if len(self.noisy) != len(self.target):
            raise SimulationError(f"noisy ({len(self.noisy)}) and target ({len(self.target)}) lengths differ")
        if self.active is None:
            self.active = np.ones(len(self.target), dtype=bool)


@dataclass
class LabelTrack:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def counts(self) -> Dict[str, int]:
        return {
            "positive": int(np.sum(self.labels == POSITIVE)),
            "negative": int(np.sum(self.labels == NEGATIVE)),
            "ignore": int(np.sum(self.labels == IGNORE)),
        }


# --- Manifests ---

def load_manifest(path: Path, check_files: bool = True) -> List[ManifestEntry]:
    """Read a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    entries: List[ManifestEntry] = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise SimulationError(f"cannot read manifest {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = orjson.loads(line)
            entry = ManifestEntry(**record)
        except (orjson.JSONDecodeError, TypeError, ValueError) as e:
            raise SimulationError(f"{path}:{lineno}: bad manifest record: {e}") from e
        if not entry.path.is_absolute():
            entry = entry.model_copy(update={"path": path.parent / entry.path})
        if check_files and not entry.path.exists():
            raise SimulationError(f"{path}:{lineno}: referenced file {entry.path} does not exist")
        entries.append(entry)
    logger.info(f"Loaded {len(entries)} manifest entries from {path}")
    return entries


def write_manifest(path: Path, entries: Sequence[ManifestEntry]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for entry in entries:
            record = entry.model_dump(mode="json")
            try:
                record["path"] = str(Path(record["path"]).relative_to(path.parent))
            except ValueError:
                pass
            fh.write(orjson.dumps(record, option=orjson.OPT_SORT_KEYS) + b"\n")


def validate_partition(train: Sequence[ManifestEntry], test: Sequence[ManifestEntry]) -> None:
    """Train and test must not share speakers or noise recordings."""
    def speakers(entries):
        return {e.speaker for e in entries if e.type != UtteranceType.NOISE and e.speaker}

    def noises(entries):
        return {e.path.resolve() for e in entries if e.type == UtteranceType.NOISE}

    shared_speakers = speakers(train) & speakers(test)
    if shared_speakers:
        raise SimulationError(f"speakers appear in both train and test: {sorted(shared_speakers)[:5]}")
    shared_noises = noises(train) & noises(test)
    if shared_noises:
        raise SimulationError(f"noise files appear in both train and test: {sorted(map(str, shared_noises))[:5]}")


# --- Room impulse responses ---

def reflection_coefficient(room: RoomSpec, absorption_model: str = "eyring") -> float:
    """Uniform wall reflection coefficient reaching ``room.rt60_s``."""
    if absorption_model == "sabine":
        if room.rt60_s < room.sabine_bound:
            raise RirError(
                f"rt60 {room.rt60_s:.3f} s is below the Sabine bound {room.sabine_bound:.3f} s "
                f"for a {room.dimensions} m room"
            )
        alpha = SABINE_CONSTANT * room.volume / (room.surface * room.rt60_s)
    else:
        alpha = 1.0 - math.exp(-SABINE_CONSTANT * room.volume / (room.surface * room.rt60_s))
    alpha = min(max(alpha, 0.0), 1.0)
    return math.sqrt(1.0 - alpha)


def _axis_images(src: float, mic: float, length: float, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Signed distances from the mic to every image along one axis, and reflection counts."""
    r = np.arange(-order, order + 1)
    offsets, counts = [], []
    for p in (0, 1):
        coord = (1 - 2 * p) * src + 2 * r * length
        offsets.append(coord - mic)
        counts.append(np.abs(r - p) + np.abs(r))
    return np.concatenate(offsets), np.concatenate(counts)


def image_method_rir(
    room: RoomSpec,
    rate: int = 16000,
    cfg: Optional[SimulationConfig] = None,
    length_s: Optional[float] = None,
) -> AudioBuffer:
    """Shoebox image-source RIR with integer-sample delays, peak-normalised to 1."""
    cfg = cfg or SimulationConfig()
    if not cfg.rt60_min_s <= room.rt60_s <= cfg.rt60_max_s:
        raise RirError(
            f"rt60 {room.rt60_s} s outside configured range [{cfg.rt60_min_s}, {cfg.rt60_max_s}]"
        )
    beta = reflection_coefficient(room, cfg.absorption_model)
    if length_s is None:
        length_s = min(1.2 * room.rt60_s + 0.05, cfg.rir_max_seconds)
    n_samples = int(math.ceil(length_s * rate))
    max_dist = length_s * SPEED_OF_SOUND
    min_dist = SPEED_OF_SOUND / rate

    axes = []
    for src, mic, dim in zip(room.source_pos, room.mic_pos, room.dimensions):
        order = int(math.ceil(max_dist / (2.0 * dim))) + 1
        axes.append(_axis_images(src, mic, dim, order))
    (dx, nx), (dy, ny), (dz, nz) = axes

    h = np.zeros(n_samples, dtype=np.float64)
    dyz2 = dy[:, None] ** 2 + dz[None, :] ** 2
    nyz = ny[:, None] + nz[None, :]
    for x_off, x_count in zip(dx, nx):
        dist = np.sqrt(x_off ** 2 + dyz2)
        delay = np.rint(dist / SPEED_OF_SOUND * rate).astype(np.int64)
        keep = delay < n_samples
        if not np.any(keep):
            continue
        gain = beta ** (x_count + nyz[keep]) / (4.0 * np.pi * np.maximum(dist[keep], min_dist))
        h += np.bincount(delay[keep], weights=gain, minlength=n_samples)

    peak = np.max(np.abs(h))
    if not np.isfinite(peak) or peak <= 0:
        raise RirError(f"degenerate impulse response for {room}")
    return AudioBuffer((h / peak).astype(np.float32), rate)


def schroeder_decay_db(rir: AudioBuffer) -> np.ndarray:
    energy = rir.samples.astype(np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    return 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))


def schroeder_t60(rir: AudioBuffer, fit_from_db: float = -5.0, fit_to_db: float = -25.0) -> float:
    """T60 extrapolated from a linear fit of the Schroeder decay between two levels."""
    edc = schroeder_decay_db(rir)
    region = np.where((edc <= fit_from_db) & (edc >= fit_to_db))[0]
    if region.size < 2:
        raise RirError(f"decay never spans {fit_from_db}..{fit_to_db} dB")
    t = region / rir.sample_rate
    slope, _ = np.polyfit(t, edc[region], 1)
    if slope >= 0:
        raise RirError("impulse response energy does not decay")
    return -60.0 / slope


def sample_room(rng: np.random.Generator, cfg: SimulationConfig) -> RoomSpec:
    lo, hi = np.asarray(cfg.room_min_m), np.asarray(cfg.room_max_m)
    dims = rng.uniform(lo, hi)
    margin = np.minimum(cfg.wall_margin_m, dims / 4.0)
    src = rng.uniform(margin, dims - margin)
    mic = rng.uniform(margin, dims - margin)
    rt60 = float(rng.uniform(cfg.rt60_min_s, cfg.rt60_max_s))
    if cfg.absorption_model == "sabine":
        volume = float(np.prod(dims))
        surface = 2.0 * float(dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2])
        rt60 = max(rt60, min(SABINE_CONSTANT * volume / surface * 1.01, cfg.rt60_max_s))
    return RoomSpec(
        dimensions=tuple(float(d) for d in dims),
        source_pos=tuple(float(p) for p in src),
        mic_pos=tuple(float(p) for p in mic),
        rt60_s=rt60,
    )


class RirBank:
    """Lazily computed, seeded pool of RIRs; entry ``i`` depends only on (seed, i)."""

    def __init__(self, cfg: SimulationConfig, rate: int, seed: int):
        self.cfg = cfg
        self.rate = rate
        self.seed = seed
        self._cache: Dict[int, Tuple[RoomSpec, AudioBuffer]] = {}
        self._lock = Lock()

    def __len__(self) -> int:
        return self.cfg.rir_bank_size

    def get(self, index: int) -> Tuple[RoomSpec, AudioBuffer]:
        index = index % self.cfg.rir_bank_size
        with self._lock:
            if index in self._cache:
                return self._cache[index]
        rng = np.random.default_rng([self.seed, 0x5249, index])
        room = sample_room(rng, self.cfg)
        rir = image_method_rir(room, self.rate, self.cfg)
        with self._lock:
            self._cache[index] = (room, rir)
        return room, rir


# --- Mixing ---

def active_mask(speech: np.ndarray, rate: int, threshold_dbfs: float) -> np.ndarray:
    """Per-sample mask of 10 ms blocks whose level exceeds ``threshold_dbfs``."""
    block = max(1, rate // 100)
    n_blocks = int(math.ceil(len(speech) / block))
    padded = np.zeros(n_blocks * block, dtype=np.float64)
    padded[: len(speech)] = speech
    power = np.mean(padded.reshape(n_blocks, block) ** 2, axis=1)
    level = 10.0 * np.log10(np.maximum(power, 1e-20))
    mask = np.repeat(level > threshold_dbfs, block)[: len(speech)]
    if not np.any(mask):
        mask = np.ones(len(speech), dtype=bool)
    return mask


def _fit_noise(noise: AudioBuffer, n: int, rng: np.random.Generator) -> np.ndarray:
    x = noise.samples.astype(np.float64)
    if len(x) >= n:
        start = int(rng.integers(0, len(x) - n + 1))
        return x[start:start + n]
    return np.resize(x, n)


def mix_utterance(
    speech: AudioBuffer,
    rir: Optional[AudioBuffer],
    noises: Sequence[AudioBuffer],
    spec: MixtureSpec,
    cfg: Optional[SimulationConfig] = None,
    utterance_id: str = "utt",
    kind: UtteranceType = UtteranceType.KEYWORD,
    keyword_end_sample: Optional[int] = None,
) -> MixturePair:
    """Reverberate ``speech``, add the summed ``noises`` at ``spec.snr_db`` and limit the peak."""
    cfg = cfg or SimulationConfig()
    if len(noises) != spec.n_noise_types:
        raise SimulationError(f"{len(noises)} noises supplied for n_noise_types={spec.n_noise_types}")
    rng = np.random.default_rng([spec.seed, 0x4E4F])
    n = len(speech)
    dry = speech.samples.astype(np.float64)

    delay = 0
    if rir is not None:
        reverberant = fftconvolve(dry, rir.samples.astype(np.float64))[:n]
        delay = int(np.argmax(np.abs(rir.samples)))
    else:
        reverberant = dry

    active = active_mask(reverberant, speech.sample_rate, cfg.active_threshold_dbfs)
    p_speech = float(np.mean(reverberant[active] ** 2))
    if p_speech <= 0.0:
        raise SimulationError(f"utterance '{utterance_id}' is silent (zero speech power)")

    noise_sum = np.zeros(n, dtype=np.float64)
    for i, noise in enumerate(noises):
        x = _fit_noise(noise, n, rng)
        power = float(np.mean(x ** 2))
        if power <= 0.0:
            raise SimulationError(f"noise #{i} for '{utterance_id}' has zero power")
        noise_sum += x / math.sqrt(power)

    p_noise = float(np.mean(noise_sum[active] ** 2))
    if p_noise <= 0.0:
        raise SimulationError(f"summed noise for '{utterance_id}' has zero power over the speech region")
    gain = math.sqrt(p_speech / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
    noisy = reverberant + gain * noise_sum

    peak = float(np.max(np.abs(noisy)))
    if peak > cfg.peak_limit:
        scale = cfg.peak_limit / peak
        noisy = noisy * scale
        reverberant = reverberant * scale

    end_sample = None if keyword_end_sample is None else min(n, keyword_end_sample + delay)
    meta = MixtureMeta(
        utterance_id=utterance_id,
        kind=kind,
        spec=spec,
        keyword_end_sample=end_sample,
    )
    return MixturePair(
        noisy=AudioBuffer(noisy.astype(np.float32), speech.sample_rate),
        target=AudioBuffer(reverberant.astype(np.float32), speech.sample_rate),
        meta=meta,
        active=active,
    )


def measure_snr(pair: MixturePair) -> float:
    """SNR in dB recomputed from the stored target and residual noise."""
    target = pair.target.samples.astype(np.float64)
    noise = pair.noisy.samples.astype(np.float64) - target
    p_s = np.mean(target[pair.active] ** 2)
    p_n = np.mean(noise[pair.active] ** 2)
    return float(10.0 * np.log10(p_s / p_n))


def clip_negative(
    audio: AudioBuffer,
    rng: np.random.Generator,
    min_s: float = 1.0,
    max_s: float = 3.0,
) -> Optional[AudioBuffer]:
    """Random contiguous clip with duration uniform in ``[min_s, max_s]``.

    Audio shorter than ``min_s`` is dropped with a warning (returns ``None``).
    """
    rate = audio.sample_rate
    min_n = int(round(min_s * rate))
    if len(audio) < min_n:
        logger.warning(f"Negative clip of {audio.duration:.2f} s is shorter than {min_s} s; dropped")
        return None
    max_n = min(len(audio), int(round(max_s * rate)))
    n = int(rng.integers(min_n, max_n + 1)) if max_n > min_n else min_n
    start = int(rng.integers(0, len(audio) - n + 1))
    return AudioBuffer(audio.samples[start:start + n], rate)


# --- Labels ---

def keyword_end_frame(end_sample: int, n_frames: int, cfg: SpectroConfig) -> int:
    """First frame whose window reaches the keyword end (clamped to the clip)."""
    frame = int(math.ceil((end_sample - cfg.win_length) / cfg.hop_length))
    return min(max(frame, 0), n_frames - 1)


def label_frames(
    end_frame: Optional[int],
    n_frames: int,
    positive_frames: int = 10,
    negative: bool = False,
) -> LabelTrack:
    """Centered positive window around ``end_frame``; the rest of a keyword clip is ignored."""
    if negative or end_frame is None:
        return LabelTrack(np.full(n_frames, NEGATIVE, dtype=np.int8))
    if not 0 <= end_frame < n_frames:
        raise SimulationError(f"keyword end frame {end_frame} outside [0, {n_frames})")
    labels = np.full(n_frames, IGNORE, dtype=np.int8)
    half = positive_frames // 2
    lo = max(0, end_frame - half)
    hi = min(n_frames, end_frame - half + positive_frames)
    labels[lo:hi] = POSITIVE
    return LabelTrack(labels)


# --- On-the-fly generation ---

@dataclass
class SimulatedUtterance:
    pair: MixturePair
    labels: LabelTrack


class Simulator:
    """Generates labelled mixtures from manifest entries; output depends only on (entry, seed)."""

    def __init__(
        self,
        entries: Sequence[ManifestEntry],
        sim_cfg: SimulationConfig,
        spectro_cfg: SpectroConfig,
        seed: int = 0,
    ):
        self.sim_cfg = sim_cfg
        self.spectro_cfg = spectro_cfg
        self.seed = seed
        self.keywords = sorted((e for e in entries if e.type == UtteranceType.KEYWORD), key=lambda e: e.id)
        self.negatives = sorted((e for e in entries if e.type == UtteranceType.NEGATIVE), key=lambda e: e.id)
        self.noises = sorted((e for e in entries if e.type == UtteranceType.NOISE), key=lambda e: e.id)
        self.rirs = RirBank(sim_cfg, spectro_cfg.sample_rate, seed)
        self._audio: Dict[Path, AudioBuffer] = {}
        self._lock = Lock()
        if not self.noises:
            logger.warning("Manifest has no noise entries; mixtures will be clean")

    def load(self, entry: ManifestEntry) -> AudioBuffer:
        with self._lock:
            cached = self._audio.get(entry.path)
        if cached is None:
            cached = read_wav(entry.path, self.spectro_cfg.sample_rate)
            with self._lock:
                self._audio[entry.path] = cached
        return cached

    def source(self, entry: ManifestEntry, seed: Sequence[int] | int) -> Tuple[Optional[AudioBuffer], np.random.Generator]:
        """Clip a mixture starts from and the generator that continues after it.

        Negatives are cut to a random segment (``None`` when too short); keywords are returned whole.
        """
        seed_seq = [seed] if isinstance(seed, int) else list(seed)
        rng = np.random.default_rng([self.seed, *seed_seq])
        audio = self.load(entry)
        if entry.type == UtteranceType.NEGATIVE:
            audio = clip_negative(audio, rng, self.sim_cfg.negative_clip_min_s, self.sim_cfg.negative_clip_max_s)
        elif entry.type != UtteranceType.KEYWORD:
            raise SimulationError(f"cannot simulate a mixture from noise entry '{entry.id}'")
        return audio, rng

    def generate(
        self,
        entry: ManifestEntry,
        seed: Sequence[int] | int,
        snr_db: Optional[float] = None,
        reverb: Optional[bool] = None,
        max_seconds: Optional[float] = None,
    ) -> Optional[SimulatedUtterance]:
        audio, rng = self.source(entry, seed)
        if audio is None:
            return None
        cfg = self.sim_cfg
        kind = entry.type
        end_sample = None
        if kind == UtteranceType.KEYWORD:
            end_sample = int(round(entry.keyword_end_s * audio.sample_rate))
            if max_seconds is not None and audio.duration > max_seconds:
                # keep the keyword end inside the retained window
                keep = int(max_seconds * audio.sample_rate)
                start = max(0, min(end_sample + audio.sample_rate // 10, len(audio)) - keep)
                audio = AudioBuffer(audio.samples[start:start + keep], audio.sample_rate)
                end_sample -= start

        if snr_db is None:
            snr_db = float(rng.uniform(cfg.snr_min_db, cfg.snr_max_db))
        if reverb is None:
            reverb = bool(rng.random() < cfg.reverb_probability)
        rir, rt60 = None, None
        if reverb:
            room, rir = self.rirs.get(int(rng.integers(0, len(self.rirs))))
            rt60 = room.rt60_s

        if self.noises:
            n_types = int(rng.integers(cfg.noise_types_min, cfg.noise_types_max + 1))
            if n_types > len(self.noises):
                raise SimulationError(f"need {n_types} distinct noises, manifest has {len(self.noises)}")
            picks = rng.choice(len(self.noises), size=n_types, replace=False)
            noise_entries = [self.noises[i] for i in sorted(picks)]
            spec = MixtureSpec(
                snr_db=snr_db, n_noise_types=n_types,
                noise_refs=[e.id for e in noise_entries], seed=int(rng.integers(0, 2 ** 31)),
            )
            pair = mix_utterance(
                audio, rir, [self.load(e) for e in noise_entries], spec, cfg,
                utterance_id=entry.id, kind=kind, keyword_end_sample=end_sample,
            )
        else:
            pair = self._clean_pair(audio, rir, entry, end_sample)

        pair.meta = pair.meta.model_copy(update={"speaker": entry.speaker, "rt60_s": rt60})
        n_frames = frame_count(len(pair.noisy), self.spectro_cfg)
        if kind == UtteranceType.KEYWORD:
            end_frame = keyword_end_frame(pair.meta.keyword_end_sample, n_frames, self.spectro_cfg)
            labels = label_frames(end_frame, n_frames, cfg.positive_frames)
        else:
            labels = label_frames(None, n_frames, negative=True)
        return SimulatedUtterance(pair=pair, labels=labels)

    def _clean_pair(self, audio, rir, entry, end_sample) -> MixturePair:
        x = audio.samples.astype(np.float64)
        delay = 0
        if rir is not None:
            x = fftconvolve(x, rir.samples.astype(np.float64))[: len(audio)]
            delay = int(np.argmax(np.abs(rir.samples)))
        peak = float(np.max(np.abs(x))) if len(x) else 0.0
        if peak > self.sim_cfg.peak_limit:
            x = x * (self.sim_cfg.peak_limit / peak)
        buf = AudioBuffer(x.astype(np.float32), audio.sample_rate)
        meta = MixtureMeta(
            utterance_id=entry.id, kind=entry.type,
            spec=MixtureSpec(snr_db=float("inf"), n_noise_types=1),
            keyword_end_sample=None if end_sample is None else min(len(x), end_sample + delay),
        )
        return MixturePair(noisy=buf, target=buf, meta=meta)
