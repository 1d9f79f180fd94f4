"""Shared fixtures: tiny model configs, seeded generators and a small synthetic corpus."""
from pathlib import Path

import numpy as np
import pytest
import torch

from dccrn_kws.audio_dsp import AudioBuffer
from dccrn_kws.config import (
    EvalConfig,
    ModelConfig,
    PathsConfig,
    ProjectionMode,
    RunConfig,
    SimulationConfig,
    SpectroConfig,
    TrainConfig,
)
from dccrn_kws.context_bias import BiasList
from dccrn_kws.simulate import load_manifest
from dccrn_kws.toy_corpus import ToyCorpusSpec, make_toy_corpus

MICRO_MODEL = dict(
    freq_bins=16,
    encoder_channels=[4, 8],
    lstm_hidden=8,
    lstm_layers=1,
    bias_dim=8,
    bias_list_size=4,
    kws_dim=8,
    ccl_context=3,
    dtc_blocks=2,
    dtc_kernel=3,
    dtc_dilations=[1, 2],
    n_mels=8,
    ecapa_channels=8,
    ecapa_blocks=1,
    ecapa_attention=4,
    ecapa_se=4,
)

MICRO_SIMULATION = dict(
    rt60_min_s=0.1,
    rt60_max_s=0.3,
    rir_bank_size=2,
    rir_max_seconds=0.3,
    noise_types_max=2,
)


def micro_model_cfg(**overrides) -> ModelConfig:
    return ModelConfig(**{**MICRO_MODEL, **overrides})


def micro_run_cfg(output_dir: Path = Path("runs/test"), **model_overrides) -> RunConfig:
    return RunConfig(
        spectro=SpectroConfig(),
        simulation=SimulationConfig(**MICRO_SIMULATION),
        model=micro_model_cfg(**model_overrides),
        train=TrainConfig(
            iterations=3, batch_positive=1, batch_negative=1, warmup=10, d_model=8,
            checkpoint_every=2, log_every=1, max_utterance_s=1.5,
        ),
        eval=EvalConfig(smooth_window=5, refractory=20, rtf_audio_s=1.0, rtf_warmup_s=0.2, rtf_chunk_s=0.25),
        paths=PathsConfig(output_dir=output_dir),
    )


def attach_noise_bias(model, n_clips: int = 2, seed: int = 0) -> BiasList:
    """Give a model's context bias a fixed list of noise clips so it can resolve an embedding."""
    bias = model.context_bias
    rng = np.random.default_rng(seed)
    audio = {f"clip{i}": AudioBuffer((0.1 * rng.standard_normal(16000)).astype(np.float32)) for i in range(n_clips)}
    bias_list = BiasList(mode=bias.mode, seed=seed, entries=sorted(audio))
    bias.attach(bias_list, audio, {k: "spk" for k in audio})
    return bias_list


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spectro_cfg():
    return SpectroConfig()


@pytest.fixture
def model_cfg():
    return micro_model_cfg()


@pytest.fixture
def plain_model_cfg():
    return micro_model_cfg(projection=ProjectionMode.PLAIN)


@pytest.fixture
def run_cfg(tmp_path):
    return micro_run_cfg(tmp_path / "run")


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    spec = ToyCorpusSpec(
        train_speakers=3, test_speakers=2, keywords_per_speaker=2, negatives_per_speaker=2,
        noise_seconds=2.0, seed=7,
    )
    return make_toy_corpus(root, spec)


@pytest.fixture(scope="session")
def train_entries(toy_corpus):
    return load_manifest(toy_corpus["train"])


@pytest.fixture(scope="session")
def heldout_entries(toy_corpus):
    return load_manifest(toy_corpus["test"])

