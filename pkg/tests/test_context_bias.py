import numpy as np
import pytest
import torch
from pydantic import ValidationError

from dccrn_kws.audio_dsp import AudioBuffer
from dccrn_kws.config import BiasMode
from dccrn_kws.context_bias import (
    BiasList,
    ContextBias,
    EcapaLite,
    extract_embedding,
    load_bias_audio,
    make_bias_list,
)
from dccrn_kws.errors import BiasError
from dccrn_kws.simulate import UtteranceType
from tests.conftest import micro_model_cfg


def clips(n, seed=0, seconds=1.0):
    rng = np.random.default_rng(seed)
    return {f"kw{i}": AudioBuffer((0.1 * rng.standard_normal(int(seconds * 16000))).astype(np.float32))
            for i in range(n)}


def attached(mode, n_clips=4, list_size=2, speakers=None, **cfg_overrides):
    cfg = micro_model_cfg(bias_mode=mode, bias_list_size=list_size, **cfg_overrides)
    bias = ContextBias(cfg, seed=3)
    audio = clips(n_clips)
    entries = [] if mode == BiasMode.LEARNABLE else sorted(audio)[:list_size]
    bias_list = BiasList(mode=mode, entries=entries, speaker="spk0" if mode == BiasMode.SPEAKER else None)
    bias.attach(bias_list, audio, speakers or {})
    return bias


# ---------------------------------------------------------------------------
# Extractor
# ---------------------------------------------------------------------------


class TestExtractor:
    def test_embedding_shape(self, model_cfg):
        extractor = EcapaLite(model_cfg).eval()
        emb = extract_embedding(clips(1)["kw0"], extractor, model_cfg)
        assert tuple(emb.shape) == (8,)
        assert torch.isfinite(emb).all()

    def test_short_clip_rejected(self, model_cfg):
        short = AudioBuffer(np.zeros(4000, dtype=np.float32))
        with pytest.raises(BiasError, match="shorter than"):
            extract_embedding(short, EcapaLite(model_cfg), model_cfg)

    def test_variable_length_inputs(self, model_cfg):
        extractor = EcapaLite(model_cfg).eval()
        for seconds in (0.5, 1.7):
            emb = extract_embedding(clips(1, seconds=seconds)["kw0"], extractor, model_cfg)
            assert tuple(emb.shape) == (8,)

    def test_gradcheck(self, model_cfg):
        extractor = EcapaLite(model_cfg).double().eval()
        feats = torch.randn(1, 8, 12, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(extractor, (feats,))


# ---------------------------------------------------------------------------
# Bias lists
# ---------------------------------------------------------------------------


class TestBiasList:
    def test_fixed_list_is_deterministic(self, train_entries):
        a = make_bias_list(train_entries, BiasMode.FIXED, seed=5, size=3)
        b = make_bias_list(train_entries, BiasMode.FIXED, seed=5, size=3)
        keyword_ids = {e.id for e in train_entries if e.type == UtteranceType.KEYWORD}
        assert a == b
        assert len(a.entries) == 3
        assert set(a.entries) <= keyword_ids

    def test_size_capped_by_pool(self, train_entries):
        n_keywords = sum(e.type == UtteranceType.KEYWORD for e in train_entries)
        assert len(make_bias_list(train_entries, BiasMode.VARIED, size=50).entries) == n_keywords

    def test_speaker_list(self, train_entries):
        speaker = next(e.speaker for e in train_entries if e.type == UtteranceType.KEYWORD)
        bias_list = make_bias_list(train_entries, BiasMode.SPEAKER, speaker=speaker)
        owners = {e.id: e.speaker for e in train_entries}
        assert bias_list.speaker == speaker
        assert {owners[i] for i in bias_list.entries} == {speaker}

    def test_speaker_list_needs_speaker(self, train_entries):
        with pytest.raises(BiasError, match="speaker id"):
            make_bias_list(train_entries, BiasMode.SPEAKER)

    def test_learnable_list_is_empty(self, train_entries):
        assert make_bias_list(train_entries, BiasMode.LEARNABLE).entries == []

    def test_no_keywords(self, train_entries):
        negatives = [e for e in train_entries if e.type != UtteranceType.KEYWORD]
        with pytest.raises(BiasError, match="no keyword clips"):
            make_bias_list(negatives, BiasMode.FIXED)

    def test_validation(self):
        with pytest.raises(ValidationError, match="at least one entry"):
            BiasList(mode=BiasMode.FIXED)
        with pytest.raises(ValidationError):
            BiasList(mode=BiasMode.VARIED, entries=[f"kw{i}" for i in range(51)])

    def test_save_and_load(self, tmp_path):
        bias_list = BiasList(mode=BiasMode.FIXED, seed=2, entries=["a", "b"])
        bias_list.save(tmp_path / "lists" / "bias.json")
        assert BiasList.load(tmp_path / "lists" / "bias.json") == bias_list

    def test_load_garbage(self, tmp_path):
        (tmp_path / "bias.json").write_text("{not json")
        with pytest.raises(BiasError, match="cannot load"):
            BiasList.load(tmp_path / "bias.json")

    def test_load_bias_audio_reads_keywords(self, train_entries):
        audio = load_bias_audio(train_entries)
        assert set(audio) == {e.id for e in train_entries if e.type == UtteranceType.KEYWORD}


# ---------------------------------------------------------------------------
# Embedding resolution per mode
# ---------------------------------------------------------------------------


class TestContextBias:
    def test_fixed_eval_uses_cache(self):
        bias = attached(BiasMode.FIXED).eval()
        assert float(bias.cache_ready) == 0.0
        emb = bias(batch=3)
        assert tuple(emb.shape) == (1, 8)
        assert float(bias.cache_ready) == 1.0
        assert torch.equal(emb[0], bias.cached_embedding)
        bias.invalidate()
        assert float(bias.cache_ready) == 0.0

    def test_fixed_cache_is_list_mean(self):
        bias = attached(BiasMode.FIXED)
        cached = bias.refresh_cache().clone()
        bias.extractor.eval()
        with torch.no_grad():
            expected = torch.stack([bias.embed(i) for i in bias.bias_list.entries]).mean(0)
        assert torch.allclose(cached, expected, atol=1e-6)

    def test_list_mean_ignores_order(self):
        bias = attached(BiasMode.FIXED, n_clips=4, list_size=4)
        bias.extractor.eval()
        ids = list(bias.bias_list.entries)
        with torch.no_grad():
            forward = bias.mean_embedding(ids)
            backward = bias.mean_embedding(ids[::-1])
            shuffled = bias.mean_embedding([ids[2], ids[0], ids[3], ids[1]])
        assert torch.equal(forward, backward)
        assert torch.equal(forward, shuffled)

    def test_fixed_training_backpropagates_into_extractor(self):
        bias = attached(BiasMode.FIXED).train()
        bias(batch=2).sum().backward()
        assert bias.extractor.fc.weight.grad is not None

    def test_varied_depends_on_iteration(self):
        bias = attached(BiasMode.VARIED).train()
        with torch.no_grad():
            first = bias(batch=1, iteration=0)
            again = bias(batch=1, iteration=0)
            others = [bias(batch=1, iteration=i) for i in range(1, 12)]
        assert torch.equal(first, again)
        assert any(not torch.allclose(first, other) for other in others)

    def test_learnable(self):
        bias = attached(BiasMode.LEARNABLE)
        assert bias.extractor is None
        emb = bias(batch=4)
        assert emb.requires_grad
        assert tuple(emb.shape) == (1, 8)
        assert float(bias.learnable.abs().max()) < 0.1

    def test_speaker_rows(self):
        speakers = {"kw0": "spk0", "kw1": "spk0", "kw2": "spk1", "kw3": "spk1"}
        bias = attached(BiasMode.SPEAKER, speakers=speakers).eval()
        emb = bias(batch=3, speakers=["spk0", "spk1", "spk0"])
        assert tuple(emb.shape) == (3, 8)
        assert torch.equal(emb[0], emb[2])
        assert not torch.allclose(emb[0], emb[1])

    def test_unknown_speaker_falls_back_to_list(self):
        bias = attached(BiasMode.SPEAKER, speakers={"kw0": "spk0"}).eval()
        with torch.no_grad():
            fallback = bias(batch=1, speakers=["nobody"])[0]
            expected = bias.mean_embedding(bias.bias_list.entries)
        assert torch.allclose(fallback, expected, atol=1e-6)

    def test_missing_audio_rejected(self):
        bias = ContextBias(micro_model_cfg())
        with pytest.raises(BiasError, match="without audio"):
            bias.attach(BiasList(mode=BiasMode.FIXED, entries=["ghost"]), clips(1))

    def test_list_required(self):
        bias = ContextBias(micro_model_cfg()).train()
        with pytest.raises(BiasError, match="needs a bias list"):
            bias(batch=1)

    def test_cache_travels_with_state_dict(self):
        bias = attached(BiasMode.FIXED)
        bias.refresh_cache()
        restored = ContextBias(micro_model_cfg(bias_mode=BiasMode.FIXED, bias_list_size=2), seed=3)
        restored.load_state_dict(bias.state_dict())
        restored.eval()
        assert torch.equal(restored(batch=1)[0], bias.cached_embedding)
