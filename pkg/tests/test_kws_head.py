import numpy as np
import pytest
import torch

from dccrn_kws.config import ModelConfig, ProjectionMode
from dccrn_kws.errors import BiasError, ShapeError, StreamStateError
from dccrn_kws.kws_head import (
    ComplexContextLinear,
    DecisionState,
    Detection,
    DtcStack,
    PosteriorTrack,
    Projection,
    build_projection,
    smooth_and_decide,
    smooth_posteriors,
)
from tests.conftest import micro_model_cfg


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


class TestProjectionShapes:
    def test_full_size_weight_shapes(self):
        plain = build_projection(1024, ModelConfig(projection=ProjectionMode.PLAIN))
        concat = build_projection(1024, ModelConfig(projection=ProjectionMode.BIAS_CONCAT))
        ccl = build_projection(1024, ModelConfig(projection=ProjectionMode.CCL))
        assert tuple(plain.linear.weight.shape) == (128, 1024)
        assert tuple(concat.linear.weight.shape) == (128, 1216)
        assert [tuple(m.weight.shape) for m in ccl.real_branches] == [(64, 608)] * 3

    def test_context_linear_is_smaller_than_naive(self):
        ccl = ComplexContextLinear(1024, ModelConfig())
        assert ccl.weight_count == 233_472
        assert ccl.naive_weight_count == 417_792
        assert ccl.weight_count / ccl.naive_weight_count < 0.6


class TestProjection:
    def test_bias_required(self, model_cfg):
        proj = Projection(32, model_cfg, with_bias=True)
        with pytest.raises(BiasError, match="requires"):
            proj(torch.randn(1, 4, 32))

    def test_plain_rejects_bias(self, model_cfg):
        proj = Projection(32, model_cfg, with_bias=False)
        with pytest.raises(BiasError, match="takes no"):
            proj(torch.randn(1, 4, 32), torch.randn(8))

    def test_bias_dim_checked(self, model_cfg):
        proj = Projection(32, model_cfg, with_bias=True)
        with pytest.raises(BiasError, match="expected 8"):
            proj(torch.randn(1, 4, 32), torch.randn(6))

    def test_shared_bias_broadcasts(self, model_cfg):
        proj = Projection(32, model_cfg, with_bias=True)
        out = proj(torch.randn(3, 4, 32), torch.randn(8))
        assert tuple(out.shape) == (3, 4, 8)
        assert (out >= 0).all()

    def test_feature_width_checked(self, model_cfg):
        with pytest.raises(ShapeError, match="32-dim"):
            Projection(32, model_cfg, with_bias=False)(torch.randn(1, 4, 30))


class TestComplexContextLinear:
    def test_requires_bias(self, model_cfg):
        with pytest.raises(BiasError, match="requires"):
            ComplexContextLinear(32, model_cfg)(torch.randn(1, 4, 32), None)

    def test_only_past_frames_contribute(self, model_cfg):
        ccl = ComplexContextLinear(32, model_cfg)
        feat, bias = torch.randn(1, 10, 32), torch.randn(8)
        moved = feat.clone()
        moved[:, 6:] += 1.0
        a, _ = ccl(feat, bias)
        b, _ = ccl(moved, bias)
        assert torch.allclose(a[:, :6], b[:, :6])

    def test_context_reaches_back(self, model_cfg):
        ccl = ComplexContextLinear(32, model_cfg)
        feat, bias = torch.randn(1, 10, 32), torch.randn(8)
        moved = feat.clone()
        moved[:, 4] += 1.0
        a, _ = ccl(feat, bias, activate=False)
        b, _ = ccl(moved, bias, activate=False)
        changed = [t for t in range(10) if not torch.allclose(a[:, t], b[:, t])]
        assert changed == [4, 5, 6]

    def test_streaming_matches_offline(self, model_cfg):
        ccl = ComplexContextLinear(32, model_cfg)
        feat, bias = torch.randn(2, 9, 32), torch.randn(2, 8)
        full, _ = ccl(feat, bias)
        history, outs = None, []
        for lo in (0, 1, 5):
            hi = {0: 1, 1: 5, 5: 9}[lo]
            y, history = ccl(feat[:, lo:hi], bias, history)
            outs.append(y)
        assert torch.allclose(torch.cat(outs, dim=1), full, atol=1e-6)

    def test_superposition(self, model_cfg):
        ccl = ComplexContextLinear(32, model_cfg)
        with torch.no_grad():
            for branch in (*ccl.real_branches, *ccl.imag_branches):
                branch.bias.zero_()
        x, y = torch.randn(1, 6, 32), torch.randn(1, 6, 32)
        bx, by = torch.randn(8), torch.randn(8)
        fx, _ = ccl(x, bx, activate=False)
        fy, _ = ccl(y, by, activate=False)
        both, _ = ccl(2.0 * x - 3.0 * y, 2.0 * bx - 3.0 * by, activate=False)
        assert torch.allclose(both, 2.0 * fx - 3.0 * fy, atol=1e-5)

    def test_bad_history(self, model_cfg):
        ccl = ComplexContextLinear(32, model_cfg)
        with pytest.raises(StreamStateError, match="context history"):
            ccl(torch.randn(1, 3, 32), torch.randn(8), torch.zeros(1, 1, 32))

    def test_gradcheck(self, model_cfg):
        ccl = ComplexContextLinear(32, model_cfg).double()
        feat = torch.randn(1, 4, 32, dtype=torch.float64, requires_grad=True)
        bias = torch.randn(8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda f, b: ccl(f, b, activate=False)[0], (feat, bias))


# ---------------------------------------------------------------------------
# Temporal convolution stack
# ---------------------------------------------------------------------------


class TestDtcStack:
    def test_receptive_field(self, model_cfg):
        assert DtcStack(model_cfg).receptive_field == 7
        assert DtcStack(ModelConfig()).receptive_field == 241

    def test_cyclic_dilations(self):
        cfg = micro_model_cfg(dtc_blocks=5, dtc_dilations=[1, 2, 4])
        assert DtcStack(cfg).dilations == [1, 2, 4, 1, 2]

    def test_posteriors_are_distributions(self, model_cfg):
        probs, state = DtcStack(model_cfg).eval()(torch.randn(2, 12, 8))
        assert tuple(probs.shape) == (2, 12, 2)
        assert torch.allclose(probs.sum(-1), torch.ones(2, 12))
        assert [tuple(h.shape) for h in state] == [(2, 8, 2), (2, 8, 4)]

    def test_causal(self, model_cfg):
        stack = DtcStack(model_cfg).eval()
        x = torch.randn(1, 20, 8)
        y = x.clone()
        y[:, 12:] = torch.randn(1, 8, 8)
        with torch.no_grad():
            a, _ = stack(x)
            b, _ = stack(y)
        assert torch.allclose(a[:, :12], b[:, :12], atol=1e-6)

    def test_streaming_matches_offline(self, model_cfg):
        stack = DtcStack(model_cfg).eval()
        x = torch.randn(1, 15, 8)
        with torch.no_grad():
            full, _ = stack(x)
            state, outs = None, []
            for lo in range(0, 15, 5):
                y, state = stack(x[:, lo:lo + 5], state)
                outs.append(y)
        assert torch.allclose(torch.cat(outs, dim=1), full, atol=1e-5)

    def test_state_block_count(self, model_cfg):
        with pytest.raises(StreamStateError, match="blocks"):
            DtcStack(model_cfg)(torch.randn(1, 3, 8), state=[torch.zeros(1, 8, 2)])

    def test_width_checked(self, model_cfg):
        with pytest.raises(ShapeError, match="8-dim"):
            DtcStack(model_cfg)(torch.randn(1, 3, 6))


# ---------------------------------------------------------------------------
# Smoothing and decisions
# ---------------------------------------------------------------------------


class TestDecisions:
    def test_smoothing_example(self):
        smoothed = smooth_posteriors(np.array([0, 0, 1, 1, 1]), 3)
        assert smoothed == pytest.approx([0.0, 0.0, 1 / 3, 2 / 3, 1.0])

    def test_smoothing_window_one_is_identity(self):
        x = np.array([0.1, 0.9, 0.4])
        assert smooth_posteriors(x, 1) == pytest.approx(x)

    def test_refractory_spacing(self):
        detections = smooth_and_decide(PosteriorTrack(np.ones(250)), 0.5, smooth_win=30, refractory=100)
        assert [d.frame for d in detections] == [0, 100, 200]

    def test_threshold_is_inclusive(self):
        detections = smooth_and_decide(PosteriorTrack([0.2, 0.5, 0.2]), 0.5, smooth_win=1, refractory=10)
        assert detections == [Detection(1, 0.5, 0.5)]

    def test_empty_track(self):
        assert smooth_and_decide(PosteriorTrack([]), 0.5) == []

    def test_posteriors_out_of_range(self):
        with pytest.raises(ShapeError, match=r"\[0, 1\]"):
            PosteriorTrack([0.2, 1.2])

    def test_detection_time(self):
        assert Detection(150, 0.9, 0.5).time_s() == pytest.approx(1.5)

    @pytest.mark.parametrize("chunk", [1, 7, 64])
    def test_incremental_matches_offline(self, rng, chunk):
        values = np.clip(rng.normal(0.4, 0.3, size=600), 0, 1)
        offline = smooth_and_decide(PosteriorTrack(values), 0.55, smooth_win=10, refractory=50)
        state = DecisionState(threshold=0.55, smooth_win=10, refractory=50)
        online = []
        for lo in range(0, len(values), chunk):
            online.extend(state.push(values[lo:lo + chunk]))
        assert [d.frame for d in online] == [d.frame for d in offline]
        assert [d.score for d in online] == pytest.approx([d.score for d in offline])
        assert state.frames_seen == 600
