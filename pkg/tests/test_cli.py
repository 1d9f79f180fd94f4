import io
import types

import numpy as np
import orjson
import pandas as pd
import pytest

from dccrn_kws.checkpoint import load_checkpoint
from dccrn_kws.cli import command_names, dispatch
from dccrn_kws.config import load_config
from dccrn_kws.routers.common import adopt_sections, run_config
from dccrn_kws.routers.stream import pcm_chunks
from dccrn_kws.simulate import UtteranceType, load_manifest
from tests.conftest import micro_run_cfg


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Toy corpus, a micro config and one short training run, all driven through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert dispatch([
        "make-toy-corpus", "--output-dir", str(corpus), "--train-speakers", "2", "--test-speakers", "2",
        "--seed", "1",
    ]) == 0

    cfg = micro_run_cfg(root / "run").with_overrides(
        train_manifest=str(corpus / "train.jsonl"),
        test_manifest=str(corpus / "test.jsonl"),
        iterations=2,
    )
    conf = root / "micro.conf"
    conf.write_text(cfg.dump(), encoding="utf-8")

    assert dispatch(["make-bias-list", "-c", str(conf), "--output", str(root / "bias" / "bias.json")]) == 0
    assert dispatch([
        "train", "-c", str(conf), "--bias-list", str(root / "bias" / "bias.json"), "--output-dir", str(root / "run"),
    ]) == 0
    return types.SimpleNamespace(root=root, corpus=corpus, conf=conf, run=root / "run", cfg=cfg)


@pytest.fixture
def keyword_wav(workspace):
    entries = load_manifest(workspace.corpus / "test.jsonl")
    return next(e.path for e in entries if e.type == UtteranceType.KEYWORD)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


class TestDispatch:
    def test_all_commands_registered(self):
        assert set(command_names()) == {
            "simulate", "make-toy-corpus", "make-bias-list", "train", "eval-roc", "eval-wake",
            "export-energy", "plot", "stream", "bench-rtf",
        }

    @pytest.mark.parametrize("name", command_names())
    def test_help(self, name, monkeypatch, capsys):
        monkeypatch.setenv("COLUMNS", "200")
        assert dispatch([name, "--help"]) == 0
        assert "--" in capsys.readouterr().out

    def test_unknown_command(self):
        assert dispatch(["no-such-command"]) == 2

    def test_bad_config_key(self, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("seed: 1\nkws_dims: 8\n", encoding="utf-8")
        assert dispatch(["train", "-c", str(conf)]) == 2
        err = capsys.readouterr().err
        assert "error code=2 type=ConfigError" in err
        assert "kws_dims" in err and "bad.conf:2" in err

    def test_missing_config_file(self, tmp_path, capsys):
        assert dispatch(["simulate", "-c", str(tmp_path / "nope.conf")]) == 2
        assert "does not exist" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        assert dispatch(["simulate", "--output-dir", str(tmp_path)]) == 2
        assert "no manifest given" in capsys.readouterr().err


class TestCommonHelpers:
    def test_feature_merge_switch(self):
        assert run_config(None, feature_merge="off").model.feature_merge is False
        assert run_config(None, feature_merge="on").model.feature_merge is True

    def test_adopt_sections_keeps_model(self, tmp_path):
        base = micro_run_cfg(tmp_path / "a")
        other = micro_run_cfg(tmp_path / "b", kws_dim=16).with_overrides(refractory=50)
        merged = adopt_sections(base, other)
        assert merged.model == base.model
        assert merged.eval.refractory == 50
        assert merged.paths.output_dir == tmp_path / "b"

    def test_pcm_chunks_carry_odd_bytes(self):
        pcm = np.array([1000, -2000, 3000], dtype="<i2").tobytes()
        chunks = list(pcm_chunks(io.BytesIO(pcm[:5]), 2))
        samples = np.concatenate(chunks)
        assert samples.tolist() == pytest.approx([1000 / 32768, -2000 / 32768])


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


class TestPipeline:
    def test_simulate_writes_pairs(self, workspace):
        out = workspace.root / "sim"
        assert dispatch([
            "simulate", "-c", str(workspace.conf), "--output-dir", str(out), "--count", "3", "--seed", "2",
        ]) == 0
        records = [orjson.loads(line) for line in (out / "mixtures.jsonl").read_bytes().splitlines()]
        assert len(records) == 3
        for record in records:
            stem = record["stem"]
            assert (out / f"{stem}_noisy.wav").exists()
            assert (out / f"{stem}_target.wav").exists()
            labels = pd.read_csv(out / f"{stem}.labels.tsv", sep="\t")
            assert list(labels.columns) == ["frame", "label"]
            assert set(labels["label"]) <= {-1, 0, 1}
        assert load_config(out / "resolved.conf").train.seed == 2

    def test_simulate_keywords_only(self, workspace):
        out = workspace.root / "sim_kw"
        assert dispatch([
            "simulate", "-c", str(workspace.conf), "--output-dir", str(out), "--count", "2", "--kind", "keyword",
            "--snr-db", "5",
        ]) == 0
        records = [orjson.loads(line) for line in (out / "mixtures.jsonl").read_bytes().splitlines()]
        assert all(r["positive"] > 0 for r in records)

    def test_bias_list_file(self, workspace):
        data = orjson.loads((workspace.root / "bias" / "bias.json").read_bytes())
        assert data["mode"] == "fixed"
        assert len(data["entries"]) == workspace.cfg.model.bias_list_size
        assert (workspace.root / "bias" / "resolved.conf").exists()

    def test_train_outputs(self, workspace):
        ckpt = load_checkpoint(workspace.run / "latest.ckpt")
        assert ckpt.iteration == 2
        assert ckpt.config_hash == workspace.cfg.config_hash()
        assert len(pd.read_csv(workspace.run / "train_log.tsv", sep="\t")) == 2
        assert load_config(workspace.run / "resolved.conf").config_hash() == workspace.cfg.config_hash()

    def test_eval_roc(self, workspace):
        assert dispatch(["eval-roc", "--checkpoint", str(workspace.run / "latest.ckpt")]) == 0
        out = workspace.run / "eval"
        summary = orjson.loads((out / "summary.json").read_bytes())
        assert summary["config_hash"] == workspace.cfg.config_hash()
        assert [c["condition"] for c in summary["conditions"]] == ["-5", "0", "5", "clean"]
        table = pd.read_csv(out / "roc_clean.tsv", sep="\t")
        assert table["false_reject_rate"].is_monotonic_increasing

    def test_eval_wake(self, workspace):
        out = workspace.root / "wake"
        assert dispatch([
            "eval-wake", "--checkpoint", str(workspace.run / "latest.ckpt"), "--output-dir", str(out),
        ]) == 0
        wake = pd.read_csv(out / "wake.tsv", sep="\t")
        assert list(wake["condition"].astype(str)) == ["-5", "0", "5", "clean"]
        assert (out / "summary_wake.json").exists()

    def test_stream_file(self, workspace, keyword_wav, capsys):
        assert dispatch([
            "stream", "--checkpoint", str(workspace.run / "latest.ckpt"), "--audio", str(keyword_wav),
            "--threshold", "0.0",
        ]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        frames = [int(line.split()[0]) for line in lines]
        assert frames[0] == 0
        assert all(b - a == workspace.cfg.eval.refractory for a, b in zip(frames, frames[1:]))
        assert lines[0].split()[1] == "0.00"

    def test_stream_stdin(self, workspace, monkeypatch, capsys):
        pcm = (np.random.default_rng(0).integers(-3000, 3000, 16000)).astype("<i2").tobytes()
        monkeypatch.setattr("sys.stdin", types.SimpleNamespace(buffer=io.BytesIO(pcm)))
        assert dispatch([
            "stream", "--checkpoint", str(workspace.run / "latest.ckpt"), "--threshold", "0.0",
        ]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 5
        assert all(len(line.split()) == 3 for line in lines)

    def test_energy_and_plot(self, workspace, keyword_wav, capsys):
        table = workspace.root / "energy" / "energy.tsv"
        ckpt = workspace.run / "latest.ckpt"
        capsys.readouterr()
        assert dispatch([
            "export-energy", "--checkpoint", str(ckpt), "--audio", str(keyword_wav), "--output", str(table),
        ]) == 0
        frame = pd.read_csv(table, sep="\t")
        assert list(dict.fromkeys(frame["row"])) == ["layer1", "layer2", "merged"]
        printed = capsys.readouterr().err
        assert "Learned merge weights" in printed
        for w in load_checkpoint(ckpt).tensors["merge.weights"].tolist():
            assert f"{w:.4f}" in printed

        image = workspace.root / "energy" / "energy.png"
        assert dispatch([
            "plot", "--table", str(table), "--output", str(image), "--checkpoint", str(ckpt), "--title", "toy",
        ]) == 0
        assert image.read_bytes()[:4] == b"\x89PNG"

    def test_bench_rtf(self, workspace):
        out = workspace.root / "rtf"
        assert dispatch([
            "bench-rtf", "-c", str(workspace.conf), "--mode", "KWS-only", "--mode", "+CCL", "--output-dir", str(out),
        ]) == 0
        table = pd.read_csv(out / "rtf.tsv", sep="\t")
        assert table["mode"].tolist() == ["KWS-only", "+CCL"]
        assert (table["rtf"] > 0).all()
        assert (out / "summary.json").exists()

    def test_bench_rtf_with_checkpoint(self, workspace):
        out = workspace.root / "rtf_ckpt"
        assert dispatch([
            "bench-rtf", "-c", str(workspace.conf), "--mode", "+CCL", "--checkpoint",
            str(workspace.run / "latest.ckpt"), "--output-dir", str(out),
        ]) == 0
        assert pd.read_csv(out / "rtf.tsv", sep="\t")["mode"].tolist() == ["+CCL"]
