from pathlib import Path

import pytest

from dccrn_kws.config import (
    Architecture,
    BiasMode,
    ProjectionMode,
    RunConfig,
    build_config,
    load_config,
    parse_flat_file,
)
from dccrn_kws.errors import ConfigError
from dccrn_kws.settings import resolve_config_path

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestShippedConfigs:
    def test_full_config_matches_defaults(self):
        cfg = load_config(CONFIG_DIR / "full.conf")
        assert cfg.model.encoder_channels == [16, 32, 64, 128, 256, 256]
        assert cfg.model.freq_bins == 256
        assert cfg.model.projection == ProjectionMode.CCL
        assert cfg.train.warmup == 1000
        assert cfg.config_hash() == RunConfig().config_hash()

    def test_toy_config_is_small(self):
        cfg = load_config(CONFIG_DIR / "toy.conf")
        assert cfg.model.freq_bins == 16
        assert cfg.train.iterations <= 2000

    def test_relative_paths_resolve_against_config_dir(self):
        cfg = load_config(CONFIG_DIR / "toy.conf")
        assert cfg.paths.train_manifest == CONFIG_DIR / "../data/toy/train.jsonl"


class TestValidation:
    def test_unknown_key_names_file_and_line(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("seed: 1\nkws_dims: 64\n")
        with pytest.raises(ConfigError, match=r"kws_dims.*bad\.conf:2"):
            load_config(path)

    def test_bad_type_names_key_and_line(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("iterations: 10\nprojection: sideways\n")
        with pytest.raises(ConfigError, match=r"projection.*bad\.conf:2"):
            load_config(path)

    def test_nested_values_rejected(self, tmp_path):
        path = tmp_path / "nested.conf"
        path.write_text("model:\n  freq_bins: 16\n")
        with pytest.raises(ConfigError, match="flat"):
            load_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "dup.conf"
        path.write_text("seed: 1\nseed: 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_flat_file(path)

    def test_odd_channel_counts_rejected(self):
        with pytest.raises(ConfigError, match="encoder_channels"):
            build_config({"encoder_channels": [3, 8]})

    def test_freq_bins_must_halve_per_layer(self):
        with pytest.raises(ConfigError, match="freq_bins"):
            build_config({"freq_bins": 20, "encoder_channels": [4, 8, 8]})

    def test_window_must_be_whole_samples(self):
        with pytest.raises(ConfigError, match="whole numbers"):
            build_config({"win_ms": 25.03})

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.conf"
        path.write_text("")
        assert load_config(path).flat() == RunConfig().flat()


class TestOverridesAndHash:
    def test_overrides_accept_enums(self):
        cfg = RunConfig().with_overrides(
            projection=ProjectionMode.PLAIN, bias_mode=BiasMode.LEARNABLE, architecture=Architecture.KWS,
        )
        assert cfg.model.projection == ProjectionMode.PLAIN
        assert cfg.model.bias_mode == BiasMode.LEARNABLE
        assert cfg.model.architecture == Architecture.KWS

    def test_none_overrides_are_ignored(self):
        assert RunConfig().with_overrides(seed=None).train.seed == 0

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="nonsense"):
            RunConfig().with_overrides(nonsense=1)

    def test_hash_tracks_model_shape_only(self):
        base = RunConfig()
        assert base.with_overrides(threshold=0.7, seed=3).config_hash() == base.config_hash()
        assert base.with_overrides(kws_dim=64).config_hash() != base.config_hash()

    def test_resolved_config_reloads_identically(self, tmp_path):
        cfg = RunConfig().with_overrides(seed=5, projection="bias", output_dir=str(tmp_path / "out"))
        path = cfg.write_resolved(tmp_path)
        assert path.name == "resolved.conf"
        again = load_config(path)
        assert again.flat() == cfg.flat()
        assert again.config_hash() == cfg.config_hash()


class TestSettings:
    def test_existing_path_is_used_directly(self, tmp_path):
        path = tmp_path / "x.conf"
        path.write_text("seed: 1\n")
        assert resolve_config_path(path) == path

    def test_missing_name_falls_through(self):
        assert resolve_config_path("no_such_file.conf") == Path("no_such_file.conf")
