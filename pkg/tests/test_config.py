"""Tests for configuration loading and parsing."""

from __future__ import annotations

from pathlib import Path

import pytest

from medvidqa_kit.config import (
    CONFIG_FILENAME,
    DEFAULT_RULES,
    PipelineConfig,
    RuleConfig,
    config_layers,
    load_config,
)
from medvidqa_kit.errors import ConfigError


def _write(path: Path, content: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content, encoding='utf-8')
    return path


class TestConfigLoading:
    """Test configuration file loading from different locations."""

    def test_load_default_config(self):
        """Test defaults when no config files exist."""
        config = load_config()

        assert config.strategy.strategy == 'run1_orig_max'
        assert config.strategy.encoders == ['stub-256', 'stub-512']
        assert config.localization.theta == 0.5
        assert config.output_dir == Path("mvqa-out")
        assert config.embedding.backend == 'http'
        assert config.stub_mode is False
        assert config.sources == []

    def test_load_config_from_project_root(self):
        """Test loading ./medvidqa-kit.toml from the working directory."""
        _write(Path.cwd() / CONFIG_FILENAME, "[retrieval]\nk = 7\n")

        config = load_config()

        assert config.strategy.k == 7
        assert config.sources == [Path.cwd() / CONFIG_FILENAME]

    def test_load_config_from_user_home(self, isolated_config):
        """Test loading ~/.config/medvidqa-kit.toml."""
        _write(isolated_config, "[localization]\ntheta = 0.3\n")

        assert load_config().localization.theta == 0.3

    def test_tables_merge_key_by_key(self, isolated_config):
        """Test that a project file overrides the user file one key at a time."""
        _write(isolated_config, "[retrieval]\nk = 20\nrrf_k = 30.0\n")
        _write(Path.cwd() / CONFIG_FILENAME, "[retrieval]\nk = 7\n")

        config = load_config()

        assert config.strategy.k == 7
        assert config.strategy.rrf_k == 30.0

    def test_explicit_config_has_priority(self, tmp_path):
        """Test that --config beats the project file."""
        _write(Path.cwd() / CONFIG_FILENAME, "[retrieval]\nk = 7\n")
        explicit = _write(tmp_path / "custom.toml", "[retrieval]\nk = 3\n")

        config = load_config(explicit)

        assert config.strategy.k == 3
        assert config_layers(explicit)[-1] == explicit

    def test_overrides_have_highest_priority(self, tmp_path):
        """Test that CLI overrides beat every file, including dotted sections."""
        explicit = _write(tmp_path / "custom.toml", "[localization]\ntheta = 0.2\n[services.chat]\nmodel = \"a\"\n")

        config = load_config(explicit, {'localization': {'theta': 0.9}, 'services.chat': {'model': "b"}})

        assert config.localization.theta == 0.9
        assert config.chat.model == "b"

    def test_missing_explicit_config(self, tmp_path):
        """Test that a missing --config file is an error, not a silent default."""
        with pytest.raises(ConfigError, match="Config file not found"):
            load_config(tmp_path / "nope.toml")

    def test_invalid_toml_syntax(self, tmp_path):
        """Test that broken TOML raises ConfigError."""
        bad = _write(tmp_path / "bad.toml", "[retrieval\nk = 1\n")

        with pytest.raises(ConfigError, match="TOML syntax error"):
            load_config(bad)

    def test_unknown_keys_are_ignored(self, tmp_path):
        """Test that the loader skips unknown keys (validate-config reports them)."""
        path = _write(tmp_path / "extra.toml", "[retrieval]\nk = 4\ncolour = \"blue\"\n[extras]\nx = 1\n")

        assert load_config(path).strategy.k == 4


class TestPathResolution:
    """Test that relative paths follow the file that sets them."""

    def test_relative_to_config_file(self, tmp_path):
        path = _write(tmp_path / "proj" / "conf.toml", "[paths]\ncorpus_dir = \"corpus\"\ntopics = \"data/topics.json\"\n")

        config = load_config(path)

        assert config.corpus_dir == (tmp_path / "proj" / "corpus").resolve()
        assert config.topics_path == (tmp_path / "proj" / "data" / "topics.json").resolve()

    def test_overrides_relative_to_cwd(self):
        config = load_config(overrides={'paths': {'output_dir': "runs"}})

        assert config.output_dir == (Path.cwd() / "runs").resolve()

    def test_absolute_paths_kept(self, tmp_path):
        target = tmp_path / "abs-out"
        path = _write(tmp_path / "conf.toml", f"[paths]\noutput_dir = \"{target.as_posix()}\"\n")

        assert load_config(path).output_dir == target

    def test_cache_dir_defaults_under_output_dir(self, tmp_path):
        path = _write(tmp_path / "conf.toml", "[paths]\noutput_dir = \"out\"\n")

        config = load_config(path)

        assert config.embedding.cache_dir == config.output_dir / "cache"
        assert config.chat.cache_dir == config.output_dir / "cache"

    def test_explicit_cache_dir(self, tmp_path):
        path = _write(tmp_path / "conf.toml", "[services.chat]\ncache_dir = \"chat-cache\"\n")

        assert load_config(path).chat.cache_dir == (tmp_path / "chat-cache").resolve()


class TestTypeChecking:
    """Test that values of the wrong type are rejected."""

    @pytest.mark.parametrize("snippet, message", [
        ("[retrieval]\nk = \"ten\"", "must be an integer"),
        ("[retrieval]\nk = true", "got a boolean"),
        ("[localization]\ntheta = \"high\"", "must be a number"),
        ("[retrieval]\nencoders = \"stub-8\"", "must be a list"),
        ("[retrieval]\nencoders = [\"stub-8\", 3]", "list of non-empty strings"),
        ("[pipeline]\nstub = 1", "must be a boolean"),
    ])
    def test_wrong_type(self, tmp_path, snippet, message):
        path = _write(tmp_path / "conf.toml", snippet + "\n")

        with pytest.raises(ConfigError, match=message):
            load_config(path)

    def test_integer_accepted_for_number(self, tmp_path):
        path = _write(tmp_path / "conf.toml", "[localization]\ntau = 1\n")

        assert load_config(path).localization.tau == 1

    @pytest.mark.parametrize("snippet", [
        "[localization]\ntheta = 1.5",
        "[localization]\nwindow = 4",
        "[retrieval]\nstrategy = \"run9\"",
        "[services.chat]\nbackend = \"grpc\"",
        "[pipeline]\nworkers = 0",
    ])
    def test_invalid_values(self, tmp_path, snippet):
        path = _write(tmp_path / "conf.toml", snippet + "\n")

        with pytest.raises(ConfigError):
            load_config(path)


class TestPipelineConfig:
    """Test the derived settings of PipelineConfig."""

    def test_strategy_alias(self):
        assert load_config(overrides={'retrieval': {'strategy': "run3"}}).strategy.strategy == 'run3_fused'

    def test_localizer_uses_first_encoder(self):
        config = load_config(overrides={'retrieval': {'encoders': ["stub-64", "stub-32"], 'vision_encoder': "stub-4"}})

        assert config.localization.text_encoder == "stub-64"
        assert config.localization.vision_encoder == "stub-4"

    def test_stub_mode_forces_both_services(self):
        config = load_config(overrides={'pipeline': {'stub': True}})

        assert config.embedding.backend == 'stub'
        assert config.chat.backend == 'stub'

    def test_fixtures_dir_reaches_chat(self, tmp_path):
        path = _write(tmp_path / "conf.toml", "[paths]\nfixtures_dir = \"rec\"\n")

        assert load_config(path).chat.fixtures_dir == (tmp_path / "rec").resolve()

    def test_seed_reaches_services(self):
        config = load_config(overrides={'pipeline': {'seed': 11}})

        assert config.embedding.seed == 11
        assert config.chat.seed == 11

    def test_require_unconfigured(self):
        with pytest.raises(ConfigError, match="No topics configured"):
            PipelineConfig().require('topics_path')

    def test_require_missing_file(self, tmp_path):
        config = PipelineConfig(topics_path=tmp_path / "topics.json")

        with pytest.raises(ConfigError, match="Topics not found"):
            config.require('topics_path')

    def test_require_existing(self, mini_config_path):
        config = load_config(mini_config_path)

        assert config.require('corpus_dir') == config.corpus_dir


class TestRuleConfig:
    """Test cleaning rule settings."""

    def test_defaults(self):
        config = RuleConfig()

        assert config.is_enabled('strip_markup') is True
        assert config.is_enabled('drop_noise_tags') is False

    def test_unknown_rule_disabled(self):
        assert RuleConfig().is_enabled('no_such_rule') is False

    def test_partial_override_keeps_defaults(self, tmp_path):
        path = _write(tmp_path / "conf.toml", "[cleaning]\ndrop_noise_tags = true\n")

        rules = load_config(path).cleaning.rules

        assert rules['drop_noise_tags'] is True
        assert rules['strip_markup'] is DEFAULT_RULES['strip_markup']
