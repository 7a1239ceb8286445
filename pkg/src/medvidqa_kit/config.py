"""Configuration loading and management for medvidqa-kit."""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

# tomllib ships with Python 3.11+; tomli is the same parser for older versions
try:
    import tomllib
except ImportError:
    import tomli as tomllib

from .clients import ServiceConfig
from .errors import ConfigError
from .localization import LocalizationConfig
from .retrieval import StrategyConfig

logger = logging.getLogger(__name__)

CONFIG_FILENAME = "medvidqa-kit.toml"
PROJECT_CONFIG_PATH = Path(CONFIG_FILENAME)
USER_CONFIG_PATH = Path.home() / ".config" / CONFIG_FILENAME


# Default cleaning rule settings
DEFAULT_RULES = {
    'strip_markup': True,
    'decode_entities': True,
    'drop_noise_tags': False,  # Optional, off by default
    'strip_speaker_dashes': False,  # Optional, off by default
    'collapse_whitespace': True,
}


# Rule descriptions for documentation and list-rules
RULE_DESCRIPTIONS = {
    'strip_markup': 'Remove subtitle markup and inline timestamps (<i>, <c.yellow>, <00:00:01.000>)',
    'decode_entities': 'Decode HTML entities (&amp; &lt; &gt; &nbsp; → & < > space)',
    'drop_noise_tags': 'Drop bracketed non-speech tags ([Music], [Applause], (laughs), ♪ ... ♪)',
    'strip_speaker_dashes': 'Remove leading speaker markers ("- " and ">> ") on each cue line',
    'collapse_whitespace': 'Collapse whitespace runs and line breaks to single spaces',
}

NUMBER = (int, float)

# Known sections and the type of every key; the loader copies only these
SERVICE_KEYS: dict[str, Any] = {
    'endpoint': str,
    'api_key_env': str,
    'timeout_s': NUMBER,
    'max_retries': int,
    'max_parallel': int,
    'cache_dir': str,
    'backend': str,
    'model': str,
    'stub_dim': int,
    'backoff_s': NUMBER,
    'batch_size': int,
}

SCHEMA: dict[str, dict[str, Any]] = {
    'paths': {
        'corpus_dir': str,
        'topics': str,
        'qrels': str,
        'gold_steps': str,
        'output_dir': str,
        'fixtures_dir': str,
    },
    'retrieval': {
        'strategy': str,
        'encoders': list,
        'vision_encoder': str,
        'k': int,
        'chunk_tokens': int,
        'chunk_stride': int,
        'rrf_k': NUMBER,
        'expansion_mode': str,
        'run_tag': str,
    },
    'localization': {
        'theta': NUMBER,
        'window': int,
        'tau': NUMBER,
        'top_videos': int,
    },
    'cleaning': {name: bool for name in DEFAULT_RULES},
    'services.embedding': SERVICE_KEYS,
    'services.chat': SERVICE_KEYS,
    'pipeline': {
        'stub': bool,
        'seed': int,
        'workers': int,
        'ndcg_cutoff': int,
    },
}

# Keys holding paths, resolved against the directory of the file that sets them
PATH_KEYS = {
    ('paths', key) for key in SCHEMA['paths']
} | {('services.embedding', 'cache_dir'), ('services.chat', 'cache_dir')}


@dataclass
class RuleConfig:
    """Configuration for transcript cleaning rules."""

    rules: dict[str, bool] = field(default_factory=lambda: DEFAULT_RULES.copy())

    def is_enabled(self, rule_name: str) -> bool:
        """Check if a rule is enabled.

        Args:
            rule_name: Name of the rule to check

        Returns:
            True if rule is enabled, falling back to the rule's default
        """
        return self.rules.get(rule_name, DEFAULT_RULES.get(rule_name, False))


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs, after all config layers and CLI overrides."""

    corpus_dir: Optional[Path] = None
    topics_path: Optional[Path] = None
    qrels_path: Optional[Path] = None
    gold_steps_path: Optional[Path] = None
    output_dir: Path = Path("mvqa-out")
    fixtures_dir: Optional[Path] = None
    strategy: Optional[StrategyConfig] = None
    localization: Optional[LocalizationConfig] = None
    cleaning: RuleConfig = field(default_factory=RuleConfig)
    embedding: Optional[ServiceConfig] = None
    chat: Optional[ServiceConfig] = None
    stub_mode: bool = False
    seed: int = 0
    workers: int = 1
    ndcg_cutoff: Optional[int] = None
    sources: list[Path] = field(default_factory=list)

    def __post_init__(self):
        self.strategy = self.strategy or StrategyConfig()
        self.localization = self.localization or LocalizationConfig()
        self.embedding = self.embedding or ServiceConfig()
        self.chat = self.chat or ServiceConfig()

        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.ndcg_cutoff is not None and self.ndcg_cutoff < 1:
            raise ConfigError(f"ndcg_cutoff must be >= 1, got {self.ndcg_cutoff}")

        # The localizer embeds with the first retrieval encoder
        self.localization.text_encoder = self.strategy.encoders[0]
        self.localization.vision_encoder = self.strategy.vision_encoder

        for service in (self.embedding, self.chat):
            if self.stub_mode:
                service.backend = 'stub'
            service.seed = self.seed
            if service.cache_dir is None:
                service.cache_dir = self.output_dir / "cache"
        if self.chat.fixtures_dir is None:
            self.chat.fixtures_dir = self.fixtures_dir

    @property
    def theta(self) -> float:
        return self.localization.theta

    def require(self, attr: str) -> Path:
        """Return a configured input path, checking that it exists.

        Raises:
            ConfigError: If the path is not configured or does not exist
        """
        value = getattr(self, attr)
        label = attr.replace('_path', '').replace('_', ' ')
        if value is None:
            raise ConfigError(f"No {label} configured (set it under [paths])")
        if not Path(value).exists():
            raise ConfigError(f"{label.capitalize()} not found: {value}")
        return Path(value)


def _section(data: dict[str, Any], name: str) -> Any:
    """Fetch a possibly dotted section ('services.chat') from parsed TOML."""
    node: Any = data
    for part in name.split('.'):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def _type_error(section: str, key: str, value: Any) -> str | None:
    expected = SCHEMA[section][key]
    # bool is an int subclass; never accept it for numeric keys
    if isinstance(value, bool) and expected is not bool:
        return f"[{section}] {key} must be {_type_name(expected)}, got a boolean"
    if not isinstance(value, expected):
        return f"[{section}] {key} must be {_type_name(expected)}, got {type(value).__name__}"
    if expected is list and not all(isinstance(v, str) and v for v in value):
        return f"[{section}] {key} must be a list of non-empty strings"
    return None


def _type_name(expected: Any) -> str:
    if expected is NUMBER:
        return "a number"
    return {str: "a string", int: "an integer", bool: "a boolean", list: "a list"}[expected]


def _load_toml_file(file_path: Path) -> dict[str, Any]:
    """Load and parse a TOML file.

    Raises:
        ConfigError: If the file cannot be read or is not valid TOML
    """
    try:
        with open(file_path, 'rb') as f:
            return tomllib.load(f)
    except (FileNotFoundError, PermissionError) as e:
        raise ConfigError(f"Cannot read config file {file_path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"TOML syntax error in {file_path}: {e}") from e


def _resolve_path(value: str, base_dir: Path) -> str:
    path = Path(value).expanduser()
    return str(path if path.is_absolute() else (base_dir / path).resolve())


def _merge_config_data(merged: dict[str, dict[str, Any]], config_data: dict[str, Any],
                       base_dir: Path | None) -> None:
    """Merge known keys of one config layer into ``merged`` (modified in place).

    Unknown sections and keys are ignored here and reported by validate_config.
    """
    for section, keys in SCHEMA.items():
        table = _section(config_data, section)
        if not isinstance(table, dict):
            continue
        target = merged.setdefault(section, {})
        for key, value in table.items():
            if key not in keys or isinstance(value, dict):
                continue
            problem = _type_error(section, key, value)
            if problem:
                raise ConfigError(problem)
            if (section, key) in PATH_KEYS and base_dir is not None:
                value = _resolve_path(value, base_dir)
            target[key] = value


def _build(merged: dict[str, dict[str, Any]], sources: list[Path]) -> PipelineConfig:
    paths = merged.get('paths', {})
    pipeline = merged.get('pipeline', {})

    def path(key: str) -> Path | None:
        return Path(paths[key]) if key in paths else None

    def service(section: str) -> ServiceConfig:
        values = dict(merged.get(section, {}))
        if 'cache_dir' in values:
            values['cache_dir'] = Path(values['cache_dir'])
        return ServiceConfig(**values)

    return PipelineConfig(
        corpus_dir=path('corpus_dir'),
        topics_path=path('topics'),
        qrels_path=path('qrels'),
        gold_steps_path=path('gold_steps'),
        output_dir=path('output_dir') or Path("mvqa-out"),
        fixtures_dir=path('fixtures_dir'),
        strategy=StrategyConfig(**merged.get('retrieval', {})),
        localization=LocalizationConfig(**merged.get('localization', {})),
        cleaning=RuleConfig(rules={**DEFAULT_RULES, **merged.get('cleaning', {})}),
        embedding=service('services.embedding'),
        chat=service('services.chat'),
        stub_mode=pipeline.get('stub', False),
        seed=pipeline.get('seed', 0),
        workers=pipeline.get('workers', 1),
        ndcg_cutoff=pipeline.get('ndcg_cutoff'),
        sources=sources,
    )


def config_layers(config_path: Path | None = None) -> list[Path]:
    """Config files that exist, lowest priority first."""
    layers = [p for p in (USER_CONFIG_PATH, Path.cwd() / PROJECT_CONFIG_PATH) if p.is_file()]
    if config_path is not None:
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {config_path}")
        layers.append(config_path)
    return layers


def load_config(config_path: Path | None = None,
                overrides: dict[str, dict[str, Any]] | None = None) -> PipelineConfig:
    """Load configuration from file.

    Configuration priority (highest to lowest):
    1. overrides (CLI flags, same table layout as the file)
    2. config_path (if provided via --config flag)
    3. ./medvidqa-kit.toml (project root)
    4. ~/.config/medvidqa-kit.toml (user config)
    5. Built-in defaults

    Tables merge key by key; relative paths resolve against the directory of
    the file that sets them (CLI paths against the working directory).

    Args:
        config_path: Optional explicit config file path
        overrides: Optional highest-priority values

    Returns:
        PipelineConfig instance with loaded configuration

    Raises:
        ConfigError: On a missing explicit file, bad TOML, wrong types or invalid values
    """
    merged: dict[str, dict[str, Any]] = {}
    sources = config_layers(config_path)
    for layer in sources:
        logger.debug("Loading config layer %s", layer)
        _merge_config_data(merged, _load_toml_file(layer), layer.resolve().parent)

    if overrides:
        _merge_config_data(merged, _nest(overrides), Path.cwd())

    try:
        return _build(merged, sources)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def _nest(overrides: dict[str, dict[str, Any]]) -> dict[str, Any]:
    """Turn {'services.chat': {...}} into the nested layout TOML produces."""
    nested: dict[str, Any] = {}
    for section, values in overrides.items():
        node = nested
        for part in section.split('.'):
            node = node.setdefault(part, {})
        node.update(copy.deepcopy(values))
    return nested


@dataclass
class ValidationResult:
    """Result of config file validation."""

    config_path: Path
    is_valid: bool = True
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def error(self, message: str) -> None:
        self.is_valid = False
        self.errors.append(message)

    def format_report(self) -> str:
        """Format a human-readable validation report.

        Returns:
            Formatted validation report string
        """
        lines = [f"Validating: {self.config_path}"]
        lines.append("")

        if self.is_valid and not self.warnings:
            lines.append("✓ Configuration is valid")
        else:
            if self.errors:
                lines.append("Errors:")
                for error in self.errors:
                    lines.append(f"  ✗ {error}")
                lines.append("")

            if self.warnings:
                lines.append("Warnings:")
                for warning in self.warnings:
                    lines.append(f"  ⚠ {warning}")
                lines.append("")

            if not self.errors:
                lines.append("✓ Configuration is valid (with warnings)")

        return "\n".join(lines)


def _check_structure(config_data: dict[str, Any], result: ValidationResult) -> None:
    known_top = {name.split('.')[0] for name in SCHEMA}
    for name, value in config_data.items():
        if name not in known_top:
            result.error(f"Unknown section: [{name}]. Valid sections: {', '.join(sorted(known_top))}")
        elif not isinstance(value, dict):
            result.error(f"'{name}' must be a table")

    services = config_data.get('services')
    if isinstance(services, dict):
        for name in services:
            if f"services.{name}" not in SCHEMA:
                result.error(f"Unknown section: [services.{name}]. Valid: [services.embedding], [services.chat]")

    for section, keys in SCHEMA.items():
        table = _section(config_data, section)
        if table is None:
            continue
        if not isinstance(table, dict):
            result.error(f"[{section}] must be a table")
            continue
        for key, value in table.items():
            if key not in keys:
                result.error(
                    f"Unknown key '{key}' in [{section}]. Valid keys: {', '.join(sorted(keys))}"
                )
                continue
            problem = _type_error(section, key, value)
            if problem:
                result.error(problem)


def _check_warnings(config: PipelineConfig, result: ValidationResult) -> None:
    for attr in ('corpus_dir', 'topics_path', 'qrels_path', 'gold_steps_path', 'fixtures_dir'):
        value = getattr(config, attr)
        if value is not None and not Path(value).exists():
            result.warnings.append(f"{attr} does not exist: {value}")
    for name, service in (('embedding', config.embedding), ('chat', config.chat)):
        if service.backend == 'http' and not config.stub_mode:
            if not service.endpoint:
                result.warnings.append(f"[services.{name}] uses the http backend but has no endpoint")
            if service.api_key_env and not os.environ.get(service.api_key_env):
                result.warnings.append(
                    f"[services.{name}] api_key_env {service.api_key_env} is not set in the environment"
                )


def validate_config(config_path: Path) -> ValidationResult:
    """Validate a configuration file.

    Checks:
    - File exists and is readable
    - Valid TOML syntax
    - Known sections and keys, with values of the right type
    - Value ranges and strategy names (by building the configuration)
    - Paths that do not exist and missing API key variables (warnings)

    Args:
        config_path: Path to config file to validate

    Returns:
        ValidationResult with validation details
    """
    result = ValidationResult(config_path=config_path)

    # Check if file exists
    if not config_path.exists():
        result.error(f"Config file not found: {config_path}")
        return result

    # Check if file is readable
    if not config_path.is_file():
        result.error(f"Path is not a file: {config_path}")
        return result

    # Try to load and parse TOML
    try:
        with open(config_path, 'rb') as f:
            config_data = tomllib.load(f)
    except PermissionError:
        result.error(f"Cannot read file (permission denied): {config_path}")
        return result
    except tomllib.TOMLDecodeError as e:
        result.error(f"TOML syntax error: {e}")
        return result

    _check_structure(config_data, result)
    if not result.is_valid:
        return result

    merged: dict[str, dict[str, Any]] = {}
    try:
        _merge_config_data(merged, config_data, config_path.resolve().parent)
        config = _build(merged, [config_path])
    except (ConfigError, TypeError) as e:
        result.error(str(e))
        return result

    _check_warnings(config, result)
    return result
