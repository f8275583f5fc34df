"""
MLaaS federation engine.

Experiment configuration files.

Created by Matua Doc.
Created on 2026-10-19.
"""

import dataclasses
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from main_agent import SacHyperparams, TrainingSeeds
from main_ensemble import (AblationMethod, EnsembleConfig, SoftNmsDecay,
                           VotingMethod)
from main_environment import RewardConfig, RewardMode
from main_model import ConfigError
from main_utils import write_json

RESOLVED_NAME = "config.resolved.yaml"
METADATA_NAME = "run_metadata.json"


@dataclass(frozen=True)
class Seeds:
    """Every named seed of an experiment."""

    env_seed: int = 0
    init_seed: int = 0
    explore_seed: int = 0
    baseline_seed: int = 0

    @property
    def training(self) -> TrainingSeeds:
        """The seeds the trainer uses."""
        return TrainingSeeds(self.env_seed, self.init_seed,
                             self.explore_seed)


@dataclass
class ExperimentConfig:
    """Run-level settings of one experiment."""

    trace: Path | None = None
    template: Path | None = None
    lexicon: Path | None = None
    overrides: Path | None = None
    output_dir: Path = Path("runs/default")
    epochs: int = 100
    steps_per_epoch: int = 2000
    oracle_max_providers: int = 16
    prefer_cheap: bool = False
    unit_costs: list[float] | None = None
    transmission: list[float] | None = None
    inference: list[float] | None = None
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    sac: SacHyperparams = field(default_factory=SacHyperparams)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self, need_trace: bool = True) -> None:
        """
        Check the config before any computation starts.

        Raises ConfigError naming the first problem found.
        """
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be positive")
        if need_trace and self.trace is None:
            raise ConfigError("No trace file given")
        for name in ("trace", "template", "lexicon", "overrides"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name} file does not exist: {path}")


_PATH_KEYS = ("trace", "template", "lexicon", "overrides", "output_dir")
_SECTIONS = {"ensemble": EnsembleConfig, "reward": RewardConfig,
             "sac": SacHyperparams, "seeds": Seeds}
_ENUMS = {"voting": VotingMethod, "ablation": AblationMethod,
          "soft_nms_decay": SoftNmsDecay, "mode": RewardMode}


def _build_section(name: str, data: Any) -> Any:
    """Turn one nested mapping into its dataclass."""
    section_type = _SECTIONS[name]
    if data is None:
        return section_type()
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{name}' must be a mapping")

    known = {item.name for item in dataclasses.fields(section_type)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {unknown}")

    values = dict(data)
    for key, enum_type in _ENUMS.items():
        if key in values:
            try:
                values[key] = enum_type(values[key])
            except ValueError:
                raise ConfigError(f"'{values[key]}' is not a valid {key}")
    if "hidden_sizes" in values:
        values["hidden_sizes"] = tuple(values["hidden_sizes"])

    try:
        return section_type(**values)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"Section '{name}': {error}")


def config_from_dict(data: dict[str, Any],
                     base_dir: Path = Path(".")) -> ExperimentConfig:
    """
    Build a config from a parsed mapping.

    Relative paths are taken relative to base_dir (the folder of the
    config file).
    """
    known = {item.name for item in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys: {unknown}")

    values: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            values[key] = _build_section(key, value)
        elif key in _PATH_KEYS and value is not None:
            path = Path(value)
            values[key] = path if path.is_absolute() else base_dir / path
        else:
            values[key] = value

    try:
        return ExperimentConfig(**values)
    except TypeError as error:
        raise ConfigError(str(error))


def load_config(path: Path | None,
                overrides: dict[str, Any] | None = None
                ) -> ExperimentConfig:
    """
    Load a YAML config file and apply command-line overrides.

    Overrides use dotted keys for nested fields, e.g. "reward.beta".
    Without a path, every field keeps its default.
    """
    data: dict[str, Any] = {}
    base_dir = Path(".")
    if path is not None:
        try:
            with open(path, encoding="utf-8") as config_file:
                data = yaml.safe_load(config_file) or {}
        except FileNotFoundError:
            raise ConfigError(f"No such config file: {path}")
        except yaml.YAMLError as error:
            raise ConfigError(f"Unable to parse {path}: {error}")
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping")
        base_dir = Path(path).parent

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if key:
            data.setdefault(section, {})
            data[section] = dict(data[section] or {})
            data[section][key] = value
        elif section in _PATH_KEYS:
            # Command-line paths are relative to the working directory.
            data[section] = str(Path(value).resolve())
        else:
            data[section] = value

    return config_from_dict(data, base_dir)


def _plain(value: Any) -> Any:
    """Convert enums, paths and tuples into YAML-friendly values."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Enum):
        return value.value
    return value


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Return every field of a config, defaults included."""
    return _plain(dataclasses.asdict(config))


def write_resolved(config: ExperimentConfig, command: str) -> Path:
    """
    Write the fully materialized config into the output folder.

    Timestamps go into a separate metadata file so the config itself is
    identical across reruns.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    with open(path, "w", encoding="utf-8", newline="\n") as out_file:
        yaml.safe_dump(config_to_dict(config), out_file, sort_keys=True)

    write_json(out_dir / METADATA_NAME,
               {"command": command,
                "started": datetime.now(timezone.utc).isoformat(),
                "python": platform.python_version(),
                "platform": platform.platform()})
    return path
