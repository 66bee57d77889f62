"""Run configuration: built-in defaults < YAML config file < command-line flags."""

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from vrfam import __version__
from vrfam.errors import ConfigurationError
from vrfam.synth import DELTA_PRESETS, SynthConfig
from vrfam.training import TrainConfig

DATA_ROOT_ENV = "VRFAM_DATA_ROOT"
DEFAULT_DATA_ROOT = "data"
COMMANDS = ("synth", "train", "eval", "report", "gradcheck")

_SYNTH_FIELDS = {f.name for f in fields(SynthConfig)} - {"seed"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"seed"}

SECTION_KEYS = {
    "synth": _SYNTH_FIELDS | {"out", "plot", "force"},
    "train": _TRAIN_FIELDS | {"data", "out", "kinds", "windows", "codes", "matrix", "workers", "force"},
    "eval": {"runs", "data"},
    "report": {"runs", "out", "metric"},
    "gradcheck": set(),
}


@dataclass
class DataPaths:
    """Default locations under one data root."""

    root: Path

    @classmethod
    def from_env(cls) -> "DataPaths":
        return cls(Path(os.environ.get(DATA_ROOT_ENV) or DEFAULT_DATA_ROOT))

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def runs(self) -> Path:
        return self.root / "runs"

    @property
    def report(self) -> Path:
        return self.root / "report"


@dataclass
class RunConfig:
    """Resolved parameters of one command invocation.

    ``options`` holds the merged command section; :meth:`snapshot` is what
    gets written into run directories.
    """

    command: str
    seed: int = 0
    options: Dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default=None):
        value = self.options.get(key)
        return default if value is None else value

    def snapshot(self) -> dict:
        return {
            "vrfam_version": __version__,
            "command": self.command,
            "seed": self.seed,
            "options": {key: _plain(value) for key, value in sorted(self.options.items())},
        }


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def load_config_file(path) -> dict:
    """Read and check a YAML config file.

    Raises
    ------
    ConfigurationError
        If the file is not a mapping or holds unknown sections or keys.
    """
    with open(path, encoding="utf-8") as stream:
        content = yaml.safe_load(stream) or {}
    if not isinstance(content, dict):
        raise ConfigurationError(f"{path}: config file must be a mapping")
    unknown = set(content) - set(COMMANDS) - {"seed"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")
    for section, values in content.items():
        if section == "seed":
            continue
        if not isinstance(values, dict):
            raise ConfigurationError(f"{path}: section {section!r} must be a mapping")
        unknown = set(values) - SECTION_KEYS[section]
        if unknown:
            raise ConfigurationError(f"{path}: unknown keys in {section!r}: {sorted(unknown)}")
    return content


def resolve(
    command: str,
    flags: Mapping[str, Any],
    config_path: Optional[str] = None,
    defaults: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge the three configuration layers for ``command``.

    Flags that were not given on the command line must be None so they do
    not shadow the config file.
    """
    merged: Dict[str, Any] = dict(defaults or {})
    seed = 0
    if config_path:
        content = load_config_file(config_path)
        seed = int(content.get("seed", seed))
        merged.update(content.get(command) or {})
    for key, value in flags.items():
        if key == "seed":
            if value is not None:
                seed = int(value)
        elif value is not None:
            merged[key] = value
    return RunConfig(command=command, seed=seed, options=merged)


def parse_delta(value) -> float:
    """Accept a preset name (none, weak, strong) or a non-negative number."""
    if isinstance(value, str) and value in DELTA_PRESETS:
        return DELTA_PRESETS[value]
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"familiarity gap {value!r} is neither a number nor one of {sorted(DELTA_PRESETS)}"
        ) from None


def synth_config(run: RunConfig) -> SynthConfig:
    values = {key: run.options[key] for key in _SYNTH_FIELDS if run.options.get(key) is not None}
    if "delta" in values:
        values["delta"] = parse_delta(values["delta"])
    return SynthConfig(seed=run.seed, **values)


def train_config(run: RunConfig) -> TrainConfig:
    values = {key: run.options[key] for key in _TRAIN_FIELDS if run.options.get(key) is not None}
    return TrainConfig(seed=run.seed, **values)
