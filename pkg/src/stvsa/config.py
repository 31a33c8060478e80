"""Run configuration: TOML file + ``--set section.key=value`` overrides + defaults.

Precedence is flag > file > default. Every nested section is validated by
constructing its dataclass; failures are reported with the offending field path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackConfig
from .gan import GanConfig
from .gridgen import SimConfig
from .lgat import LgatConfig
from .pipeline import TrainConfig
from .sfcm import SfcmConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class RunSection:
    master_seed: int = 0
    initial_samples: int = 3400
    augmented_total: int = 12000
    study_seeds: tuple[int, ...] = (0, 1, 2)
    threads: int = 1
    plots: bool = False

    def __post_init__(self):
        if self.initial_samples < 1:
            raise ValueError("initial_samples must be >= 1")
        if self.augmented_total < 0:
            raise ValueError("augmented_total must be >= 0")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        object.__setattr__(self, "study_seeds", tuple(int(s) for s in self.study_seeds))
        if not self.study_seeds:
            raise ValueError("study_seeds must not be empty")


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "sim": SimConfig,
    "sfcm": SfcmConfig,
    "gan": GanConfig,
    "attack": AttackConfig,
    "lgat": LgatConfig,
    "train": TrainConfig,
}


@dataclass(frozen=True)
class RunConfig:
    workdir: Path
    run: RunSection = field(default_factory=RunSection)
    sim: SimConfig = field(default_factory=SimConfig)
    sfcm: SfcmConfig = field(default_factory=SfcmConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    lgat: LgatConfig = field(default_factory=LgatConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def master_seed(self) -> int:
        return self.run.master_seed

    @property
    def dataset_dir(self) -> Path:
        return self.workdir / "datasets"

    @property
    def checkpoint_dir(self) -> Path:
        return self.workdir / "checkpoints"

    @property
    def report_dir(self) -> Path:
        return self.workdir / "reports"

    @property
    def manifest_dir(self) -> Path:
        return self.workdir / "manifests"

    def sections(self) -> dict[str, dict]:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every setting that can change results."""
        data = self.sections()
        data["run"] = {k: v for k, v in data["run"].items() if k not in ("plots", "threads")}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value``; the value is parsed as a TOML value, else kept as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(path, "override key must be section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return parts[0], parts[1], value


def _build_section(name: str, values: dict) -> Any:
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown setting")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        bad = [k for k in values if k in str(exc)]
        where = f"{name}.{bad[0]}" if bad else name
        raise ConfigError(where, str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: list[str] = (), *, seed: int | None = None,
                workdir: str | Path | None = None, default_workdir: str | Path = "stvsa_run") -> RunConfig:
    raw: dict[str, dict] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(str(p), "config file not found")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(p), f"invalid TOML: {exc}") from exc
    file_workdir = None
    for name, values in raw.items():
        if name == "workdir":
            file_workdir = values
            continue
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
        if not isinstance(values, dict):
            raise ConfigError(name, "expected a table")
    merged = {name: dict(raw.get(name, {})) for name in SECTIONS}
    for item in overrides:
        section, key, value = parse_override(item)
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        merged[section][key] = value
    if seed is not None:
        merged["run"]["master_seed"] = seed
    built = {name: _build_section(name, values) for name, values in merged.items()}
    wd = Path(workdir if workdir is not None else file_workdir if file_workdir is not None else default_workdir)
    return RunConfig(workdir=wd, **built)
