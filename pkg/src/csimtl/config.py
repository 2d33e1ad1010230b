"""Experiment configuration: a flat ``key = value`` text format.

Keys without a dot are global; dotted keys belong to a section
(``data.``, ``pretrain.``, ``finetune.``, ``single.``).  Blank lines and
``#`` comments are ignored.  :func:`dump_config` writes a canonical form
that :func:`parse_config` reads back to an equal object.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .channels import PRESETS
from .errors import ConfigError
from .models import ARCHITECTURES, SHIPPED_RATIOS, parse_ratio
from .training import TrainConfig

STRATEGY_NAMES = ("multi-task", "single-task")
DATASET_SUFFIX = ".csid"

_PHASE_DEFAULTS = {
    "pretrain": TrainConfig(learning_rate=1e-3, batch_size=200, epochs=1000),
    "finetune": TrainConfig(learning_rate=1e-4, batch_size=200, epochs=500),
    "single": TrainConfig(learning_rate=1e-3, batch_size=200, epochs=1000),
}
# config key -> TrainConfig field; the seed is derived per cell, never configured
_PHASE_KEYS = {
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "shuffle": "shuffle",
    "validate_every": "validate_every",
}


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: tuple = ()
    crs: tuple = (Fraction(1, 4),)
    strategies: tuple = STRATEGY_NAMES
    seed: int = 0
    architecture: str = "csinet"
    output: str = "experiment"
    jobs: int = 1
    subcarriers: int = 72
    antennas: int = 32
    delay_taps: int = 32
    train: int = 4000
    val: int = 1000
    test: int = 5000
    single_train: int | None = None  # per-scenario large set; None means 2 * train
    finetune_train: int | None = None  # first k of each small set; None means all
    pretrain: TrainConfig = _PHASE_DEFAULTS["pretrain"]
    finetune: TrainConfig = _PHASE_DEFAULTS["finetune"]
    single: TrainConfig = _PHASE_DEFAULTS["single"]

    @property
    def large_train(self) -> int:
        return 2 * self.train if self.single_train is None else self.single_train

    @property
    def finetune_count(self) -> int:
        return self.train if self.finetune_train is None else self.finetune_train

    def counts(self, strategy: str) -> dict:
        train = self.large_train if strategy == "single-task" else self.train
        return {"train": train, "val": self.val, "test": self.test}

    def validate(self) -> "ExperimentConfig":
        """Raise :class:`ConfigError` listing every problem found."""
        bad = []
        for s in self.scenarios:
            if not (s in PRESETS or str(s).endswith(DATASET_SUFFIX)):
                bad.append(f"unknown scenario {s!r} (presets: {', '.join(PRESETS)})")
            elif str(s).endswith(DATASET_SUFFIX) and not Path(s).is_file():
                bad.append(f"dataset file not found: {s}")
        if len(set(self.scenarios)) != len(self.scenarios):
            bad.append("scenarios must be distinct")
        for cr in self.crs:
            if not isinstance(cr, Fraction) or not 0 < cr <= 1:
                bad.append(f"compression ratio {cr} outside (0, 1]")
            elif round(2 * self.delay_taps * self.antennas * cr) < 1:
                bad.append(f"compression ratio {cr} leaves an empty codeword")
        for s in self.strategies:
            if s not in STRATEGY_NAMES:
                bad.append(f"unknown strategy {s!r} (expected one of {', '.join(STRATEGY_NAMES)})")
        if self.architecture not in ARCHITECTURES:
            bad.append(f"unknown architecture {self.architecture!r}")
        if self.jobs < 1:
            bad.append("jobs must be >= 1")
        for name in ("subcarriers", "antennas", "delay_taps", "train", "val", "test"):
            if getattr(self, name) < 1:
                bad.append(f"data.{name} must be >= 1")
        if self.delay_taps > self.subcarriers:
            bad.append("data.delay_taps cannot exceed data.subcarriers")
        if self.large_train < 1:
            bad.append("single.train must be >= 1")
        if not 1 <= self.finetune_count <= self.train:
            bad.append(f"finetune.train must lie in [1, data.train={self.train}]")
        if "multi-task" in self.strategies and self.finetune.epochs >= self.pretrain.epochs:
            bad.append(
                f"finetune.epochs ({self.finetune.epochs}) must be smaller than "
                f"pretrain.epochs ({self.pretrain.epochs})"
            )
        if bad:
            raise ConfigError("invalid experiment config: " + "; ".join(bad))
        return self


def _as_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _as_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"not an integer: {text!r}") from None


def _as_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def _as_list(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _as_ratios(text: str) -> tuple:
    out = []
    for part in _as_list(text):
        try:
            out.append(parse_ratio(part))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad compression ratio {part!r}: {exc}") from None
    return tuple(out)


def _optional_int(text: str):
    return None if text.lower() in ("", "auto", "none") else _as_int(text)


_GLOBAL = {
    "seed": ("seed", _as_int),
    "scenarios": ("scenarios", _as_list),
    "crs": ("crs", _as_ratios),
    "strategies": ("strategies", _as_list),
    "architecture": ("architecture", str),
    "output": ("output", str),
    "jobs": ("jobs", _as_int),
    "data.subcarriers": ("subcarriers", _as_int),
    "data.antennas": ("antennas", _as_int),
    "data.delay_taps": ("delay_taps", _as_int),
    "data.train": ("train", _as_int),
    "data.val": ("val", _as_int),
    "data.test": ("test", _as_int),
    "single.train": ("single_train", _optional_int),
    "finetune.train": ("finetune_train", _optional_int),
}
_PHASE_PARSERS = {
    "learning_rate": _as_float,
    "batch_size": _as_int,
    "epochs": _as_int,
    "shuffle": _as_bool,
    "validate_every": _as_int,
}


def parse_config(text: str, overrides=None) -> ExperimentConfig:
    """Parse and validate config text; ``overrides`` are extra ``key=value`` strings."""
    lines = text.splitlines() + list(overrides or ())
    top: dict = {}
    phases = {p: {} for p in _PHASE_DEFAULTS}
    seen = set()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen and lineno <= len(text.splitlines()):
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in _GLOBAL:
            attr, conv = _GLOBAL[key]
            top[attr] = conv(value)
            continue
        section, _, name = key.partition(".")
        if section in phases and name in _PHASE_KEYS:
            attr = _PHASE_KEYS[name]
            phases[section][attr] = _PHASE_PARSERS[attr](value)
            continue
        raise ConfigError(f"line {lineno}: unknown key {key!r}")
    for section, values in phases.items():
        if values:
            top[section] = dataclasses.replace(_PHASE_DEFAULTS[section], **values)
    return ExperimentConfig(**top).validate()


def load_config(path, overrides=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, (attr, _) in _GLOBAL.items():
        lines.append(f"{key} = {_fmt(getattr(cfg, attr))}")
    for section in _PHASE_DEFAULTS:
        phase = getattr(cfg, section)
        for key, attr in _PHASE_KEYS.items():
            lines.append(f"{section}.{key} = {_fmt(getattr(phase, attr))}")
    return "\n".join(lines) + "\n"
