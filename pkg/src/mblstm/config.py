"""Run configuration: presets, ``key = value`` files and flag overrides.

A :class:`RunConfig` is the flat, merged view the command line works with.
Layering order is preset, then config file, then explicit flags; every key is
checked against :data:`SCHEMA`, so a typo is an error rather than a silent
default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .data import PhantomConfig, PolarRule
from .errors import ContractError
from .network import NetworkConfig
from .trainer import EvalOptions, TrainConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # network
    depth: int = 2
    base_channels: int = 8
    polar_size: int = 64
    blstm: bool = True
    # training
    epochs: int = 6
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss_on: str = "average_only"
    checkpoint_every: int = 0
    precision: str = "single"
    # data
    samples: int = 200
    glaucoma_fraction: float = 0.1
    train_fraction: float = 0.8
    crop_size: int = 128
    crops_per_image: int = 5
    jitter: int = 8
    # evaluation
    center: str = "localize"
    threshold: float = 0.5
    # run
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.samples < 2:
            raise ContractError("samples must be at least 2 so both splits are non-empty")
        if not 0 < self.train_fraction < 1:
            raise ContractError("train_fraction must be in (0, 1)")
        if self.crop_size < 8 or self.crops_per_image < 1 or self.jitter < 0:
            raise ContractError("crop_size >= 8, crops_per_image >= 1 and jitter >= 0 required")
        if self.precision not in ("single", "double"):
            raise ContractError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.threads < 1:
            raise ContractError("threads must be positive")
        if self.center not in ("localize", "gt"):
            raise ContractError(f"center must be 'localize' or 'gt', got {self.center!r}")
        self.network().validate()
        self.train_config().validate()
        self.phantom_config().validate()

    def network(self) -> NetworkConfig:
        return NetworkConfig(depth=self.depth, base_channels=self.base_channels, input_size=self.polar_size,
                             blstm_levels=(self.blstm,) * self.depth, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           optimizer=self.optimizer, loss_on=self.loss_on, seed=self.seed,
                           checkpoint_every=self.checkpoint_every)

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(glaucoma_fraction=self.glaucoma_fraction, seed=self.seed)

    def polar_rule(self) -> PolarRule:
        return PolarRule(size=self.polar_size)

    def eval_options(self) -> EvalOptions:
        return EvalOptions(rule=self.polar_rule(), crop_size=self.crop_size, center=self.center,
                           threshold=self.threshold)

    def to_text(self) -> str:
        """Serialise as a config file that :func:`load_config_file` reads back."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_PARSERS = {int: int, float: float, str: str, bool: _parse_bool, "int": int, "float": float, "str": str,
            "bool": _parse_bool}
SCHEMA: dict[str, Any] = {f.name: _PARSERS[f.type] for f in dataclasses.fields(RunConfig)}

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {"depth": 2, "base_channels": 8, "polar_size": 64, "samples": 200},
    # Large-scale shape; runnable but far outside a single-core time budget.
    "full": {"depth": 4, "base_channels": 32, "polar_size": 400, "samples": 400,
             "epochs": 50, "batch_size": 4},
}


def coerce(values: Mapping[str, Any], source: str = "config") -> dict[str, Any]:
    """Validate keys against the schema and convert string values to their field types."""
    out = {}
    for key, raw in values.items():
        if key not in SCHEMA:
            raise ContractError(f"{source}: unknown key {key!r}")
        parse = SCHEMA[key]
        if isinstance(raw, str):
            try:
                out[key] = parse(raw.strip())
            except ValueError as exc:
                raise ContractError(f"{source}: bad value for {key!r}: {exc}") from exc
        else:
            out[key] = raw
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ContractError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in values:
            raise ContractError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return coerce(values, source)


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ContractError(f"cannot read config file {p}: {exc}") from exc
    return parse_config_text(text, str(p))


def resolve(preset: str | None = None, path: str | Path | None = None,
            overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge preset, config file and flag overrides (later wins) into a validated RunConfig."""
    merged: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ContractError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    if path is not None:
        merged.update(load_config_file(path))
    if overrides:
        merged.update(coerce({k: v for k, v in overrides.items() if v is not None}, "flags"))
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg
