"""Run configuration: a sectioned TOML file plus command-line overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ContractError
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None  # corpus manifest (JSON lines of id/path)
    references: str | None = None
    checkpoint_dir: str = "checkpoints"
    log_path: str = "train_log.jsonl"
    out_dir: str = "out"
    backend: str = "toy"
    backend_seed: int = 0
    backend_file: str | None = None  # serialized toy parameters (GICB)


@dataclass(frozen=True)
class MetricsConfig:
    clip_s_weight: float = 1.0
    train_references: str | None = None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


_SECTIONS = {"train": TrainConfig, "data": DataConfig, "metrics": MetricsConfig}


def _check_keys(section, values):
    known = {f.name for f in fields(_SECTIONS[section])}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ContractError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _coerce(section, key, raw):
    """Parse a command-line string into the type of the existing default."""
    default = getattr(_SECTIONS[section](), key)
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int) or (default is None and key in {"k", "backend_seed"}):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path=None, overrides=(), env=None):
    """Build a RunConfig from an optional TOML file and ``section.key=value`` overrides.

    When no seed is given anywhere, ``GENEIC_SEED`` from the environment is used.
    """
    env = os.environ if env is None else env
    doc = {}
    if path is not None:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        base = Path(path).parent
    else:
        base = None
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ContractError(f"unknown config section(s): {', '.join(unknown)}")
    for section, values in doc.items():
        if not isinstance(values, dict):
            raise ContractError(f"[{section}] must be a table")
        _check_keys(section, values)

    merged = {s: dict(doc.get(s, {})) for s in _SECTIONS}
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in _SECTIONS:
            raise ContractError(f"override {item!r} must look like section.key=value")
        _check_keys(section, {name: None})
        merged[section][name] = _coerce(section, name, raw)

    if "seed" not in merged["train"] and env.get("GENEIC_SEED"):
        merged["train"]["seed"] = int(env["GENEIC_SEED"])

    if base is not None:
        # relative paths in a config file resolve against the file's directory
        for key in ("manifest", "references", "checkpoint_dir", "log_path", "out_dir", "backend_file"):
            val = doc.get("data", {}).get(key)
            if isinstance(val, str) and key in merged["data"] and merged["data"][key] == val:
                merged["data"][key] = str(base / val) if not Path(val).is_absolute() else val
    return RunConfig(
        TrainConfig.from_dict(merged["train"]),
        DataConfig(**merged["data"]),
        MetricsConfig(**merged["metrics"]),
    )


def with_data(cfg, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(cfg, data=replace(cfg.data, **changes)) if changes else cfg
