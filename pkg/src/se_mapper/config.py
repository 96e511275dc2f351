"""Run configuration: one YAML file with device/model/train/sa sections,
strict about unknown keys, echoed back canonically for provenance."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .baselines import SAConfig
from .device import DeviceConfig
from .ppo import TrainConfig

SEED_ENV_VAR = "SE_MAPPER_SEED"

# model section keys (ModelConfig minus the derived action_dim)
MODEL_KEYS = ("gnn_hidden", "embed_width", "attention_heads", "mlp_hidden", "use_gga")
PATH_KEYS = ("graphs", "out_dir")
TOP_KEYS = ("seed", "device", "model", "train", "sa", "paths")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    device: DeviceConfig = field(default_factory=DeviceConfig)
    model: dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    sa: SAConfig = field(default_factory=SAConfig)
    graphs: list[str] = field(default_factory=list)
    out_dir: str | None = None


def _check_keys(section: str, given: dict, allowed: tuple[str, ...]) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {section!r}")


def _dataclass_section(name: str, cls, given: dict, skip: tuple[str, ...] = ()) -> dict:
    allowed = tuple(f.name for f in fields(cls) if f.name not in skip)
    _check_keys(name, given, allowed)
    return dict(given)


def load_run_config(path: str | Path | None) -> RunConfig:
    """Parse the YAML run configuration; None loads pure defaults.  The
    seed falls back to the SE_MAPPER_SEED environment variable."""
    doc: dict[str, Any] = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
        doc = raw
    _check_keys("top-level", doc, TOP_KEYS)

    seed = doc.get("seed")
    if seed is None:
        env = os.environ.get(SEED_ENV_VAR)
        seed = int(env) if env is not None else 0

    device_args = _dataclass_section("device", DeviceConfig, doc.get("device", {}))
    train_args = _dataclass_section("train", TrainConfig, doc.get("train", {}), skip=("seed",))
    sa_args = _dataclass_section("sa", SAConfig, doc.get("sa", {}), skip=("seed",))
    model_args = dict(doc.get("model", {}))
    _check_keys("model", model_args, MODEL_KEYS)
    paths = dict(doc.get("paths", {}))
    _check_keys("paths", paths, PATH_KEYS)

    try:
        return RunConfig(
            seed=int(seed),
            device=DeviceConfig(**device_args),
            model=model_args,
            train=TrainConfig(seed=int(seed), **train_args),
            sa=SAConfig(seed=int(seed), **sa_args),
            graphs=list(paths.get("graphs", [])),
            out_dir=paths.get("out_dir"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Propagate one seed through every seeded section."""
    return dataclasses.replace(
        cfg,
        seed=seed,
        train=dataclasses.replace(cfg.train, seed=seed),
        sa=dataclasses.replace(cfg.sa, seed=seed),
    )


def echo_config(cfg: RunConfig) -> str:
    """Canonical YAML rendering of the effective configuration."""
    doc = {
        "seed": cfg.seed,
        "device": dataclasses.asdict(cfg.device),
        "model": dict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "sa": dataclasses.asdict(cfg.sa),
        "paths": {"graphs": list(cfg.graphs), "out_dir": cfg.out_dir},
    }
    return yaml.safe_dump(doc, sort_keys=True)
