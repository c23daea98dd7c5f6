"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment, no nesting. Unknown keys are
rejected; missing keys take the defaults in :data:`DEFAULTS`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .cluster import StrategyConfig, StrategyKind
from .costmodel import HardwareModel
from .datapipe import SyntheticTask
from .losses import LossWeights
from .optim import OptimizerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad configuration; the CLI maps this to exit code 2."""


DEFAULTS: dict[str, Any] = {
    # strategy
    "strategy": "conventional",
    "world_size": 8,
    "batch_per_worker": 8,
    "group_size": 0,            # 0 means world_size
    "accumulation_steps": 1,
    "strategies": "",           # compare: kind:batch:group:k, comma separated
    # training
    "steps": 200,
    "optimizer": "lamb",
    "learning_rate": 0.005,
    "weight_decay": 0.05,
    "lamb_beta1": 0.9,
    "lamb_beta2": 0.98,
    "lamb_eps": 1e-6,
    "alpha": 0.3,
    "beta": 0.3,
    "full_objective": False,
    "embed_dim": 16,
    "init_tau": 0.07,
    "patch_size": 4,
    "vocab": 8,
    "image_mask_ratio": 0.75,
    "text_mask_ratio": 0.50,
    "shuffle": True,
    # data
    "n_pairs": 256,
    "d_in": 16,
    "noise_std": 0.01,
    "seed": 0,
    # hardware model
    "bandwidth": 1e9,
    "latency": 1e-5,
    "compute_rate": 1e5,
    "calibrate": False,
    # sweep
    "sweep_key": "",
    "sweep_values": "",
    # output
    "out_dir": "out",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str) -> Any:
    kind = type(DEFAULTS[key])
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def parse_config(text: str) -> dict[str, Any]:
    values = dict(DEFAULTS)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        if key in seen:
            raise ConfigError(f"duplicate config key: {key}")
        seen.add(key)
        values[key] = _convert(key, raw)
    return values


def load_config(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def override(values: dict[str, Any], key: str, raw: str) -> dict[str, Any]:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key}")
    return {**values, key: _convert(key, raw)}


def strategy_from(values: dict[str, Any]) -> StrategyConfig:
    group = values["group_size"] or values["world_size"]
    try:
        return StrategyConfig(StrategyKind(values["strategy"]), values["batch_per_worker"], group,
                              values["accumulation_steps"])
    except ValueError as exc:
        raise ConfigError(f"strategy: {exc}") from exc


def parse_strategies(text: str) -> list[StrategyConfig]:
    """``kind:batch:group:k`` entries separated by commas."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if len(parts) != 4:
            raise ConfigError(f"strategies: entry {item!r} is not kind:batch:group:k")
        try:
            out.append(StrategyConfig(StrategyKind(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError as exc:
            raise ConfigError(f"strategies: entry {item!r}: {exc}") from exc
    return out


@dataclass(frozen=True)
class Experiment:
    train: TrainConfig
    task: SyntheticTask
    calibrate: bool
    out_dir: Path


def build_experiment(values: dict[str, Any], strategy: StrategyConfig | None = None) -> Experiment:
    """Turn parsed values into typed configs, re-raising validation failures as ``ConfigError``."""
    strategy = strategy or strategy_from(values)
    try:
        optimizer = OptimizerConfig(values["optimizer"], values["learning_rate"],
                                    (values["lamb_beta1"], values["lamb_beta2"]), values["lamb_eps"],
                                    values["weight_decay"])
        hardware = HardwareModel(values["bandwidth"], values["latency"], values["compute_rate"])
        train = TrainConfig(
            strategy=strategy,
            world_size=values["world_size"],
            steps=values["steps"],
            optimizer=optimizer,
            loss_weights=LossWeights(values["alpha"], values["beta"]),
            full_objective=values["full_objective"],
            embed_dim=values["embed_dim"],
            init_tau=values["init_tau"],
            patch_size=values["patch_size"],
            vocab=values["vocab"],
            image_mask_ratio=values["image_mask_ratio"],
            text_mask_ratio=values["text_mask_ratio"],
            shuffle=values["shuffle"],
            hardware=hardware,
            seed=values["seed"],
        )
        task = SyntheticTask(values["n_pairs"], values["d_in"], values["noise_std"], values["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if train.full_objective and task.d_in % train.patch_size:
        raise ConfigError(f"d_in {task.d_in} is not a multiple of patch_size {train.patch_size}")
    return Experiment(train, task, values["calibrate"], Path(values["out_dir"]))
