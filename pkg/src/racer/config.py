"""Layered run configuration: built-in preset < config file < command-line flags."""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from pathlib import Path

from .env import EnvConfig, RewardConfig
from .errors import ConfigError, ParseError
from .sensing import SensorConfig
from .trackgen import PRESETS, load_track, preset_track
from .trainer import TrainConfig
from .vehicle import DynamicsParams


def _defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def default_config() -> dict:
    dyn = _defaults(DynamicsParams)
    dyn.pop("D")
    return {
        "run": {"name": "run", "seed": 0},
        "track": {"preset": "oval", "file": None, "seed": 0},
        "env": {
            "max_episode_steps": 5000,
            "n_obstacle_agents": 0,
            "obstacle_policy_checkpoint": None,
            "ego_ct_multiplier": 1.0,
            "start_jitter": 0.1,
        },
        "dynamics": dyn,
        "sensor": _defaults(SensorConfig),
        "reward": _defaults(RewardConfig),
        "train": _defaults(TrainConfig, skip=("seed",)),
    }


# named starting points; "desk" is the acceptance-scale setting
CONFIG_PRESETS = {
    "default": {},
    "desk": {"train": {"total_steps": 2_000_000, "n_envs": 8}},
    "smoke": {"train": {"total_steps": 8192, "n_envs": 2, "n_steps": 512, "n_epochs": 2}},
    "flagship": {"train": {"total_steps": 20_000_000}},
}


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = deep_merge(out[key], value, where)
        else:
            out[key] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return data


def resolve_config(preset: str = "default", file=None, overrides: dict | None = None) -> dict:
    if preset not in CONFIG_PRESETS:
        raise ConfigError(f"unknown config preset {preset!r}; choose from {sorted(CONFIG_PRESETS)}")
    cfg = deep_merge(default_config(), CONFIG_PRESETS[preset])
    if file is not None:
        cfg = deep_merge(cfg, load_config_file(file))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return cfg


def build_track(cfg: dict):
    tcfg = cfg["track"]
    if tcfg.get("file"):
        return load_track(tcfg["file"])
    name = tcfg.get("preset")
    if name not in PRESETS:
        raise ConfigError(f"unknown track preset {name!r}; choose from {sorted(PRESETS)}")
    return preset_track(name, seed=int(tcfg.get("seed", 0)))


def build_env_config(cfg: dict, track=None) -> EnvConfig:
    track = track if track is not None else build_track(cfg)
    try:
        return EnvConfig(
            track=track,
            dynamics=DynamicsParams(**cfg["dynamics"]),
            sensor=SensorConfig(**cfg["sensor"]),
            reward=RewardConfig(**cfg["reward"]),
            **cfg["env"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def build_train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(seed=int(cfg["run"]["seed"]), **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def output_root(flag=None) -> Path:
    if flag:
        return Path(flag)
    return Path(os.environ.get("RACER_OUT", "runs"))


def write_resolved(cfg: dict, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "resolved_config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
