"""Flat dotted-key run configuration.

A run is described by a single mapping of ``section.key`` to a scalar. Values
come from :data:`DEFAULTS`, then an optional JSON file, then ``--key value``
overrides; unknown keys are rejected at every stage.
"""
from __future__ import annotations

import hashlib
import json

from .errors import ConfigError

DEFAULTS = {
    "env.name": "",
    "data.path": "",
    "schedule.kind": "fm",
    "schedule.p_mean": -0.8,
    "schedule.p_std": 1.5,
    "schedule.delta_t": 0.05,
    "schedule.t_min": 1e-3,
    "schedule.t_max": 1.0 - 1e-3,
    "mmd.family": "rbf",
    "mmd.sigma": 1.2,
    "mmd.a": 4.0,
    "mmd.b": 2.0,
    "mmd.k": 8.0,
    "mmd.weight_mode": "base",
    "mmd.bandwidth_mixture": False,
    "mmd.particles_M": 4,
    "policy.hidden_dim": 256,
    "policy.layers": 3,
    "policy.num_steps": 2,
    "policy.sigma_d": 0.5,
    "policy.time_features": 16,
    "critic.hidden_dim": 256,
    "critic.layers": 3,
    "train.mode": "offline",
    "train.batch_size": 256,
    "train.eta": 0.5,
    "train.gamma": 0.99,
    "train.ema_alpha": 0.995,
    "train.lr": 1e-3,
    "train.grad_clip": 8.0,
    "train.steps_per_epoch": 1000,
    "train.epochs": 500,
    "train.q_normalize": False,
    "train.clip_straight_through": False,
    "train.seed": 0,
    "online.steps": 0,
    "online.buffer_capacity": 1_000_000,
    "eval.episodes": 10,
    "eval.every": 1000,
    "eval.seed": 0,
    "eval.keep_history": False,
}

MODES = ("bc", "offline", "online-finetune")


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on"):
            return True
        if isinstance(value, str) and value.lower() in ("0", "false", "no", "off"):
            return False
        if isinstance(value, int) and value in (0, 1):
            return bool(value)
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    return str(value)


def resolve(*layers) -> dict:
    """Merge override mappings on top of the defaults, validating every key."""
    cfg = dict(DEFAULTS)
    for layer in layers:
        for key, value in (layer or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg["train.mode"] not in MODES:
        raise ConfigError(f"train.mode must be one of {MODES}")
    m, b = cfg["mmd.particles_M"], cfg["train.batch_size"]
    if m < 1 or b < 1 or b % m:
        raise ConfigError(f"mmd.particles_M={m} must divide train.batch_size={b}")
    if cfg["train.eta"] < 0:
        raise ConfigError("train.eta must be non-negative")
    if not 0.0 <= cfg["train.ema_alpha"] <= 1.0:
        raise ConfigError("train.ema_alpha must lie in [0, 1]")
    if not 0.0 <= cfg["train.gamma"] < 1.0:
        raise ConfigError("train.gamma must lie in [0, 1)")
    if cfg["policy.num_steps"] < 1:
        raise ConfigError("policy.num_steps must be >= 1")
    if cfg["train.grad_clip"] <= 0 or cfg["train.lr"] <= 0:
        raise ConfigError("train.grad_clip and train.lr must be positive")
    if cfg["train.epochs"] < 0 or cfg["train.steps_per_epoch"] < 1:
        raise ConfigError("need train.epochs >= 0 and train.steps_per_epoch >= 1")
    if cfg["online.steps"] < 0 or cfg["online.buffer_capacity"] < 1:
        raise ConfigError("need online.steps >= 0 and online.buffer_capacity >= 1")
    if cfg["eval.episodes"] < 1 or cfg["eval.every"] < 0:
        raise ConfigError("need eval.episodes >= 1 and eval.every >= 0")


def load_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a flat JSON object")
    return obj


def dumps(cfg) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
