"""Noise schedules, training-time sampling and inference grids.

Time runs from 0 (clean data) to 1 (pure prior noise). All coefficient
functions accept scalars or arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

FLOW_MATCHING = "fm"
VARIANCE_PRESERVING = "vp"
_KIND_ALIASES = {
    "fm": FLOW_MATCHING,
    "flow-matching": FLOW_MATCHING,
    "flow_matching": FLOW_MATCHING,
    "vp": VARIANCE_PRESERVING,
    "variance-preserving": VARIANCE_PRESERVING,
    "variance_preserving": VARIANCE_PRESERVING,
}


def _check_unit(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~(t >= 0.0)) or np.any(~(t <= 1.0)):
        raise DomainError("time must lie in [0, 1]")
    return t


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = FLOW_MATCHING

    def __post_init__(self):
        if self.kind not in _KIND_ALIASES:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        object.__setattr__(self, "kind", _KIND_ALIASES[self.kind])

    def alpha_sigma(self, t):
        t = _check_unit(t)
        if self.kind == FLOW_MATCHING:
            return 1.0 - t, t
        half_pi_t = 0.5 * math.pi * t
        return np.cos(half_pi_t), np.sin(half_pi_t)


def alpha_sigma(sched: NoiseSchedule, t):
    """``(alpha_t, sigma_t)``; plain floats for scalar input."""
    a, s = sched.alpha_sigma(t)
    if np.ndim(a) == 0:
        return float(a), float(s)
    return a, s


def snr(sched: NoiseSchedule, t):
    """Signal-to-noise ratio ``alpha_t**2 / sigma_t**2`` (``inf`` at t = 0)."""
    a, s = sched.alpha_sigma(t)
    with np.errstate(divide="ignore"):
        out = np.where(s == 0.0, np.inf, (a * a) / np.where(s == 0.0, 1.0, s * s))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TimeSamplerConfig:
    p_mean: float = -0.8
    p_std: float = 1.5
    delta_t: float = 0.05
    t_min: float = 1e-3
    t_max: float = 1.0 - 1e-3

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max <= 1.0:
            raise ConfigError("need 0 < t_min < t_max <= 1")
        if self.delta_t <= 0.0:
            raise ConfigError("delta_t must be positive")
        if self.p_std < 0.0:
            raise ConfigError("p_std must be non-negative")


def noise_level_to_time(sigma_hat):
    """Map a noise level to flow-matching time so that ``sigma_t / alpha_t = sigma_hat``."""
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    return sigma_hat / (1.0 + sigma_hat)


def sample_t(cfg: TimeSamplerConfig, rng, size=None):
    """Log-normal noise level mapped to time and clamped to ``[t_min, t_max]``."""
    log_sigma = rng.normal(cfg.p_mean, cfg.p_std, size=size)
    # sigma/(1+sigma) written in logistic form to stay finite for huge draws
    t = 1.0 / (1.0 + np.exp(-np.asarray(log_sigma)))
    t = np.clip(t, cfg.t_min, cfg.t_max)
    return float(t) if size is None else t


def sample_s_given_t(t, rng):
    """``s ~ Uniform[0, t]``."""
    t = np.asarray(t, dtype=np.float64)
    s = rng.uniform(0.0, 1.0, size=t.shape) * t
    return float(s) if s.ndim == 0 else s


def map_r(s, t, delta_t):
    """Intermediate time ``r = max(s, t - delta_t)``."""
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(s > t):
        raise DomainError("map_r needs s <= t")
    if delta_t <= 0:
        raise DomainError("delta_t must be positive")
    r = np.maximum(s, t - delta_t)
    return float(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class TimeTriple:
    s: float
    r: float
    t: float

    def __post_init__(self):
        if not 0.0 <= self.s <= self.r <= self.t <= 1.0:
            raise DomainError(f"invalid time triple {self}")


def sample_triples(cfg: TimeSamplerConfig, rng, n):
    """Vectorized draw of ``n`` (s, r, t) triples as three arrays."""
    t = sample_t(cfg, rng, size=n)
    s = sample_s_given_t(t, rng)
    r = map_r(s, t, cfg.delta_t)
    return s, r, t


def inference_grid(n_steps: int):
    """Descending uniform grid ``[1, (N-1)/N, ..., 0]`` with ``N + 1`` points."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise DomainError("number of sampling steps must be a positive integer")
    n = int(n_steps)
    return np.arange(n, -1, -1, dtype=np.float64) / n
