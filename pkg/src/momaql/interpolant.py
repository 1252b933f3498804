"""Deterministic DDIM interpolants between clean actions and prior noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .schedule import NoiseSchedule


def _col(v, n):
    """Broadcast a scalar or length-n vector of times to an (n, 1) column."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape(n, 1) if v.size == n else v


def ddim_coefficients(s, t, sched: NoiseSchedule):
    """Coefficients ``(c_clean, c_noisy)`` of the jump from time ``t`` to ``s``.

    ``DDIM(x_t, x, s, t) = c_clean * x + c_noisy * x_t`` with
    ``c_noisy = sigma_s / sigma_t`` and ``c_clean = alpha_s - c_noisy * alpha_t``.
    """
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(s > t):
        raise DomainError("DDIM jump needs s <= t")
    a_s, sg_s = sched.alpha_sigma(s)
    a_t, sg_t = sched.alpha_sigma(t)
    if np.any(sg_t <= 0.0):
        raise DomainError("DDIM jump from a time with sigma_t = 0")
    ratio = sg_s / sg_t
    # exact boundary values: s == t must return x_t untouched
    ratio = np.where(s == t, 1.0, ratio)
    c_clean = np.where(s == t, 0.0, a_s - ratio * a_t)
    return c_clean, ratio


def ddim_interpolate(x_t, x, s, t, sched: NoiseSchedule):
    """``(alpha_s - sigma_s/sigma_t * alpha_t) * x + sigma_s/sigma_t * x_t``.

    ``x_t`` and ``x`` are vectors or ``(n, d)`` batches; ``s`` and ``t`` are
    scalars or per-row arrays.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_t.shape != x.shape:
        raise DimensionError(f"x_t {x_t.shape} and x {x.shape} differ")
    c_clean, c_noisy = ddim_coefficients(s, t, sched)
    n = x.shape[0] if x.ndim == 2 else 1
    return _col(c_clean, n) * x + _col(c_noisy, n) * x_t


@dataclass(frozen=True)
class NoisySample:
    x: np.ndarray
    eps: np.ndarray
    t: object
    x_t: np.ndarray


def forward_sample(x, eps, t, sched: NoiseSchedule):
    """Noise ``x`` to time ``t``: ``x_t = alpha_t * x + sigma_t * eps``."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise DimensionError(f"x {x.shape} and eps {eps.shape} differ")
    a, sg = sched.alpha_sigma(t)
    n = x.shape[0] if x.ndim == 2 else 1
    x_t = _col(a, n) * x + _col(sg, n) * eps
    return NoisySample(x=x, eps=eps, t=t, x_t=x_t)


def conditional_resample(x, x_t, r, t, sched: NoiseSchedule):
    """Build ``x_r`` from the pair ``(x, x_t)`` along the same noise path.

    Same map as :func:`ddim_interpolate` with ``s := r``; reusing ``x_t``
    keeps ``x_r`` on the trajectory of the noise that produced ``x_t``.
    """
    return ddim_interpolate(x_t, x, r, t, sched)
