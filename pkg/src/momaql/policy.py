"""State-conditioned few-step generative policy.

The network ``G(x_t, state, s, t)`` predicts a clean action from a noisy one;
a jump from ``t`` down to ``s`` re-noises that prediction along the DDIM path.
Sampling starts from ``N(0, sigma_d^2 I)`` at ``t = 1`` and takes ``N`` jumps
down a uniform grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import DimensionError, DomainError
from .interpolant import ddim_coefficients
from .schedule import NoiseSchedule, inference_grid

TIME_FEATURES = 16


def time_features(tau, n_features=TIME_FEATURES):
    """Sinusoidal embedding: sin/cos at ``pi * 2**(k/2)`` for ``k < n_features/2``."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    half = n_features // 2
    freqs = np.pi * 2.0 ** (0.5 * np.arange(half))
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class ActionSpaceSpec:
    low: np.ndarray
    high: np.ndarray
    sigma_d: float = 0.5

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64).reshape(-1)
        high = np.asarray(self.high, dtype=np.float64).reshape(-1)
        if low.shape != high.shape or not np.all(np.isfinite(low)) or not np.all(np.isfinite(high)):
            raise DimensionError("action bounds must be finite vectors of equal length")
        if np.any(low >= high):
            raise DimensionError("need low < high in every coordinate")
        if not self.sigma_d > 0:
            raise DomainError("sigma_d must be positive")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self):
        return self.low.shape[0]

    def clip(self, a):
        return np.clip(a, self.low, self.high)


class PolicyNet:
    """Denoiser MLP together with the dimensions it was built for."""

    def __init__(self, state_dim, action_dim, hidden_dim=256, layers=3,
                 n_time_features=TIME_FEATURES, params=None, rng=None, activation="silu"):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.n_time_features = int(n_time_features)
        in_dim = self.action_dim + self.state_dim + 2 * self.n_time_features
        self.spec = nn.MlpSpec(in_dim, int(hidden_dim), int(layers), self.action_dim, activation)
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng for initialization")
            params = nn.init_params(self.spec, rng, zero_last=True)
        self.params = params

    def net_input(self, state, x_t, s, t):
        state = np.asarray(state, dtype=np.float64)
        x_t = np.asarray(x_t, dtype=np.float64)
        n = x_t.shape[0]
        if x_t.shape[1] != self.action_dim or state.shape != (n, self.state_dim):
            raise DimensionError(
                f"expected x_t (n, {self.action_dim}) and state (n, {self.state_dim}), "
                f"got {x_t.shape} and {state.shape}")
        fs = time_features(np.broadcast_to(s, (n,)), self.n_time_features)
        ft = time_features(np.broadcast_to(t, (n,)), self.n_time_features)
        return np.concatenate([x_t, state, fs, ft], axis=1)


def _batch(state, x_t):
    state = np.asarray(state, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    if single:
        return state.reshape(1, -1), x_t.reshape(1, -1), True
    return state, x_t, False


def denoise(net: PolicyNet, state, x_t, s, t, params=None, record=False):
    """Clean-action estimate ``G(x_t, state, s, t)``.

    Returns the estimate, or ``(estimate, tape)`` when ``record`` is set.
    """
    state, x_t, single = _batch(state, x_t)
    if np.any(np.asarray(s) > np.asarray(t)):
        raise DomainError("denoise needs s <= t")
    x = net.net_input(state, x_t, s, t)
    out, tape = nn.mlp_forward(net.spec, net.params if params is None else params, x, record)
    if single:
        out = out[0]
    return (out, tape) if record else out


def jump(net: PolicyNet, state, x_t, s, t, sched: NoiseSchedule, params=None):
    """One deterministic transition from time ``t`` to time ``s``."""
    state, x_t, single = _batch(state, x_t)
    x_hat = denoise(net, state, x_t, s, t, params)
    c_clean, c_noisy = ddim_coefficients(s, t, sched)
    c_clean = np.asarray(c_clean).reshape(-1, 1) if np.ndim(c_clean) else c_clean
    c_noisy = np.asarray(c_noisy).reshape(-1, 1) if np.ndim(c_noisy) else c_noisy
    out = c_clean * x_hat + c_noisy * x_t
    return out[0] if single else out


class SamplerTrace:
    """Everything needed to backpropagate through :func:`sample_action_traced`."""

    __slots__ = ("steps", "raw", "space")

    def __init__(self, steps, raw, space):
        self.steps = steps
        self.raw = raw
        self.space = space


def _run_sampler(net, params, state, noise, n_steps, space, sched, record):
    grid = inference_grid(n_steps)
    x = noise
    steps = []
    for i in range(n_steps):
        t, s = grid[i], grid[i + 1]
        inp = net.net_input(state, x, s, t)
        x_hat, tape = nn.mlp_forward(net.spec, params, inp, record)
        c_clean, c_noisy = ddim_coefficients(s, t, sched)
        c_clean, c_noisy = float(c_clean), float(c_noisy)
        if record:
            steps.append((tape, c_clean, c_noisy))
        x = c_clean * x_hat + c_noisy * x
    return x, steps


def prior_noise(space: ActionSpaceSpec, rng, n):
    return rng.normal(0.0, space.sigma_d, size=(n, space.dim))


def sample_action(net: PolicyNet, state, n_steps: int, space: ActionSpaceSpec,
                  sched: NoiseSchedule, rng=None, params=None, noise=None):
    """Multi-step action inference, clipped to the action bounds.

    ``state`` may be one vector or an ``(n, state_dim)`` batch. Pass ``noise``
    to fix the initial draw instead of sampling it from ``rng``.
    """
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    if single:
        state = state.reshape(1, -1)
    if noise is None:
        noise = prior_noise(space, rng, state.shape[0])
    noise = np.asarray(noise, dtype=np.float64).reshape(state.shape[0], space.dim)
    raw, _ = _run_sampler(net, net.params if params is None else params, state, noise,
                          n_steps, space, sched, record=False)
    out = space.clip(raw)
    return out[0] if single else out


def sample_action_traced(net: PolicyNet, state, noise, n_steps: int, space: ActionSpaceSpec,
                         sched: NoiseSchedule, params=None):
    """Batched :func:`sample_action` that also records a trace for backprop."""
    raw, steps = _run_sampler(net, net.params if params is None else params,
                              np.asarray(state, dtype=np.float64), noise, n_steps, space,
                              sched, record=True)
    return space.clip(raw), SamplerTrace(steps, raw, space)


def sample_action_backward(trace: SamplerTrace, grad_action, straight_through=False):
    """Parameter gradient of ``sum(grad_action * action)`` through every jump.

    The final clip has zero derivative outside the bounds; ``straight_through``
    passes the gradient unchanged instead.
    """
    space = trace.space
    g = np.asarray(grad_action, dtype=np.float64)
    if not straight_through:
        g = g * ((trace.raw > space.low) & (trace.raw < space.high))
    total = None
    for tape, c_clean, c_noisy in reversed(trace.steps):
        grads, g_in = nn.backward(tape, c_clean * g)
        total = grads if total is None else nn.add_into(total, grads)
        g = c_noisy * g + g_in[:, :space.dim]
    return total


def ema_update(target: nn.ParamStore, online: nn.ParamStore, alpha: float):
    """In place ``target <- alpha * target + (1 - alpha) * online``; returns ``target``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError("EMA coefficient must lie in [0, 1]")
    target.check_layout(online)
    if alpha == 1.0:
        return target
    for k, a in target.items():
        if alpha == 0.0:
            a[...] = online[k]
        else:
            a *= alpha
            a += (1.0 - alpha) * online[k]
    return target
