"""Twin Q-networks with target copies and the clipped double-Q Bellman loss."""
from __future__ import annotations

import numpy as np

from . import nn
from .errors import DimensionError, TrainingDivergence
from .policy import prior_noise, sample_action


class CriticPair:
    """Two independently initialized ``Q(state, action)`` MLPs plus their targets."""

    def __init__(self, state_dim, action_dim, hidden_dim=256, layers=3, rng=None,
                 params=None, activation="silu"):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.spec = nn.MlpSpec(self.state_dim + self.action_dim, int(hidden_dim), int(layers), 1,
                               activation)
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng for initialization")
            params = (nn.init_params(self.spec, rng), nn.init_params(self.spec, rng))
        self.online = list(params)
        self.target = [p.copy() for p in self.online]

    def inputs(self, state, action):
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if state.ndim == 1:
            state = state.reshape(1, -1)
            action = action.reshape(1, -1)
        if state.shape[1] != self.state_dim or action.shape != (state.shape[0], self.action_dim):
            raise DimensionError(
                f"expected state (n, {self.state_dim}) and action (n, {self.action_dim}), "
                f"got {state.shape} and {action.shape}")
        return np.concatenate([state, action], axis=1)

    def forward(self, which, state, action, target=False, record=False):
        params = (self.target if target else self.online)[which]
        out, tape = nn.mlp_forward(self.spec, params, self.inputs(state, action), record)
        return out[:, 0], tape


def q_values(pair: CriticPair, state, action, target=False):
    """``(q1, q2)`` from the online (or target) heads."""
    q1, _ = pair.forward(0, state, action, target)
    q2, _ = pair.forward(1, state, action, target)
    if np.ndim(state) == 1:
        return float(q1[0]), float(q2[0])
    return q1, q2


def bellman_target(pair: CriticPair, rewards, next_states, dones, next_actions, gamma):
    """``r + (1 - done) * gamma * min(Q1_target, Q2_target)(s', a')``."""
    q1, q2 = q_values(pair, next_states, next_actions, target=True)
    y = rewards + (1.0 - dones) * gamma * np.minimum(q1, q2)
    if not np.all(np.isfinite(y)):
        raise TrainingDivergence("non-finite Bellman target")
    return y


def critic_loss(pair: CriticPair, batch, policy_net, policy_target_params, space, sched,
                gamma, n_steps, rng):
    """Clipped double-Q loss and gradients for both online heads.

    The next action is drawn with the target policy parameters. Returns
    ``(loss, (grads1, grads2), info)`` where ``loss`` is the mean over the batch
    and both heads of the squared Bellman error.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    states, actions = batch.states, batch.actions
    n = states.shape[0]
    if n == 0:
        raise DimensionError("empty batch")
    noise = prior_noise(space, rng, n)
    next_actions = sample_action(policy_net, batch.next_states, n_steps, space, sched,
                                 params=policy_target_params, noise=noise)
    y = bellman_target(pair, batch.rewards, batch.next_states, batch.dones, next_actions, gamma)
    grads = []
    loss = 0.0
    q_abs = 0.0
    for i in (0, 1):
        q, tape = pair.forward(i, states, actions, record=True)
        err = q - y
        loss += float(np.dot(err, err)) / (2 * n)
        q_abs += float(np.mean(np.abs(q))) / 2
        g, _ = nn.backward(tape, (err / n).reshape(-1, 1))
        grads.append(g)
    if not np.isfinite(loss):
        raise TrainingDivergence("non-finite critic loss")
    return loss, tuple(grads), {"q_abs_mean": q_abs, "target_mean": float(np.mean(y))}
