"""Toy environments, scripted behaviours, datasets and replay storage.

Two environments stand in for a benchmark suite:

``bandit2d``
    One-step bandit with a constant dummy state. The reward has two Gaussian
    bumps, a tall one at (0.6, 0.6) and a half-height one at (-0.6, -0.6).
    ``bandit2d-balanced`` gives both bumps height 1.
``pointmass``
    Planar double integrator (dt = 0.1) driven towards the origin. The state is
    (x, y, vx, vy), the action an acceleration in [-1, 1]^2 and the reward the
    negative distance to the goal. Episodes end on entering the goal radius or
    after 50 steps.

Environment functions work on single states or on ``(n, dim)`` batches.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import rng as rngs
from .errors import DataFormatError, DimensionError, DomainError

DATASET_FORMAT = "momaql-dataset"
DATASET_VERSION = 1
ACTION_STD = 0.5  # normalized actions get this per-coordinate std

BANDIT_CENTERS = np.array([[0.6, 0.6], [-0.6, -0.6]])
BANDIT_WIDTH = 0.02
BANDIT_JITTER = 0.1

PM_DT = 0.1
PM_GOAL = np.zeros(2)
PM_GOAL_RADIUS = 0.1
PM_MEDIUM_GAIN = 0.5
PM_MEDIUM_NOISE = 0.3
PM_EXPERT_KP = 4.0
PM_EXPERT_KD = 4.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    low: np.ndarray
    high: np.ndarray
    horizon: int
    mode_weights: tuple = (1.0, 0.5)

    @property
    def kind(self):
        return "bandit" if self.name.startswith("bandit2d") else "pointmass"


ENVS = {
    "bandit2d": EnvSpec("bandit2d", 1, 2, -np.ones(2), np.ones(2), 1, (1.0, 0.5)),
    "bandit2d-balanced": EnvSpec("bandit2d-balanced", 1, 2, -np.ones(2), np.ones(2), 1, (1.0, 1.0)),
    "pointmass": EnvSpec("pointmass", 4, 2, -np.ones(2), np.ones(2), 50),
}

BEHAVIORS = ("expert", "medium", "mixed", "random")


def make_env(name: str) -> EnvSpec:
    try:
        return ENVS[name]
    except KeyError:
        raise DomainError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def _rows(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.shape[1] != dim:
        raise DimensionError(f"{what}: expected dimension {dim}, got {x.shape[1]}")
    return x, single


def env_reset(spec: EnvSpec, rng, n=None):
    """Initial state, or an ``(n, state_dim)`` batch of them."""
    m = 1 if n is None else n
    if spec.kind == "bandit":
        s = np.zeros((m, 1))
    else:
        s = np.concatenate([rng.uniform(-1.0, 1.0, size=(m, 2)), np.zeros((m, 2))], axis=1)
    return s[0] if n is None else s


def bandit_reward(spec: EnvSpec, action):
    action = np.asarray(action, dtype=np.float64)
    r = 0.0
    for w, c in zip(spec.mode_weights, BANDIT_CENTERS):
        d2 = np.sum((action - c) ** 2, axis=-1)
        r = r + w * np.exp(-d2 / BANDIT_WIDTH)
    return r


def env_step(spec: EnvSpec, state, action):
    """Advance one step. Returns ``(next_state, reward, done)``.

    ``done`` marks true termination only (bandit: always; pointmass: inside the
    goal radius). The pointmass horizon is enforced by the episode runner.
    """
    state, single = _rows(state, spec.state_dim, "state")
    action, _ = _rows(action, spec.action_dim, "action")
    if action.shape[0] != state.shape[0]:
        raise DimensionError("state and action batch sizes differ")
    if spec.kind == "bandit":
        nxt = state.copy()
        reward = bandit_reward(spec, action)
        done = np.ones(state.shape[0], dtype=bool)
    else:
        vel = state[:, 2:] + PM_DT * action
        pos = state[:, :2] + PM_DT * vel
        nxt = np.concatenate([pos, vel], axis=1)
        dist = np.linalg.norm(pos - PM_GOAL, axis=1)
        reward = -dist
        done = dist < PM_GOAL_RADIUS
    if single:
        return nxt[0], float(reward[0]), bool(done[0])
    return nxt, reward, done


# ------------------------------------------------------------ behaviours ---


def scripted_action(spec: EnvSpec, behavior: str, state, rng, mode=None):
    """Raw (unnormalized) actions of a scripted behaviour for a batch of states.

    ``mode`` optionally fixes the bandit mode per row (0 = tall bump).
    """
    state, _ = _rows(state, spec.state_dim, "state")
    n = state.shape[0]
    if behavior == "random":
        a = rng.uniform(spec.low, spec.high, size=(n, spec.action_dim))
    elif spec.kind == "bandit":
        if behavior == "optimal":
            a = np.repeat(BANDIT_CENTERS[:1], n, axis=0)
        else:
            if mode is None:
                mode = {"expert": np.zeros(n, dtype=int), "medium": np.ones(n, dtype=int)}.get(behavior)
                if mode is None:
                    mode = (rng.uniform(size=n) >= 0.25).astype(int)
            a = BANDIT_CENTERS[mode] + rng.normal(0.0, BANDIT_JITTER, size=(n, 2))
    else:
        pos, vel = state[:, :2], state[:, 2:]
        if behavior in ("expert", "optimal"):
            a = PM_EXPERT_KP * (PM_GOAL - pos) - PM_EXPERT_KD * vel
        elif behavior == "medium":
            a = PM_MEDIUM_GAIN * (PM_GOAL - pos) + rng.normal(0.0, PM_MEDIUM_NOISE, size=(n, 2))
        else:
            raise DomainError(f"behavior {behavior!r} is not a per-step controller")
    return np.clip(a, spec.low, spec.high)


def run_episodes(spec: EnvSpec, policy_fn, episodes: int, rng, record=False):
    """Roll out ``episodes`` episodes in lockstep.

    ``policy_fn(states, rng, episode_ids)`` maps the raw states of the episodes
    still running to raw actions. Returns per-episode returns, plus the
    per-step records ``(episode_ids, s, a, r, s2, done)`` when ``record`` is set.
    """
    if episodes < 1:
        raise DomainError("need at least one episode")
    state = env_reset(spec, rng, episodes)
    active = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    steps = []
    for _ in range(spec.horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        action = np.clip(policy_fn(state[idx], rng, idx), spec.low, spec.high)
        nxt, reward, done = env_step(spec, state[idx], action)
        returns[idx] += reward
        if record:
            steps.append((idx, state[idx], action, reward, nxt, done))
        state[idx] = nxt
        active[idx[done]] = False
    if not record:
        return returns
    return returns, steps


# -------------------------------------------------------------- datasets ---


@dataclass(frozen=True)
class NormStats:
    state_mean: np.ndarray
    state_scale: np.ndarray
    action_mean: np.ndarray
    action_scale: np.ndarray

    @classmethod
    def fit(cls, states, actions):
        def stats(x):
            mean = x.mean(axis=0)
            std = x.std(axis=0)
            scale = np.where(std > 1e-8, std / ACTION_STD, 1.0)
            return mean, scale

        sm, ss = stats(states)
        am, as_ = stats(actions)
        return cls(sm, ss, am, as_)

    @classmethod
    def identity(cls, state_dim, action_dim):
        return cls(np.zeros(state_dim), np.ones(state_dim), np.zeros(action_dim), np.ones(action_dim))

    def norm_state(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_scale

    def norm_action(self, a):
        return (np.asarray(a, dtype=np.float64) - self.action_mean) / self.action_scale

    def denorm_action(self, a):
        return np.asarray(a, dtype=np.float64) * self.action_scale + self.action_mean

    def to_json(self):
        return {k: [float(v) for v in getattr(self, k)] for k in
                ("state_mean", "state_scale", "action_mean", "action_scale")}

    @classmethod
    def from_json(cls, obj):
        return cls(*(np.asarray(obj[k], dtype=np.float64) for k in
                     ("state_mean", "state_scale", "action_mean", "action_scale")))

    def action_bounds(self, spec: EnvSpec):
        """Env action bounds expressed in normalized coordinates."""
        return self.norm_action(spec.low), self.norm_action(spec.high)


class TransitionStore:
    """Columnar transitions with an instrumented reward column."""

    def __init__(self, states, actions, rewards, next_states, dones):
        self.states = np.asarray(states, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.float64)
        self._rewards = np.asarray(rewards, dtype=np.float64)
        self.next_states = np.asarray(next_states, dtype=np.float64)
        self.dones = np.asarray(dones, dtype=bool)
        self.reward_reads = 0

    @property
    def rewards(self):
        self.reward_reads += 1
        return self._rewards

    def __len__(self):
        return self.states.shape[0]

    def take(self, idx):
        return Batch(self, np.asarray(idx))


class Batch:
    """A minibatch view; rewards are gathered only when read."""

    __slots__ = ("source", "idx", "states", "actions", "next_states", "dones")

    def __init__(self, source: TransitionStore, idx):
        self.source = source
        self.idx = idx
        self.states = source.states[idx]
        self.actions = source.actions[idx]
        self.next_states = source.next_states[idx]
        self.dones = source.dones[idx].astype(np.float64)

    @property
    def rewards(self):
        return self.source.rewards[self.idx]

    def __len__(self):
        return self.idx.shape[0]


class Dataset(TransitionStore):
    """Offline transitions with normalized states/actions and the stats used."""

    def __init__(self, env, states, actions, rewards, next_states, dones, norm: NormStats,
                 version=DATASET_VERSION):
        super().__init__(states, actions, rewards, next_states, dones)
        self.env = env
        self.norm = norm
        self.version = version
        spec = make_env(env)
        n = self.states.shape[0]
        shapes_ok = (self.states.shape == (n, spec.state_dim)
                     and self.actions.shape == (n, spec.action_dim)
                     and self._rewards.shape == (n,)
                     and self.next_states.shape == (n, spec.state_dim)
                     and self.dones.shape == (n,))
        if not shapes_ok:
            raise DimensionError(f"dataset arrays do not match the {env} dimensions")

    @property
    def spec(self):
        return make_env(self.env)

    def header(self):
        spec = self.spec
        return {
            "format": DATASET_FORMAT,
            "version": self.version,
            "env": self.env,
            "state_dim": spec.state_dim,
            "action_dim": spec.action_dim,
            "count": len(self),
            "norm": self.norm.to_json(),
        }

    def split(self, fraction, rng):
        """Random disjoint split; returns ``(first, second)`` sharing norm stats."""
        perm = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        parts = []
        for idx in (np.sort(perm[:cut]), np.sort(perm[cut:])):
            parts.append(Dataset(self.env, self.states[idx], self.actions[idx], self._rewards[idx],
                                 self.next_states[idx], self.dones[idx], self.norm, self.version))
        return tuple(parts)

    def equals(self, other):
        """Bitwise equality of every numeric field and the header."""
        arrays = ("states", "actions", "_rewards", "next_states", "dones")
        return (self.header() == other.header()
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and all(getattr(self, a).tobytes() == getattr(other, a).tobytes() for a in arrays))


def gen_dataset(spec: EnvSpec | str, behavior: str, episodes: int, seed: int) -> Dataset:
    """Roll out a scripted behaviour and package the normalized transitions.

    bandit2d: ``expert`` jitters around the tall bump, ``medium`` around the
    short one, ``mixed`` picks the tall bump with probability 0.25.
    pointmass: ``expert`` is a PD controller, ``medium`` a weak noisy
    P-controller, ``mixed`` alternates medium and uniform-random episodes.
    ``random`` is uniform over the action box everywhere.
    """
    if isinstance(spec, str):
        spec = make_env(spec)
    if behavior not in BEHAVIORS:
        raise DomainError(f"unknown behavior {behavior!r}; choose from {BEHAVIORS}")
    if episodes < 1:
        raise DomainError("need at least one episode")
    rng = rngs.stream(seed, "gen")
    if spec.kind == "pointmass" and behavior == "mixed":
        def policy(states, r, ids):
            a_med = scripted_action(spec, "medium", states, r)
            a_rand = scripted_action(spec, "random", states, r)
            return np.where((ids % 2 == 1)[:, None], a_rand, a_med)
    else:
        def policy(states, r, ids):
            return scripted_action(spec, behavior, states, r)
    _, steps = run_episodes(spec, policy, episodes, rng, record=True)
    return _assemble(spec, steps, episodes)


def _assemble(spec, steps, episodes):
    per_ep = [[] for _ in range(episodes)]
    for idx, s, a, r, s2, d in steps:
        for row, ep in enumerate(idx):
            per_ep[ep].append((s[row], a[row], r[row], s2[row], d[row]))
    flat = [t for ep in per_ep for t in ep]
    if flat:
        S = np.stack([t[0] for t in flat])
        A = np.stack([t[1] for t in flat])
        R = np.array([t[2] for t in flat], dtype=np.float64)
        S2 = np.stack([t[3] for t in flat])
        D = np.array([t[4] for t in flat], dtype=bool)
    else:
        S = np.zeros((0, spec.state_dim))
        A = np.zeros((0, spec.action_dim))
        R = np.zeros(0)
        S2 = np.zeros((0, spec.state_dim))
        D = np.zeros(0, dtype=bool)
    norm = NormStats.fit(np.concatenate([S, S2]) if len(S) else np.zeros((1, spec.state_dim)),
                         A if len(A) else np.zeros((1, spec.action_dim)))
    return Dataset(spec.name, norm.norm_state(S), norm.norm_action(A), R, norm.norm_state(S2), D, norm)


# ------------------------------------------------------------------- I/O ---


def _record(ds, i):
    return {
        "s": [float(x) for x in ds.states[i]],
        "a": [float(x) for x in ds.actions[i]],
        "r": float(ds._rewards[i]),
        "s2": [float(x) for x in ds.next_states[i]],
        "done": bool(ds.dones[i]),
    }


def save_dataset(ds: Dataset, path):
    """Write the header line, then one JSON object per transition."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(ds.header()) + "\n")
        for i in range(len(ds)):
            fh.write(json.dumps(_record(ds, i)) + "\n")


def _vector(obj, key, dim, lineno):
    v = obj.get(key)
    if not isinstance(v, list) or len(v) != dim or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise DataFormatError(f"field {key!r} must be a list of {dim} numbers", lineno)
    return v


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataFormatError("empty file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"header is not valid JSON ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DataFormatError("not a dataset file", 1)
    if header.get("version") != DATASET_VERSION:
        raise DataFormatError(f"unsupported dataset version {header.get('version')!r}", 1)
    try:
        spec = make_env(header["env"])
        ds_dim, da_dim, count = int(header["state_dim"]), int(header["action_dim"]), int(header["count"])
        norm = NormStats.from_json(header["norm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad header ({exc})", 1) from None
    if (ds_dim, da_dim) != (spec.state_dim, spec.action_dim):
        raise DataFormatError(f"header dimensions do not match env {spec.name}", 1)
    if len(lines) - 1 != count:
        raise DataFormatError(f"expected {count} records, found {len(lines) - 1} (truncated file?)",
                              len(lines) + 1 if len(lines) - 1 < count else count + 2)
    S = np.zeros((count, ds_dim))
    A = np.zeros((count, da_dim))
    R = np.zeros(count)
    S2 = np.zeros((count, ds_dim))
    D = np.zeros(count, dtype=bool)
    for i in range(count):
        lineno = i + 2
        try:
            obj = json.loads(lines[i + 1])
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict) or list(obj) != ["s", "a", "r", "s2", "done"]:
            raise DataFormatError("record must have fields s, a, r, s2, done in that order", lineno)
        S[i] = _vector(obj, "s", ds_dim, lineno)
        A[i] = _vector(obj, "a", da_dim, lineno)
        S2[i] = _vector(obj, "s2", ds_dim, lineno)
        r = obj["r"]
        if not isinstance(r, (int, float)) or isinstance(r, bool):
            raise DataFormatError("field 'r' must be a number", lineno)
        R[i] = r
        if not isinstance(obj["done"], bool):
            raise DataFormatError("field 'done' must be a boolean", lineno)
        D[i] = obj["done"]
    return Dataset(spec.name, S, A, R, S2, D, norm, header["version"])


# ---------------------------------------------------------------- replay ---


class ReplayBuffer(TransitionStore):
    """Fixed-capacity FIFO ring of (normalized) transitions."""

    def __init__(self, capacity, state_dim, action_dim):
        if capacity < 1:
            raise DomainError("buffer capacity must be positive")
        super().__init__(np.zeros((capacity, state_dim)), np.zeros((capacity, action_dim)),
                         np.zeros(capacity), np.zeros((capacity, state_dim)),
                         np.zeros(capacity, dtype=bool))
        self.capacity = int(capacity)
        self.size = 0
        self.head = 0  # next slot to write

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done):
        i = self.head
        self.states[i] = s
        self.actions[i] = a
        self._rewards[i] = r
        self.next_states[i] = s2
        self.dones[i] = done
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, store: TransitionStore):
        for i in range(len(store)):
            self.push(store.states[i], store.actions[i], store._rewards[i],
                      store.next_states[i], store.dones[i])

    def ordered(self):
        """Slot indices from oldest to newest."""
        start = self.head if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, batch_size, rng) -> Batch:
        if self.size == 0:
            raise DomainError("cannot sample from an empty buffer")
        return self.take(rng.integers(0, self.size, size=batch_size))


def buffer_push(buffer: ReplayBuffer, s, a, r, s2, done):
    buffer.push(s, a, r, s2, done)
    return buffer


def buffer_sample(buffer: ReplayBuffer, batch_size, rng) -> Batch:
    return buffer.sample(batch_size, rng)


def sample_batch(store: TransitionStore, batch_size, rng) -> Batch:
    """Uniform-with-replacement minibatch from any transition store."""
    if isinstance(store, ReplayBuffer):
        return store.sample(batch_size, rng)
    if len(store) == 0:
        raise DomainError("cannot sample from an empty dataset")
    return store.take(rng.integers(0, len(store), size=batch_size))


# --------------------------------------------------------------- anchors ---

ANCHOR_EPISODES = 1000
ANCHOR_SEEDS = (0, 1, 2, 3, 4)
ANCHOR_FILE = "anchors.txt"


def compute_anchors(env, episodes=ANCHOR_EPISODES, seeds=ANCHOR_SEEDS):
    """Mean returns ``(J_random, J_expert)`` of the scripted anchor policies.

    ``episodes`` are spread evenly over ``seeds``; the expert is the noiseless
    optimum (tall bump centre for bandits, PD controller for pointmass).
    """
    spec = make_env(env) if isinstance(env, str) else env
    per_seed = max(1, episodes // len(seeds))
    out = []
    for behavior in ("random", "optimal"):
        rets = []
        for seed in seeds:
            rng = rngs.stream(seed, "anchor")
            rets.append(run_episodes(
                spec, lambda s, r, ids: scripted_action(spec, behavior, s, r), per_seed, rng))
        out.append(float(np.mean(np.concatenate(rets))))
    return tuple(out)


def write_anchor_file(path, envs=tuple(ENVS)):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# env J_random J_expert episodes seeds\n")
        for name in envs:
            jr, je = compute_anchors(name)
            seeds = ",".join(str(s) for s in ANCHOR_SEEDS)
            fh.write(f"{name} {jr!r} {je!r} {ANCHOR_EPISODES} {seeds}\n")


def read_anchor_file(text):
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, jr, je, _episodes, _seeds = line.split()
        table[name] = (float(jr), float(je))
    return table


_ANCHORS = None


def anchors(env):
    """Cached ``(J_random, J_expert)`` for ``env``; computed if not shipped."""
    global _ANCHORS
    if _ANCHORS is None:
        try:
            _ANCHORS = read_anchor_file(
                resources.files("momaql").joinpath(ANCHOR_FILE).read_text(encoding="utf-8"))
        except (FileNotFoundError, OSError):
            _ANCHORS = {}
    name = env if isinstance(env, str) else env.name
    if name not in _ANCHORS:
        _ANCHORS[name] = compute_anchors(name)
    return _ANCHORS[name]


def normalized_score(env, mean_return, anchor=None):
    """``100 * (J - J_random) / (J_expert - J_random)``."""
    j_r, j_e = anchor if anchor is not None else anchors(env)
    if j_e == j_r:
        raise DomainError("degenerate anchors: expert and random returns coincide")
    return 100.0 * (mean_return - j_r) / (j_e - j_r)
