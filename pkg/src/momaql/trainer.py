"""Training loops: behaviour cloning, offline actor-critic and online fine-tuning.

One training step updates the twin critics on the clipped double-Q target,
then the policy on the grouped MMD consistency loss minus ``eta`` times the
smaller critic value of freshly sampled actions, then moves all targets with
an exponential moving average.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import nn
from . import rng as rngs
from .critic import CriticPair, critic_loss
from .envsets import (Dataset, NormStats, ReplayBuffer, env_reset, env_step, load_dataset,
                      make_env, normalized_score, run_episodes, sample_batch)
from .errors import ConfigError, DataFormatError, DimensionError, TrainingDivergence
from .interpolant import conditional_resample, ddim_coefficients, forward_sample
from .mmd import KernelConfig, ParticleGroups, mmd2_vstat_grouped_grad, weight
from .policy import (ActionSpaceSpec, PolicyNet, ema_update, prior_noise, sample_action,
                     sample_action_backward, sample_action_traced)
from .schedule import NoiseSchedule, TimeSamplerConfig, sample_triples

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "critic_loss", "bc_loss", "q_term", "q_abs_mean",
                  "eval_return_mean", "eval_return_std", "norm_score", "wallclock_s")
CHECKPOINT_FORMAT = "momaql-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Components:
    """Non-learned pieces derived from a resolved config."""

    sched: NoiseSchedule
    times: TimeSamplerConfig
    kernel: KernelConfig
    space: ActionSpaceSpec

    @classmethod
    def build(cls, cfg, space_low, space_high):
        return cls(
            sched=NoiseSchedule(cfg["schedule.kind"]),
            times=TimeSamplerConfig(cfg["schedule.p_mean"], cfg["schedule.p_std"],
                                    cfg["schedule.delta_t"], cfg["schedule.t_min"],
                                    cfg["schedule.t_max"]),
            kernel=KernelConfig(cfg["mmd.family"], cfg["mmd.sigma"], cfg["mmd.a"], cfg["mmd.b"],
                                cfg["mmd.weight_mode"], cfg["mmd.bandwidth_mixture"], cfg["mmd.k"]),
            space=ActionSpaceSpec(space_low, space_high, cfg["policy.sigma_d"]),
        )


class Agent:
    """Policy, EMA policy target, twin critics with targets, and their optimizers."""

    def __init__(self, cfg, env_name, norm: NormStats, init=True):
        self.cfg = cfg
        self.env_name = env_name
        self.env = make_env(env_name)
        self.norm = norm
        low, high = norm.action_bounds(self.env)
        self.parts = Components.build(cfg, low, high)
        self.step = 0
        ds, da = self.env.state_dim, self.env.action_dim
        init_rng = rngs.stream(cfg["train.seed"], "init") if init else None
        self.policy = PolicyNet(ds, da, cfg["policy.hidden_dim"], cfg["policy.layers"],
                                cfg["policy.time_features"], rng=init_rng,
                                params=None if init else nn.ParamStore())
        self.critics = CriticPair(ds, da, cfg["critic.hidden_dim"], cfg["critic.layers"],
                                  rng=init_rng,
                                  params=None if init else (nn.ParamStore(), nn.ParamStore()))
        self.policy_target = self.policy.params.copy()
        lr = cfg["train.lr"]
        self.actor_opt = nn.AdamState.for_params(self.policy.params, lr)
        self.critic_opt = nn.AdamState.for_params(self._critic_store(), lr)

    def _critic_store(self):
        arrays = {}
        for i, p in enumerate(self.critics.online):
            for k, a in p.items():
                arrays[f"q{i + 1}/{k}"] = a
        return nn.ParamStore(arrays)

    @property
    def mode(self):
        return self.cfg["train.mode"]

    @property
    def eta(self):
        return 0.0 if self.mode == "bc" else self.cfg["train.eta"]

    def act(self, raw_states, rng, n_steps=None, noise=None):
        """Raw env actions for raw env states (batched)."""
        n_steps = n_steps or self.cfg["policy.num_steps"]
        s = self.norm.norm_state(raw_states)
        a = sample_action(self.policy, s, n_steps, self.parts.space, self.parts.sched, rng,
                          noise=noise)
        return np.clip(self.norm.denorm_action(a), self.env.low, self.env.high)


# ----------------------------------------------------------------- losses --


def actor_loss(agent: Agent, batch, rng_noise, rng_time, eta=None):
    """Grouped MMD consistency loss minus ``eta`` times the clipped critic value.

    Returns ``(loss, grads, parts)`` where ``parts`` holds ``bc_loss`` and
    ``q_term``. Gradients flow into the online policy only.
    """
    cfg = agent.cfg
    p = agent.parts
    net = agent.policy
    eta = agent.eta if eta is None else eta
    states, actions = batch.states, batch.actions
    n, d = actions.shape
    m = cfg["mmd.particles_M"]
    if n % m:
        raise ConfigError(f"M={m} does not divide batch size {n}")
    g = n // m

    s, r, t = sample_triples(p.times, rng_time, g)
    s_i, r_i, t_i = (np.repeat(x, m) for x in (s, r, t))
    eps = rng_noise.normal(0.0, p.space.sigma_d, size=(n, d))
    a_t = forward_sample(actions, eps, t_i, p.sched).x_t
    a_r = conditional_resample(actions, a_t, r_i, t_i, p.sched)

    x_u, tape_u = nn.mlp_forward(net.spec, net.params, net.net_input(states, a_t, s_i, t_i))
    cc_u, cn_u = ddim_coefficients(s_i, t_i, p.sched)
    u = cc_u[:, None] * x_u + cn_u[:, None] * a_t

    x_v, _ = nn.mlp_forward(net.spec, agent.policy_target, net.net_input(states, a_r, s_i, r_i),
                            record=False)
    cc_v, cn_v = ddim_coefficients(s_i, r_i, p.sched)
    v = cc_v[:, None] * x_v + cn_v[:, None] * a_r

    groups = ParticleGroups.from_flat(u, v, m, s, r, t)
    w = weight(p.kernel, p.sched, s, t)
    bc_loss, grad_u = mmd2_vstat_grouped_grad(p.kernel, groups, weights=w)
    grads, _ = nn.backward(tape_u, cc_u[:, None] * grad_u.reshape(n, d))

    q_term = 0.0
    q_abs = float("nan")
    if eta > 0.0:
        noise = prior_noise(p.space, rng_noise, n)
        a_hat, trace = sample_action_traced(net, states, noise, cfg["policy.num_steps"], p.space,
                                            p.sched)
        q1, tape1 = agent.critics.forward(0, states, a_hat, record=True)
        q2, tape2 = agent.critics.forward(1, states, a_hat, record=True)
        qmin = np.minimum(q1, q2)
        q_abs = float(np.mean(np.abs(qmin)))
        scale = eta
        if cfg["train.q_normalize"]:
            scale = eta / max(q_abs, 1e-8)
        q_term = -scale * float(np.mean(qmin))
        pick1 = q1 <= q2
        dq = -scale / n
        _, gin1 = nn.backward(tape1, np.where(pick1, dq, 0.0).reshape(-1, 1))
        _, gin2 = nn.backward(tape2, np.where(pick1, 0.0, dq).reshape(-1, 1))
        ds = agent.critics.state_dim
        grad_a = gin1[:, ds:] + gin2[:, ds:]
        nn.add_into(grads, sample_action_backward(trace, grad_a, cfg["train.clip_straight_through"]))

    loss = bc_loss + q_term
    if not math.isfinite(loss):
        raise TrainingDivergence("non-finite actor loss")
    return loss, grads, {"bc_loss": bc_loss, "q_term": q_term, "q_abs_actor": q_abs}


def _clip_pair(g1, g2, max_norm):
    norm = math.hypot(g1.global_norm(), g2.global_norm())
    if norm <= max_norm:
        return g1, g2
    scale = max_norm / norm
    return (nn.ParamStore({k: a * scale for k, a in g1.items()}),
            nn.ParamStore({k: a * scale for k, a in g2.items()}))


def train_step(agent: Agent, batch, streams):
    """Critic update (skipped in bc mode), actor update, then EMA of the targets."""
    cfg = agent.cfg
    p = agent.parts
    row = {"critic_loss": None, "q_abs_mean": None}
    alpha = cfg["train.ema_alpha"]
    try:
        if agent.mode != "bc":
            c_loss, (g1, g2), info = critic_loss(
                agent.critics, batch, agent.policy, agent.policy_target, p.space, p.sched,
                cfg["train.gamma"], cfg["policy.num_steps"], streams["noise"])
            g1, g2 = _clip_pair(g1, g2, cfg["train.grad_clip"])
            store = agent._critic_store()
            joint = nn.ParamStore({**{f"q1/{k}": a for k, a in g1.items()},
                                   **{f"q2/{k}": a for k, a in g2.items()}})
            nn.adam_step(store, joint, agent.critic_opt)
            for i, head in enumerate(agent.critics.online):
                for k in head:
                    head[k] = store[f"q{i + 1}/{k}"]
            row["critic_loss"] = c_loss
            row["q_abs_mean"] = info["q_abs_mean"]

        a_loss, grads, parts = actor_loss(agent, batch, streams["noise"], streams["time"])
        grads, _ = nn.clip_global_norm(grads, cfg["train.grad_clip"])
        nn.adam_step(agent.policy.params, grads, agent.actor_opt)
    except TrainingDivergence as exc:
        raise TrainingDivergence(str(exc), agent.step + 1) from None

    ema_update(agent.policy_target, agent.policy.params, alpha)
    if agent.mode != "bc":
        for tgt, onl in zip(agent.critics.target, agent.critics.online):
            ema_update(tgt, onl, alpha)
    agent.step += 1
    row.update(step=agent.step, bc_loss=parts["bc_loss"], q_term=parts["q_term"])
    return row


# ------------------------------------------------------------- evaluation --


def evaluate_agent(agent: Agent, episodes, seed, n_steps=None, env=None):
    """Mean/std return and normalized score of the policy over ``episodes`` rollouts."""
    env = env or agent.env
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = rngs.stream(seed, "eval")
    returns = run_episodes(env, lambda s, r, ids: agent.act(s, r, n_steps), episodes, rng)
    mean = float(np.mean(returns))
    return {
        "eval_return_mean": mean,
        "eval_return_std": float(np.std(returns)),
        "norm_score": normalized_score(env.name, mean),
    }


def evaluate_policy(checkpoint, env=None, episodes=10, n_steps=None, seed=0):
    """Load a checkpoint directory and evaluate it."""
    agent = load_checkpoint(checkpoint)
    env_spec = make_env(env) if isinstance(env, str) else env
    if env_spec is not None and (env_spec.state_dim, env_spec.action_dim) != (
            agent.env.state_dim, agent.env.action_dim):
        raise DimensionError("environment and checkpoint dimensions differ")
    return evaluate_agent(agent, episodes, seed, n_steps, env_spec)


# ---------------------------------------------------------------- metrics --


class MetricsWriter:
    """Append-only CSV of per-step metrics."""

    def __init__(self, path, append=False):
        self.path = path
        exists = append and os.path.exists(path)
        self.fh = open(path, "a" if exists else "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if not exists:
            self.writer.writerow(METRIC_COLUMNS)
        self.rows = []
        self.last_step = None

    @staticmethod
    def _fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return "" if math.isnan(v) else repr(v)
        return str(v)

    def write(self, row):
        step = row["step"]
        if self.last_step is not None and step <= self.last_step:
            raise ValueError("metric steps must increase")
        for key in ("critic_loss", "bc_loss", "q_term", "q_abs_mean"):
            v = row.get(key)
            if v is not None and not math.isfinite(v):
                raise TrainingDivergence(f"non-finite {key} logged", step)
        self.last_step = step
        self.rows.append(row)
        self.writer.writerow([self._fmt(row.get(c)) for c in METRIC_COLUMNS])

    def close(self):
        self.fh.close()


# ------------------------------------------------------------ checkpoints --

_NETS = ("policy", "policy_target", "q1", "q2", "q1_target", "q2_target")


def save_checkpoint(agent: Agent, path, extra=None):
    os.makedirs(path, exist_ok=True)
    cfg_hash = cfgmod.config_hash(agent.cfg)
    stores = {
        "policy": (agent.policy.params, agent.policy.spec),
        "policy_target": (agent.policy_target, agent.policy.spec),
        "q1": (agent.critics.online[0], agent.critics.spec),
        "q2": (agent.critics.online[1], agent.critics.spec),
        "q1_target": (agent.critics.target[0], agent.critics.spec),
        "q2_target": (agent.critics.target[1], agent.critics.spec),
        "actor_adam_m": (agent.actor_opt.m, None),
        "actor_adam_v": (agent.actor_opt.v, None),
        "critic_adam_m": (agent.critic_opt.m, None),
        "critic_adam_v": (agent.critic_opt.v, None),
    }
    for name, (params, spec) in stores.items():
        nn.save_params(os.path.join(path, name + ".params"), params, spec,
                       {"config_hash": cfg_hash, "step": agent.step})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": agent.step,
        "env": agent.env_name,
        "config_hash": cfg_hash,
        "config": agent.cfg,
        "norm": agent.norm.to_json(),
        "actor_adam_step": agent.actor_opt.step,
        "critic_adam_step": agent.critic_opt.step,
        "files": sorted(n + ".params" for n in stores),
    }
    manifest.update(extra or {})
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path) -> Agent:
    try:
        with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read checkpoint manifest in {path}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = cfgmod.resolve(manifest["config"])
    if cfgmod.config_hash(cfg) != manifest["config_hash"]:
        raise DataFormatError("checkpoint config hash mismatch")
    agent = Agent(cfg, manifest["env"], NormStats.from_json(manifest["norm"]), init=False)

    def load(name):
        params, _, meta = nn.load_params(os.path.join(path, name + ".params"))
        if meta.get("config_hash") != manifest["config_hash"]:
            raise DataFormatError(f"{name}.params belongs to a different run")
        return params

    agent.policy.params = load("policy")
    agent.policy_target = load("policy_target")
    agent.critics.online = [load("q1"), load("q2")]
    agent.critics.target = [load("q1_target"), load("q2_target")]
    nn.mlp_forward(agent.policy.spec, agent.policy.params,
                   np.zeros((1, agent.policy.spec.in_dim)), record=False, check=True)
    nn.mlp_forward(agent.critics.spec, agent.critics.online[0],
                   np.zeros((1, agent.critics.spec.in_dim)), record=False, check=True)
    lr = cfg["train.lr"]
    agent.actor_opt = nn.AdamState(load("actor_adam_m"), load("actor_adam_v"),
                                   manifest["actor_adam_step"], lr)
    agent.critic_opt = nn.AdamState(load("critic_adam_m"), load("critic_adam_v"),
                                    manifest["critic_adam_step"], lr)
    agent.step = manifest["step"]
    agent.manifest = manifest
    return agent


# ------------------------------------------------------------------ loops --


def _train_streams(seed, *sub):
    return {name: rngs.stream(seed, name, *sub) for name in ("data", "noise", "time", "env")}


def _maybe_eval(agent, cfg, row, out_dir, final):
    every = cfg["eval.every"]
    due = final or (every and agent.step % every == 0)
    if not due:
        return
    row.update(evaluate_agent(agent, cfg["eval.episodes"], cfg["eval.seed"]))
    if out_dir is not None:
        name = f"step_{agent.step:08d}" if cfg["eval.keep_history"] else "latest"
        save_checkpoint(agent, os.path.join(out_dir, name))


def train(dataset: Dataset, cfg, out_dir=None, log_every=0):
    """Run ``epochs * steps_per_epoch`` updates on uniform minibatches.

    Writes ``metrics.csv`` and checkpoints under ``out_dir`` when given.
    Returns ``(agent, rows)``.
    """
    cfg = cfgmod.resolve(cfg)
    if cfg["env.name"] and cfg["env.name"] != dataset.env:
        raise DimensionError(f"config env {cfg['env.name']} does not match dataset env {dataset.env}")
    agent = Agent(cfg, dataset.env, dataset.norm)
    streams = _train_streams(cfg["train.seed"])
    total = cfg["train.epochs"] * cfg["train.steps_per_epoch"]
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    rows = []
    t0 = time.perf_counter()
    try:
        for _ in range(total):
            batch = sample_batch(dataset, cfg["train.batch_size"], streams["data"])
            row = train_step(agent, batch, streams)
            _maybe_eval(agent, cfg, row, out_dir, final=agent.step == total)
            row["wallclock_s"] = time.perf_counter() - t0
            rows.append(row)
            if writer is not None:
                writer.write(row)
            if log_every and agent.step % log_every == 0:
                logger.info("step %d bc %.4g q %.4g", agent.step, row["bc_loss"], row["q_term"])
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None:
        save_checkpoint(agent, os.path.join(out_dir, "final"), {"data_path": cfg["data.path"]})
    return agent, rows


def finetune_online(agent_or_ckpt, dataset: Dataset | None, cfg_overrides=None, out_dir=None,
                    log_every=0):
    """Continue training with live interaction after offline pretraining.

    The replay buffer is seeded with ``dataset`` and then receives one
    environment transition per gradient step. Step numbering continues from
    the checkpoint; the first metrics row is an evaluation of the starting
    policy. Returns ``(agent, rows)``.
    """
    agent = load_checkpoint(agent_or_ckpt) if isinstance(agent_or_ckpt, (str, os.PathLike)) \
        else agent_or_ckpt
    cfg = cfgmod.resolve(agent.cfg, cfg_overrides or {}, {"train.mode": "online-finetune"})
    agent.cfg = cfg
    agent.actor_opt.lr = agent.critic_opt.lr = cfg["train.lr"]
    env = agent.env
    if dataset is None and cfg["data.path"]:
        dataset = load_dataset(cfg["data.path"])
    buffer = ReplayBuffer(cfg["online.buffer_capacity"], env.state_dim, env.action_dim)
    if dataset is not None:
        if dataset.env != agent.env_name:
            raise DimensionError("dataset and checkpoint environments differ")
        buffer.extend(dataset)
    seed = cfg["train.seed"]
    streams = _train_streams(seed, 1)
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    t0 = time.perf_counter()
    first = {"step": agent.step}
    first.update(evaluate_agent(agent, cfg["eval.episodes"], cfg["eval.seed"]))
    first["wallclock_s"] = time.perf_counter() - t0
    rows = [first]
    if writer is not None:
        writer.write(first)
    total = cfg["online.steps"]
    state = env_reset(env, streams["env"])
    ep_len = 0
    try:
        for k in range(total):
            action = agent.act(state.reshape(1, -1), streams["env"])[0]
            nxt, reward, done = env_step(env, state, action)
            norm = agent.norm
            buffer.push(norm.norm_state(state), norm.norm_action(action), reward,
                        norm.norm_state(nxt), done)
            ep_len += 1
            if done or ep_len >= env.horizon:
                state = env_reset(env, streams["env"])
                ep_len = 0
            else:
                state = nxt
            batch = buffer.sample(cfg["train.batch_size"], streams["data"])
            row = train_step(agent, batch, streams)
            _maybe_eval(agent, cfg, row, out_dir, final=k == total - 1)
            row["wallclock_s"] = time.perf_counter() - t0
            rows.append(row)
            if writer is not None:
                writer.write(row)
            if log_every and (k + 1) % log_every == 0:
                logger.info("online step %d", agent.step)
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None:
        save_checkpoint(agent, os.path.join(out_dir, "final"), {"data_path": cfg["data.path"]})
    return agent, rows
