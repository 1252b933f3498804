"""End-to-end acceptance criteria 1-10.

Each test records a one-line PASS/FAIL summary (shown at the end of the
pytest run). Training runs are cached per module so the sampling-step and
eta sweeps reuse the shared baseline runs.
"""
import csv
import functools
import time

import numpy as np
import pytest

from momaql import cli, config, envsets, nn, trainer
from momaql.interpolant import conditional_resample, ddim_interpolate, forward_sample
from momaql.mmd import (KernelConfig, ParticleGroups, mmd2_analytic_gaussian, mmd2_ustat,
                        mmd2_vstat_grouped)
from momaql.policy import PolicyNet, denoise
from momaql.schedule import NoiseSchedule, TimeSamplerConfig, sample_triples

SEEDS = (0, 1, 2, 3, 4)
BANDIT_STEPS = 20_000
BANDIT_NET = {"policy.hidden_dim": 64, "critic.hidden_dim": 64}
EVAL_EPISODES = 1000


# --------------------------------------------------------------- helpers --


@functools.lru_cache(maxsize=None)
def bandit_run(seed, mode, n_steps=2, eta=0.5):
    """Train on bandit2d mixed; returns (normalized score, wall-clock seconds)."""
    t0 = time.perf_counter()
    ds = envsets.gen_dataset("bandit2d", "mixed", 2000, seed)
    cfg = config.resolve(BANDIT_NET, {
        "env.name": "bandit2d", "train.mode": mode, "train.eta": eta if mode != "bc" else 0.0,
        "policy.num_steps": n_steps, "train.epochs": 1, "train.steps_per_epoch": BANDIT_STEPS,
        "train.seed": seed, "eval.every": 0, "eval.episodes": EVAL_EPISODES})
    _, rows = trainer.train(ds, cfg)
    return rows[-1]["norm_score"], time.perf_counter() - t0


def q_effect(n_steps=2, eta=0.5):
    """Criterion-6 check at one (N, eta); returns (ok, detail)."""
    rl = [bandit_run(s, "offline", n_steps, eta) for s in SEEDS]
    bc = [bandit_run(s, "bc", n_steps) for s in SEEDS]
    rl_ok = sum(score >= 90.0 for score, _ in rl) >= 4
    bc_ok = sum(score <= 60.0 for score, _ in bc) >= 4
    fast = max(t for _, t in rl + bc) < 15 * 60
    detail = (f"N={n_steps} eta={eta}: offline scores {[round(s, 1) for s, _ in rl]} (need >=90 in 4/5), "
              f"bc scores {[round(s, 1) for s, _ in bc]} (need <=60 in 4/5), "
              f"max run {max(t for _, t in rl + bc):.0f}s")
    return rl_ok and bc_ok and fast, detail


def _metrics_without_clock(path):
    with open(path, newline="") as fh:
        return [row[:-1] for row in csv.reader(fh)]


# -------------------------------------------------------------- criteria --


def test_criterion_01_mmd_oracle(acceptance):
    t0 = time.perf_counter()
    cfg = KernelConfig("rbf", 1.2)
    exact = mmd2_analytic_gaussian(1.2, 2, [0.0, 0.0], 1.0, [1.0, 0.0], 1.0)
    # independent Monte-Carlo oracle for the closed form, 10^6 paired draws
    rng = np.random.default_rng(2024)
    m = 1_000_000
    x1, x2 = rng.normal(size=(2, m, 2))
    y1, y2 = rng.normal(size=(2, m, 2)) + [1.0, 0.0]

    def k(a, b):
        return np.exp(-np.sum((a - b) ** 2, axis=1) / (2 * 1.2**2))

    h = k(x1, x2) + k(y1, y2) - k(x1, y2) - k(x2, y1)
    mc_ok = abs(h.mean() - exact) <= 4 * h.std() / np.sqrt(m)
    vals = [mmd2_ustat(cfg, rng.normal(size=(4096, 2)), rng.normal(size=(4096, 2)) + [1.0, 0.0])
            for _ in range(20)]
    mean, se = np.mean(vals), np.std(vals, ddof=1) / np.sqrt(20)
    elapsed = time.perf_counter() - t0
    ok = mc_ok and abs(mean - exact) <= 3 * se and elapsed < 30
    assert acceptance(1, ok, f"U-stat mean {mean:.6f} vs analytic {exact:.6f} (3 se = {3 * se:.6f}), "
                             f"MC oracle ok={mc_ok}, {elapsed:.1f}s")


def test_criterion_02_path_identity(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for kind in ("fm", "vp"):
        sched = NoiseSchedule(kind)
        n = 10_000
        x = rng.normal(size=(n, 2))
        eps = rng.normal(size=(n, 2))
        t = rng.uniform(0.0, 1.0, n)
        t = np.where(t == 0.0, 1.0, t)
        r = t * rng.uniform(0.0, 1.0, n)
        x_t = forward_sample(x, eps, t, sched).x_t
        direct = forward_sample(x, eps, r, sched).x_t
        worst = max(worst, float(np.max(np.abs(conditional_resample(x, x_t, r, t, sched) - direct))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    assert acceptance(2, ok, f"max abs error {worst:.2e} over 2x10^4 draws, {elapsed:.2f}s")


def test_criterion_03_gradients(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    checked = 0
    for net_id in range(10):
        layers = 1 + net_id % 4
        spec = nn.MlpSpec(int(rng.integers(1, 6)), int(rng.integers(2, 9)), layers,
                          int(rng.integers(1, 4)))
        params = nn.ParamStore({k: rng.normal(0, 0.7, size=s) for k, s in spec.layout().items()})
        x = rng.normal(size=(4, spec.in_dim))
        c = rng.normal(size=(4, spec.out_dim))

        def loss():
            out, _ = nn.mlp_forward(spec, params, x, record=False)
            return float(np.sum(c * np.tanh(out)))

        out, tape = nn.mlp_forward(spec, params, x)
        grads, _ = nn.backward(tape, c * (1 - np.tanh(out) ** 2))
        h = 1e-6
        for key in params:
            p = params[key]
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                lp = loss()
                p[idx] = old - h
                lm = loss()
                p[idx] = old
                fd = (lp - lm) / (2 * h)
                g = grads[key][idx]
                scale = max(abs(fd), abs(g))
                if scale > 0.0:
                    worst = max(worst, abs(fd - g) / scale)
                checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30
    assert acceptance(3, ok, f"worst relative error {worst:.2e} over {checked} entries "
                             f"of 10 nets, {elapsed:.1f}s")


def test_criterion_04_bc_distribution(acceptance):
    centers = envsets.BANDIT_CENTERS
    results = []
    for seed in (0, 1, 2):
        t0 = time.perf_counter()
        full = envsets.gen_dataset("bandit2d-balanced", "mixed", 5000, seed)
        train_ds, held = full.split(0.8, np.random.default_rng(seed))
        cfg = config.resolve(BANDIT_NET, {
            "env.name": "bandit2d-balanced", "train.mode": "bc", "train.eta": 0.0,
            "train.batch_size": 256, "mmd.particles_M": 4, "policy.num_steps": 2,
            "train.epochs": 1, "train.steps_per_epoch": 20_000, "train.seed": seed,
            "eval.every": 0})
        agent, _ = trainer.train(train_ds, cfg)
        samples = agent.act(np.zeros((1024, 1)), np.random.default_rng(100 + seed))
        data = held.norm.denorm_action(held.actions)
        mmd2 = mmd2_ustat(KernelConfig("rbf", 1.2), samples, data)
        nearest = np.argmin(((samples[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        fracs = np.bincount(nearest, minlength=2) / len(samples)
        elapsed = time.perf_counter() - t0
        results.append((mmd2 < 0.05 and fracs.min() >= 0.2 and elapsed < 600, mmd2, fracs, elapsed))
    ok = all(r[0] for r in results)
    detail = "; ".join(f"seed {i}: MMD2 {m:.4f} modes {f.round(3).tolist()} {t:.0f}s"
                       for i, (_, m, f, t) in enumerate(results))
    assert acceptance(4, ok, detail)


def test_criterion_05_ct_reduction(acceptance):
    t0 = time.perf_counter()
    sched = NoiseSchedule("fm")
    rng = np.random.default_rng(5)
    net = PolicyNet(3, 2, 16, 2, rng=rng)
    for key in net.params:
        net.params[key] = net.params[key] + 0.3 * rng.normal(size=net.params[key].shape)
    target = net.params.copy()
    for key in target:
        target[key] = target[key] + 0.05 * rng.normal(size=target[key].shape)
    n = 128
    states = rng.normal(size=(n, 3))
    actions = rng.normal(0, 0.5, size=(n, 2))
    s, r, t = sample_triples(TimeSamplerConfig(), rng, n)
    eps = rng.normal(0, 0.5, size=(n, 2))  # one noise draw shared by both branches
    a_t = forward_sample(actions, eps, t, sched).x_t
    a_r = conditional_resample(actions, a_t, r, t, sched)
    u = ddim_interpolate(a_t, denoise(net, states, a_t, s, t), s, t, sched)
    v = ddim_interpolate(a_r, denoise(net, states, a_r, s, r, params=target), s, r, sched)
    ct = float(np.mean(np.sum((u - v) ** 2, axis=1)))
    cfg = KernelConfig("neg-sq-dist", weight_mode="unit")
    val = mmd2_vstat_grouped(cfg, ParticleGroups.from_flat(u, v, 1, s, r, t), sched)
    err = abs(val - 2 * ct)
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-10 and elapsed < 1
    assert acceptance(5, ok, f"|MMD2 - 2 CT| = {err:.2e} (CT = {ct:.4f}), {elapsed:.3f}s")


def test_criterion_06_q_regularization(acceptance):
    ok, detail = q_effect(2, 0.5)
    assert acceptance(6, ok, detail)


def test_criterion_07_offline_to_online(acceptance):
    improved = []
    details = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        ds = envsets.gen_dataset("pointmass", "medium", 200, seed)
        cfg = config.resolve({
            "env.name": "pointmass", "train.mode": "offline", "train.epochs": 1,
            "train.steps_per_epoch": 50_000, "policy.hidden_dim": 64, "critic.hidden_dim": 64,
            "train.batch_size": 64, "eval.every": 0, "eval.episodes": 50, "train.seed": seed})
        agent, rows = trainer.train(ds, cfg)
        before = rows[-1]["eval_return_mean"]
        agent, rows = trainer.finetune_online(agent, ds, {"online.steps": 50_000, "eval.every": 0})
        assert rows[0]["eval_return_mean"] == before  # same policy, same eval seed
        after = rows[-1]["eval_return_mean"]
        elapsed = time.perf_counter() - t0
        improved.append(after > before and elapsed < 30 * 60)
        details.append(f"seed {seed}: {before:.2f} -> {after:.2f} ({elapsed:.0f}s)")
    ok = sum(improved) >= 4
    assert acceptance(7, ok, "; ".join(details))


def _step_time(n_steps, steps=40):
    ds = envsets.gen_dataset("bandit2d", "mixed", 2000, 0)
    cfg = config.resolve(BANDIT_NET, {"env.name": "bandit2d", "policy.num_steps": n_steps})
    agent = trainer.Agent(cfg, "bandit2d", ds.norm)
    streams = trainer._train_streams(0)
    batches = [envsets.sample_batch(ds, 256, streams["data"]) for _ in range(steps + 3)]
    for b in batches[:3]:
        trainer.train_step(agent, b, streams)
    t0 = time.perf_counter()
    for b in batches[3:]:
        trainer.train_step(agent, b, streams)
    return (time.perf_counter() - t0) / steps


def test_criterion_08_sampling_steps(acceptance):
    grid = (1, 2, 4, 8, 16)
    times = {n: min(_step_time(n) for _ in range(3)) for n in grid}
    nondecreasing = all(times[a] <= times[b] for a, b in zip(grid, grid[1:]))
    linear16 = times[1] + 15 * (times[2] - times[1])
    scale_ok = times[16] <= 1.3 * linear16
    sweep = [q_effect(n, 0.5) for n in (1, 2, 4)]
    ok = nondecreasing and scale_ok and all(s[0] for s in sweep)
    timing = ", ".join(f"N={n}: {1e3 * times[n]:.1f}ms" for n in grid)
    detail = (f"step time {timing}; nondecreasing={nondecreasing}; N=16 {1e3 * times[16]:.1f}ms vs "
              f"1.3x linear {1.3e3 * linear16:.1f}ms; " + " | ".join(s[1] for s in sweep))
    assert acceptance(8, ok, detail)


def test_criterion_09_eta_robustness(acceptance):
    sweep = [q_effect(2, eta) for eta in (0.5, 1.0)]
    ok = all(s[0] for s in sweep)
    assert acceptance(9, ok, " | ".join(s[1] for s in sweep))


def test_criterion_10_reproducibility(acceptance, tmp_path):
    small = ["--policy.hidden_dim", "16", "--critic.hidden_dim", "16", "--train.batch_size", "32",
             "--train.steps_per_epoch", "100", "--eval.every", "50", "--eval.episodes", "5"]
    compared = 0
    data = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.ndjson"
        assert cli.main(["gen-data", "--env", "pointmass", "--behavior", "mixed", "--episodes", "10",
                         "--seed", "3", "--out", str(path)]) == 0
        data.append(path.read_bytes())
    same = data[0] == data[1]
    path = tmp_path / "a.ndjson"  # identical resolved configs need the same data path
    for name in ("a", "b"):
        run = tmp_path / f"run_{name}"
        assert cli.main(["train", "--data", str(path), "--epochs", "2", "--seed", "5",
                         "--out", str(run)] + small) == 0
        ft = tmp_path / f"ft_{name}"
        assert cli.main(["finetune", "--ckpt", str(run / "final"), "--data", str(path),
                         "--online-steps", "60", "--out", str(ft)]) == 0
    for sub in ("run", "ft"):
        a, b = tmp_path / f"{sub}_a", tmp_path / f"{sub}_b"
        same &= _metrics_without_clock(a / "metrics.csv") == _metrics_without_clock(b / "metrics.csv")
        for ckpt in ("final", "latest"):
            for f in sorted((a / ckpt).iterdir()):
                same &= f.read_bytes() == (b / ckpt / f.name).read_bytes()
                compared += 1
    assert acceptance(10, same, f"gen-data, train and finetune twice: {compared} checkpoint files "
                                f"and both metrics.csv files identical={same}")
