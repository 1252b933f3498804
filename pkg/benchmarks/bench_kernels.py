"""Numba vs numpy timings for the hot kernels and for one full training step.

Kernel twins are timed side by side in this process. The training-step row
runs a subprocess per backend because ``MOMAQL_NUMBA`` is read at import.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from momaql import _kernels as K

STEP_SNIPPET = """
import time
from momaql import _accel, config, envsets, trainer
ds = envsets.gen_dataset("bandit2d", "mixed", 2000, 0)
cfg = config.resolve({"env.name": "bandit2d", "policy.hidden_dim": 64, "critic.hidden_dim": 64})
agent = trainer.Agent(cfg, "bandit2d", ds.norm)
streams = trainer._train_streams(0)
for _ in range(3):
    trainer.train_step(agent, envsets.sample_batch(ds, 256, streams["data"]), streams)
t = time.perf_counter()
for _ in range(%d):
    trainer.train_step(agent, envsets.sample_batch(ds, 256, streams["data"]), streams)
print(_accel.USE_NUMBA, (time.perf_counter() - t) / %d)
"""


def _best(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    sig = np.array([1.2])
    u = rng.normal(size=(64, 4, 2))
    v = rng.normal(size=(64, 4, 2))
    w = np.ones(64)
    x = rng.normal(size=(4096, 2))
    y = rng.normal(size=(4096, 2)) + [1.0, 0.0]
    z = rng.normal(size=(256, 64))
    g = rng.normal(size=(256, 64))
    _, s = K.silu_sig_numpy(z)
    cases = [
        ("grouped_vstat 64x4x2", lambda: K.grouped_vstat_numba(u, v, w, K.RBF, sig),
         lambda: K.grouped_vstat_numpy(u, v, w, K.RBF, sig)),
        ("pair_sum 4096x4096", lambda: K.pair_sum_numba(x, y, K.RBF, sig, False),
         lambda: K.pair_sum_numpy(x, y, K.RBF, sig, False)),
        ("silu_sig 256x64", lambda: K.silu_sig_numba(z), lambda: K.silu_sig_numpy(z)),
        ("silu_grad 256x64", lambda: K.silu_grad_numba(z, s, g), lambda: K.silu_grad_numpy(z, s, g)),
    ]
    for name, nb, npy in cases:
        yield name, _best(nb, repeat), _best(npy, max(3, repeat // 4 if "pair" in name else repeat))


def step_time(flag, steps):
    env = dict(os.environ, MOMAQL_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET % (steps, steps)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0] == "True", float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=50)
    args = ap.parse_args()
    print(f"{'kernel':<24}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, t_nb, t_np in kernel_rows(args.repeat):
        print(f"{name:<24}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>10.2f}")
    used_nb, t_nb = step_time("1", args.steps)
    used_np, t_np = step_time("0", args.steps)
    assert used_nb == K._accel.HAVE_NUMBA and not used_np
    print(f"{'train_step B=256 h=64':<24}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
