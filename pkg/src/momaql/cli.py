"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``finetune``, ``eval`` and ``sample``.
Any config key can be overridden with ``--section.key value``; a JSON file of
dotted keys can be given with ``--config``. Exit codes: 0 success, 2 config or
usage error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import envsets, trainer
from . import rng as rngs
from .errors import (ConfigError, DataFormatError, DimensionError, DomainError, TrainingDivergence,
                     UsageError)

logger = logging.getLogger("momaql")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# shorthand flag -> dotted config key
ALIASES = {
    "mode": "train.mode",
    "epochs": "train.epochs",
    "seed": "train.seed",
    "eta": "train.eta",
    "data": "data.path",
    "env": "env.name",
    "online_steps": "online.steps",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="momaql", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="roll out a scripted behaviour into a dataset file")
    g.add_argument("--env", required=True)
    g.add_argument("--behavior", required=True, choices=envsets.BEHAVIORS)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="offline training (bc or offline mode)")
    t.add_argument("--config")
    t.add_argument("--mode", choices=("bc", "offline"))
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--eta", type=float)
    t.add_argument("--out", required=True)

    f = sub.add_parser("finetune", help="online fine-tuning from a checkpoint")
    f.add_argument("--config")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--env")
    f.add_argument("--data")
    f.add_argument("--online-steps", dest="online_steps", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--n", type=int, help="sampling steps (default: checkpoint config)")
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="draw one action for a state")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--state", required=True, help="comma-separated raw state")
    s.add_argument("--n", type=int, help="sampling steps (default: checkpoint config)")
    s.add_argument("--seed", type=int, default=0)
    return p


def _split_overrides(argv):
    """Pull ``--section.key value`` pairs out of ``argv``."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and "." in arg.split("=", 1)[0]:
            key, eq, val = arg[2:].partition("=")
            if not eq:
                if i + 1 >= len(argv):
                    raise UsageError(f"flag --{key} needs a value")
                val = argv[i + 1]
                i += 1
            if key not in cfgmod.DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            overrides[key] = val
        else:
            rest.append(arg)
        i += 1
    return rest, overrides


def _resolve(args, overrides, base=None):
    layers = [base or {}]
    if getattr(args, "config", None):
        layers.append(cfgmod.load_file(args.config))
    shorthand = {}
    for name, key in ALIASES.items():
        val = getattr(args, name, None)
        if val is not None:
            shorthand[key] = val
    layers += [shorthand, overrides]
    return cfgmod.resolve(*layers)


def _write_resolved(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dumps(cfg))


def cmd_gen_data(args, overrides):
    if overrides:
        raise UsageError("gen-data takes no config overrides")
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    envsets.make_env(args.env)
    ds = envsets.gen_dataset(args.env, args.behavior, args.episodes, args.seed)
    envsets.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} transitions to {args.out}")


def cmd_train(args, overrides):
    cfg = _resolve(args, overrides)
    if cfg["train.mode"] == "online-finetune":
        raise ConfigError("use the finetune command for online fine-tuning")
    if cfg["train.mode"] == "bc" and cfg["train.eta"] != 0.0:
        logger.warning("bc mode ignores train.eta=%g; using 0", cfg["train.eta"])
        cfg = cfgmod.resolve(cfg, {"train.eta": 0.0})
    if not cfg["data.path"]:
        raise ConfigError("no dataset given (--data or --data.path)")
    ds = envsets.load_dataset(cfg["data.path"])
    if not cfg["env.name"]:
        cfg = cfgmod.resolve(cfg, {"env.name": ds.env})
    _write_resolved(cfg, args.out)
    trainer.train(ds, cfg, args.out, log_every=1000 if args.verbose else 0)
    print(f"run written to {args.out}")


def cmd_finetune(args, overrides):
    agent = trainer.load_checkpoint(args.ckpt)
    cfg = _resolve(args, overrides, base=agent.cfg)
    cfg = cfgmod.resolve(cfg, {"train.mode": "online-finetune"})
    if cfg["env.name"] and cfg["env.name"] != agent.env_name:
        raise DimensionError(f"checkpoint was trained on {agent.env_name}, not {cfg['env.name']}")
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "finetune")
    _write_resolved(cfg, out)
    ds = envsets.load_dataset(cfg["data.path"]) if cfg["data.path"] else None
    agent, rows = trainer.finetune_online(agent, ds, cfg, out, log_every=1000 if args.verbose else 0)
    print(f"fine-tuned to step {agent.step}; run written to {out}")


def cmd_eval(args, overrides):
    if overrides:
        raise UsageError("eval takes no config overrides")
    res = trainer.evaluate_policy(args.ckpt, args.env, args.episodes, args.n, args.seed)
    print("eval_return_mean,eval_return_std,norm_score")
    print(f"{res['eval_return_mean']!r},{res['eval_return_std']!r},{res['norm_score']!r}")


def cmd_sample(args, overrides):
    if overrides:
        raise UsageError("sample takes no config overrides")
    agent = trainer.load_checkpoint(args.ckpt)
    try:
        state = np.array([float(x) for x in args.state.split(",")], dtype=np.float64)
    except ValueError:
        raise UsageError(f"cannot parse state {args.state!r}") from None
    if state.shape != (agent.env.state_dim,):
        raise DimensionError(f"state needs {agent.env.state_dim} values, got {state.size}")
    action = agent.act(state.reshape(1, -1), rngs.stream(args.seed, "eval"), args.n)[0]
    print(",".join(repr(float(a)) for a in action))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sample": cmd_sample,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rest, overrides = _split_overrides(argv)
        args = _build_parser().parse_args(rest)
        if args.command is None:
            raise UsageError("a subcommand is required")
        COMMANDS[args.command](args, overrides)
    except (UsageError, ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
