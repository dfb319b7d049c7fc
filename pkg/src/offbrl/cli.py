"""Command line entry point: ``offbrl <verb> [options]``.

Verbs: generate-batch, train, evaluate, run, relabel. Experiment options
mirror :class:`offbrl.harness.ExperimentConfig` fields and override values
read from ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .approximator import load_checkpoint, save_checkpoint
from .core import Batch, UsageError
from .harness import (ExperimentConfig, _LIST_KEYS, build_data, emit_reports, evaluate_returns,
                      load_prior, make_env, run_experiment, save_prior, train_cell)
from .rewards import CHANNELS, RewardSpec, relabel_batch

log = logging.getLogger("offbrl")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value experiment file")
    for f in fields(ExperimentConfig):
        if f.name == "reward":
            continue
        flag = "--" + f.name.replace("_", "-")
        help_ = "comma-separated list" if f.name in _LIST_KEYS else None
        p.add_argument(flag, dest=f.name, default=None, help=help_)
    p.add_argument("--reward", action="append", default=[], metavar="CHANNEL=WEIGHT",
                   help=f"reward channel weight, repeatable; channels: {', '.join(CHANNELS)}")


def _config_from(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    lines = [base.dumps()]
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            lines.append(f"{f.name} = {v}")
    reward = _parse_weights(args.reward)
    if reward:
        lines = [ln for ln in "\n".join(lines).splitlines() if not ln.startswith("reward.")]
        lines += [f"reward.{k} = {w!r}" for k, w in reward.items()]
    return ExperimentConfig.loads("\n".join(lines))


def _parse_weights(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"expected CHANNEL=WEIGHT, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def cmd_generate_batch(args) -> int:
    cfg = _config_from(args)
    data = build_data(cfg, int(args.seed))
    data.batch.save(args.out)
    print(f"wrote {len(data.batch)} transitions to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    seed = int(args.seed)
    data = build_data(cfg, seed)
    res = train_cell(cfg, args.variant, seed, data, keep_model=True)
    if res.error:
        print(f"training failed: {res.error}", file=sys.stderr)
        return 1
    save_checkpoint(res.model, args.checkpoint, variant=args.variant, seed=seed)
    if args.prior_out:
        save_prior(data.prior, args.prior_out)
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"variant": args.variant, "seed": seed, "final": last,
                      "returns_sample": res.returns_sample}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config_from(args)
    q = load_checkpoint(args.checkpoint)
    prior = load_prior(args.prior) if args.prior else None
    if args.variant == "dbcq" and prior is None:
        raise UsageError("dbcq evaluation needs --prior")
    env = make_env(cfg)
    from dataclasses import replace
    if hasattr(env, "reward_spec"):
        env = replace(env, reward_spec=RewardSpec(gamma=cfg.gamma))
    out = evaluate_returns(env, args.variant, q, prior, cfg.algo(args.variant, int(args.seed)),
                           cfg.eval_episodes, args.mode, int(args.seed))
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    cfg = _config_from(args)
    report = run_experiment(cfg)
    paths = emit_reports(report, cfg.output_dir)
    failed = [k for k, c in report.cells.items() if c.error]
    for p in paths:
        print(p)
    if failed:
        print(f"{len(failed)} cell(s) failed: {sorted(failed)}", file=sys.stderr)
    return 1 if failed else 0


def cmd_relabel(args) -> int:
    weights = _parse_weights(args.reward)
    if args.channel:
        weights[args.channel] = 1.0
    spec = RewardSpec(weights=weights, gamma=args.gamma) if weights else RewardSpec(gamma=args.gamma)
    batch = relabel_batch(Batch.load(args.batch), spec)
    batch.save(args.out)
    print(f"relabelled {len(batch)} transitions with {sorted(spec.weights)} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offbrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate-batch", help="roll out behaviour policies into a batch file")
    _add_config_flags(g)
    g.add_argument("--seed", default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_batch)

    t = sub.add_parser("train", help="train one variant and save a checkpoint")
    _add_config_flags(t)
    t.add_argument("--variant", required=True)
    t.add_argument("--seed", default=0)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--prior-out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="mean episode return per channel of a checkpoint")
    _add_config_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--prior")
    e.add_argument("--variant", required=True)
    e.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    e.add_argument("--seed", default=0)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("run", help="train and evaluate every (variant, seed) cell, write CSV reports")
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)

    rl = sub.add_parser("relabel", help="recompute dialog rewards in a stored batch")
    rl.add_argument("--batch", required=True)
    rl.add_argument("--out", required=True)
    rl.add_argument("--channel", choices=CHANNELS)
    rl.add_argument("--reward", action="append", default=[], metavar="CHANNEL=WEIGHT")
    rl.add_argument("--gamma", type=float, default=0.5)
    rl.set_defaults(func=cmd_relabel)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
