"""Command line entry point: ``semaigc {train,eval,oracle,schedule}``.

Failures print one JSON object ``{"error": ..., "message": ...}`` on stderr and exit
nonzero (2 for bad usage, 1 for everything else).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agent import QNetwork, export_policy_table, export_reward_trace
from .harness import FRAMEWORKS, ExperimentConfig, Simulator, load_config, run_experiment, train_agent, write_manifest
from .oracles import run_all
from .schedules import build_channel_aware_schedule, dump_schedule_json


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _frameworks(text):
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [n for n in names if n not in FRAMEWORKS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"frameworks must be a comma list drawn from {','.join(FRAMEWORKS)}")
    return names


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a u64")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semaigc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, episodes=True):
        sp.add_argument("--config", type=Path, help="JSON or TOML experiment config")
        sp.add_argument("--seed", type=_seed)
        sp.add_argument("--out", type=Path, default=Path("out"))
        if episodes:
            sp.add_argument("--episodes", type=int)
        return sp

    common(sub.add_parser("train", help="train the split-selection agent"))
    ev = common(sub.add_parser("eval", help="framework comparison sweeps"))
    ev.add_argument("--frameworks", type=_frameworks)
    ev.add_argument("--weights", type=Path, help="reuse saved agent weights instead of training")
    common(sub.add_parser("oracle", help="run the reference oracle suites"), episodes=False)
    sc = common(sub.add_parser("schedule", help="dump noise schedules as JSON"), episodes=False)
    sc.add_argument("--sigma-c", type=float, default=None, help="also dump a channel-aware schedule")
    sc.add_argument("--t-bar", type=int, default=None)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "frameworks", None):
        cfg = replace(cfg, frameworks=args.frameworks)
    return cfg


def cmd_train(args) -> dict:
    cfg = _config(args)
    if args.episodes is not None and args.episodes < 0:
        raise UsageError("--episodes must be >= 0")
    sim = Simulator(cfg)
    result = train_agent(sim, args.episodes)
    export_reward_trace(args.out / "reward_trace.csv", result.rewards)
    result.net.save(args.out / "agent_weights.json")
    grid = [sim.sample_environment(np.random.default_rng([cfg.seed, 9, i])) for i in range(50)]
    export_policy_table(args.out / "policy_table.csv", np.array([sim.observe(e) for e in grid]),
                        np.array([e.state.raw() for e in grid]), result.net, cfg.T_hat)
    n = len(result.rewards)
    summary = {"episodes": n, "final_mean_reward": float(np.mean(result.rewards[-50:])) if n else None}
    write_manifest(args.out, cfg, "train", {"summary": summary})
    return summary


def cmd_eval(args) -> dict:
    cfg = _config(args)
    if args.episodes is not None and args.episodes < 0:
        raise UsageError("--episodes must be >= 0")
    net = QNetwork.load(args.weights) if args.weights else None
    res = run_experiment(cfg, args.out, net=net, episodes=args.episodes)
    return {"records": len(res["records"]), "aggregates": len(res["aggregates"])}


def cmd_oracle(args) -> dict:
    cfg = _config(args)
    results = run_all(seed=cfg.seed)
    report = [r.__dict__ for r in results]
    with open(args.out / "oracle_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    write_manifest(args.out, cfg, "oracle")
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise OracleFailure(f"oracle checks failed: {', '.join(failed)}")
    return {"passed": len(results)}


class OracleFailure(Exception):
    pass


def cmd_schedule(args) -> dict:
    cfg = _config(args)
    sim = Simulator(cfg)
    dump_schedule_json(sim.schedule, args.out / "schedule.json")
    written = ["schedule.json"]
    if args.sigma_c is not None:
        t_bar = cfg.T_hat if args.t_bar is None else args.t_bar
        cas = build_channel_aware_schedule(sim.schedule, args.sigma_c, t_bar, cfg.gamma_ratio)
        dump_schedule_json(cas, args.out / "channel_aware_schedule.json")
        written.append("channel_aware_schedule.json")
    write_manifest(args.out, cfg, "schedule")
    return {"written": written}


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle, "schedule": cmd_schedule}


def _fail(kind, exc, code):
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    try:
        os.makedirs(args.out, exist_ok=True)
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except OracleFailure as exc:
        return _fail("oracle_failed", exc, 1)
    except Exception as exc:  # surfaced as a machine-readable error
        return _fail(type(exc).__name__, exc, 1)
    print(json.dumps({"command": args.command, "out": str(args.out), **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
