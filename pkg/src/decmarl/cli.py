"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 a requested
``--assert`` check failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .consensus import CommGraph, ConsensusTimeout, DisconnectedGraphError, build_kernel, run_to_consensus
from .continuous import ContinuousConfig, make_agents, train_continuous
from .envs import SpreadConfig
from .mdp import generate_random_mdp
from .tabular import ConfigError, TabularConfig, train_tabular, uniform_policy_return

EXIT_OK, EXIT_USAGE, EXIT_ASSERT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, out_help="output directory"):
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
    p.add_argument("--out", help=out_help)
    p.add_argument("--assert", dest="check", action="store_true", help="exit 2 if acceptance checks fail")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decmarl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-tabular", help="decentralized tabular actor-critic on a random MDP")
    _common(p, "CSV path (or directory with --config)")
    p.add_argument("--mdp-seed", type=int, default=0)
    p.add_argument("--states", type=int, default=20)
    p.add_argument("--agents", type=int, default=4)
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--omega", type=float, default=0.7)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--episode-length", type=int, default=100)
    p.add_argument("--sequential", action="store_true", help="only agent t mod N improves at tick t")
    p.add_argument("--oracle-every", type=int, default=0, help="episodes between exact Q-residual checks")

    p = sub.add_parser("train-continuous", help="decentralized off-policy actor-critic on spread")
    _common(p, "CSV path (or directory with --config)")
    p.add_argument("--env", default="spread", choices=["spread"])
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--graph", default="ring")
    p.add_argument("--steps", type=int, default=200_000)
    p.add_argument("--replay-capacity", type=int, default=10_000)
    p.add_argument("--lazy-refresh", action="store_true", help="refresh only sampled entries (deviation)")
    p.add_argument("--consensus-rounds", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--critic-lr", type=float, default=1e-3)
    p.add_argument("--actor-lr", type=float, default=1e-4)
    p.add_argument("--target-rate", type=float, default=0.005)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--hidden", default="64,64")
    p.add_argument("--episode-length", type=int, default=25)
    p.add_argument("--collision-radius", type=float, default=0.15)
    p.add_argument("--checkpoint-dir", help="write per-agent actor/critic/replay checkpoints here")

    p = sub.add_parser("consensus-demo", help="average consensus on a graph")
    p.add_argument("--graph", default="ring:4", help="ring:N, complete:N, path:N or an edge-list file")
    p.add_argument("--x0", default="1,2,3,4")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--out", help="write summary.json into this directory")
    p.add_argument("--assert", dest="check", action="store_true")

    for name in ("verify-theorem1", "verify-theorem2", "compare"):
        _common(sub.add_parser(name, help=f"{name} experiment"))
    return parser


def _experiment_config(args, kind) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    cfg = replace(cfg, kind=kind)
    if args.seed:
        cfg = replace(cfg, seeds=list(args.seed))
    if args.out:
        cfg = replace(cfg, out=args.out)
    cfg.validate()
    return cfg


def _report(summary: dict, check: bool) -> int:
    print(json.dumps(summary.get("checks", {}), indent=2))
    if check and not all(summary.get("checks", {}).values()):
        return EXIT_ASSERT
    return EXIT_OK


def _train_tabular(args) -> int:
    if args.config:
        return _report(harness.run_experiment(_experiment_config(args, "tabular")), args.check)
    seed = args.seed[0] if args.seed else 0
    mdp = generate_random_mdp(args.mdp_seed, args.states, [args.actions] * args.agents, gamma=args.gamma)
    cfg = TabularConfig(steps=args.steps, omega=args.omega, beta=args.beta, clip=args.clip,
                        episode_length=args.episode_length, sequential=args.sequential,
                        oracle_every=args.oracle_every, seed=seed)
    log = train_tabular(mdp, cfg)
    out = Path(args.out or "curve.csv")
    harness.write_tabular_csv(out, log, mdp.num_agents)
    rand = uniform_policy_return(mdp, cfg.episode_length)
    final = log.final_fraction_mean()
    print(f"final-10% mean return {final:.4f}; uniform-random policy {rand:.4f}; curve -> {out}")
    return EXIT_ASSERT if args.check and not final > rand else EXIT_OK


def _train_continuous(args) -> int:
    if args.config:
        return _report(harness.run_experiment(_experiment_config(args, "continuous")), args.check)
    seed = args.seed[0] if args.seed else 0
    env = SpreadConfig(episode_length=args.episode_length, collision_radius=args.collision_radius)
    cfg = ContinuousConfig(steps=args.steps, replay_capacity=args.replay_capacity, lazy_refresh=args.lazy_refresh,
                           consensus_rounds=args.consensus_rounds, batch_size=args.batch_size,
                           critic_lr=args.critic_lr, actor_lr=args.actor_lr, target_rate=args.target_rate,
                           momentum=args.momentum, hidden=tuple(int(h) for h in args.hidden.split(",")),
                           seed=seed, env=env)
    cfg.validate()
    graph = CommGraph.parse(args.graph if ":" in args.graph else f"{args.graph}:{args.agents}")
    agents = make_agents(args.agents, cfg)
    log = train_continuous(agents, build_kernel(graph), cfg)
    out = Path(args.out or "curve.csv")
    harness.write_continuous_csv(out, log)
    if args.checkpoint_dir:
        ck = Path(args.checkpoint_dir)
        ck.mkdir(parents=True, exist_ok=True)
        for ag in agents:
            ag.actor.trunk.save(ck / f"agent{ag.agent_id}_actor")
            ag.critic.save(ck / f"agent{ag.agent_id}_critic")
            ag.target_critic.save(ck / f"agent{ag.agent_id}_target_critic")
            ag.buffer.save(ck / f"agent{ag.agent_id}_replay")
    k = min(100, len(log.returns) // 2)
    first, last = float(np.mean(log.returns[:k])), float(np.mean(log.returns[-k:]))
    print(f"episodes {len(log.returns)}; first-{k} mean return {first:.4f}; last-{k} {last:.4f}; curve -> {out}")
    return EXIT_ASSERT if args.check and not last > first else EXIT_OK


def _consensus_demo(args) -> int:
    graph = CommGraph.parse(args.graph)
    x0 = np.array([float(v) for v in args.x0.split(",")])
    if len(x0) != graph.num_nodes:
        raise UsageError(f"--x0 has {len(x0)} values but the graph has {graph.num_nodes} nodes")
    kernel = build_kernel(graph)
    try:
        x, iters = run_to_consensus(kernel, x0, args.tol, args.max_iters)
        ok = True
    except ConsensusTimeout as exc:
        x, iters, ok = exc.x, exc.iters, False
    summary = {"limit": float(x0.mean()), "final": x.tolist(), "iterations": iters, "degree": kernel.degree,
               "checks": {"converged": ok}}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2))
    status = "converged" if ok else "TIMEOUT"
    print(f"{status}: limit {summary['limit']} after {iters} iterations; final {np.round(x, 12).tolist()}")
    return EXIT_ASSERT if args.check and not ok else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train-tabular":
            return _train_tabular(args)
        if args.command == "train-continuous":
            return _train_continuous(args)
        if args.command == "consensus-demo":
            return _consensus_demo(args)
        return _report(harness.run_experiment(_experiment_config(args, args.command)), args.check)
    except (UsageError, harness.ConfigError, ConfigError, DisconnectedGraphError, ValueError, OSError) as exc:
        print(f"decmarl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
