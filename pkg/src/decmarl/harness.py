"""Experiment orchestration: configs, per-seed runs, CSV curves and JSON summaries.

Config files are TOML. Top-level keys: ``kind`` (tabular | continuous |
consensus-demo | verify-theorem1 | verify-theorem2 | compare), ``seeds``,
``out``. Per-kind tables: ``[mdp]``, ``[tabular]``, ``[qlearning]``,
``[continuous]`` (with ``[continuous.env]``), ``[consensus]``, ``[theorem1]``,
``[theorem2]``, ``[compare]``. Unknown keys are rejected.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from .consensus import CommGraph, ConsensusTimeout, build_kernel, run_to_consensus
from .continuous import ContinuousConfig, make_agents, train_continuous
from .envs import SpreadConfig
from .mdp import JointPolicy, exact_local_q, generate_random_mdp
from .tabular import (QLearningConfig, TabularConfig, alternating_improvement, joint_q_learning_baseline,
                      train_centralized_ac, train_tabular, uniform_policy_return)

KINDS = ("tabular", "continuous", "consensus-demo", "verify-theorem1", "verify-theorem2", "compare")
METHODS = ("decentralized-ac", "centralized-ac", "joint-q-learning", "random")


class ConfigError(ValueError):
    pass


@dataclass
class MdpSpec:
    states: int = 20
    agents: int = 4
    actions: int = 3
    gamma: float = 0.9
    seed: int = 0  # instance seed for run seed k is seed + k


@dataclass
class ConsensusSpec:
    graph: str = "ring:4"
    x0: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    tol: float = 1e-8
    max_iters: int = 10_000


@dataclass
class Theorem1Spec:
    states: int = 5
    agents: int = 2
    actions: int = 2
    gamma: float = 0.9
    steps: int = 200_000
    omega: float = 0.7
    tol: float = 0.05


@dataclass
class Theorem2Spec:
    instances: int = 20
    states: int = 4
    agents: int = 2
    actions: int = 2
    gamma: float = 0.9
    max_rounds: int = 100
    tol: float = 1e-10


@dataclass
class CompareSpec:
    methods: list = field(default_factory=lambda: ["decentralized-ac", "joint-q-learning", "random"])
    min_wins: int = 3  # decentralized AC must beat each learning baseline's AUC on this many seeds


@dataclass
class ExperimentConfig:
    kind: str = "tabular"
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    graph: str = "ring"
    n_agents: int = 3  # continuous only
    mdp: MdpSpec = field(default_factory=MdpSpec)
    tabular: TabularConfig = field(default_factory=TabularConfig)
    qlearning: QLearningConfig = field(default_factory=QLearningConfig)
    continuous: ContinuousConfig = field(default_factory=ContinuousConfig)
    consensus: ConsensusSpec = field(default_factory=ConsensusSpec)
    theorem1: Theorem1Spec = field(default_factory=Theorem1Spec)
    theorem2: Theorem2Spec = field(default_factory=Theorem2Spec)
    compare: CompareSpec = field(default_factory=CompareSpec)
    workers: int = 1

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        try:
            self.tabular.validate()
            self.continuous.validate()
            QLearningConfig(**asdict(self.qlearning))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for m in self.compare.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.kind == "compare" and len(self.compare.methods) < 2:
            raise ConfigError("compare needs at least two methods")
        if self.tabular.steps != self.qlearning.steps and self.kind == "compare" \
                and "joint-q-learning" in self.compare.methods:
            raise ConfigError("compare requires equal step budgets (tabular.steps != qlearning.steps)")
        if self.mdp.states < 1 or self.mdp.agents < 1 or self.mdp.actions < 1:
            raise ConfigError("mdp dimensions must be positive")
        self.graph_for(self.mdp.agents if self.kind != "continuous" else self.n_agents)

    def graph_for(self, n: int) -> CommGraph:
        spec = self.graph if ":" in self.graph or Path(self.graph).exists() else f"{self.graph}:{n}"
        try:
            g = CommGraph.parse(spec)
        except (ValueError, OSError) as exc:
            raise ConfigError(f"bad graph {self.graph!r}: {exc}") from exc
        if g.num_nodes != n:
            raise ConfigError(f"graph has {g.num_nodes} nodes but there are {n} agents")
        if not g.is_connected():
            raise ConfigError(f"graph is disconnected: {g.components()}")
        return g


def _merge(obj, table: dict, where: str):
    names = {f.name: f for f in fields(obj)}
    updates = {}
    for key, val in table.items():
        key_ = key.replace("-", "_")
        if key_ not in names:
            raise ConfigError(f"unknown key {where}{key!r}")
        cur = getattr(obj, key_)
        if hasattr(cur, "__dataclass_fields__") and isinstance(val, dict):
            val = _merge(cur, val, f"{where}{key}.")
        elif isinstance(cur, tuple) and isinstance(val, list):
            val = tuple(val)
        updates[key_] = val
    return replace(obj, **updates)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _merge(ExperimentConfig(), data, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    return config_from_dict(data)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_tabular_csv(path, log, n_agents: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_return"] + [f"q_residual_{i}" for i in range(n_agents)])
        for step, ret, res in log.rows():
            w.writerow([step, _fmt(ret)] + [_fmt(x) for x in (res or [None] * n_agents)])


def write_continuous_csv(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "mean_return", "critic_loss", "mean_abs_c", "final_distance"])
        for row in log.rows():
            w.writerow([_fmt(v) for v in row])


def read_curve(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {"mean_return": [float(r["mean_return"]) for r in rows],
            "rows": rows}


def final_fraction(returns, frac: float = 0.1) -> float:
    k = max(1, int(round(len(returns) * frac)))
    return float(np.mean(returns[-k:]))


def steps_to_threshold(returns, threshold, episode_steps: int, window: int = 10):
    if threshold is None:
        return None
    r = np.asarray(returns, float)
    for k in range(window, len(r) + 1):
        if r[k - window:k].mean() >= threshold:
            return k * episode_steps
    return None


def summarize_curves(curves: dict, episode_steps: int, threshold=None) -> dict:
    """curves: {seed: list of episode returns}. Pure function of the CSV contents."""
    finals = [final_fraction(c) for c in curves.values()]
    return {
        "seeds": list(curves),
        "final_return_mean": float(np.mean(finals)),
        "final_return_std": float(np.std(finals)),
        "final_return_per_seed": finals,
        "auc_per_seed": [float(np.sum(c)) for c in curves.values()],
        "steps_to_threshold": [steps_to_threshold(c, threshold, episode_steps) for c in curves.values()],
        "threshold": threshold,
    }


def _tabular_run(args):
    cfg, seed, method = args
    mdp = generate_random_mdp(cfg.mdp.seed + seed, cfg.mdp.states, [cfg.mdp.actions] * cfg.mdp.agents,
                              gamma=cfg.mdp.gamma)
    if method == "decentralized-ac":
        log = train_tabular(mdp, replace(cfg.tabular, seed=seed))
    elif method == "centralized-ac":
        log = train_centralized_ac(mdp, replace(cfg.tabular, seed=seed))
    elif method == "joint-q-learning":
        log = joint_q_learning_baseline(mdp, replace(cfg.qlearning, seed=seed))
    else:
        raise ValueError(method)
    return seed, method, log.episode_end_steps, log.returns, log.q_residuals, \
        uniform_policy_return(mdp, cfg.tabular.episode_length), mdp.num_agents if method == "decentralized-ac" else 1


def _map(fn, jobs, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


class _Log:
    def __init__(self, steps, returns, residuals):
        self.episode_end_steps, self.returns, self.q_residuals = steps, returns, residuals

    def rows(self):
        for i, (t, r) in enumerate(zip(self.episode_end_steps, self.returns)):
            yield t, r, self.q_residuals[i] if i < len(self.q_residuals) else None


def run_tabular_methods(cfg: ExperimentConfig, methods, out: Path) -> dict:
    learning = [m for m in methods if m != "random"]
    jobs = [(cfg, seed, m) for m in learning for seed in cfg.seeds]
    results = _map(_tabular_run, jobs, cfg.workers)
    random_ret = {}
    files = {m: {} for m in learning}
    for seed, method, steps, returns, residuals, rand, n_tab in results:
        path = out / f"{method}_seed{seed}.csv"
        write_tabular_csv(path, _Log(steps, returns, residuals), n_tab)
        files[method][seed] = path
        random_ret[seed] = rand
    return files, random_ret


def _summaries_from_files(files, episode_steps, threshold):
    out = {}
    for method, per_seed in files.items():
        curves = {seed: read_curve(p)["mean_return"] for seed, p in per_seed.items()}
        out[method] = summarize_curves(curves, episode_steps, threshold)
        out[method]["files"] = {str(s): str(p) for s, p in per_seed.items()}
    return out


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run ``cfg`` writing per-seed CSVs and ``summary.json`` under ``cfg.out``.

    Returns the summary dict; ``summary["checks"]`` maps check name to bool.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = {
        "tabular": _run_tabular,
        "compare": compare_baselines,
        "continuous": _run_continuous,
        "consensus-demo": _run_consensus_demo,
        "verify-theorem1": _run_theorem1,
        "verify-theorem2": _run_theorem2,
    }[cfg.kind]
    summary = handler(cfg, out)
    summary["kind"] = cfg.kind
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _run_tabular(cfg: ExperimentConfig, out: Path) -> dict:
    files, random_ret = run_tabular_methods(cfg, ["decentralized-ac"], out)
    summ = _summaries_from_files(files, cfg.tabular.episode_length, None)
    dec = summ["decentralized-ac"]
    rand = [random_ret[s] for s in cfg.seeds]
    beats = [f > r for f, r in zip(dec["final_return_per_seed"], rand)]
    return {"methods": summ, "random_return_per_seed": rand,
            "checks": {"beats_uniform_random_all_seeds": all(beats)}}


def compare_baselines(cfg: ExperimentConfig, out: Path) -> dict:
    """Paired comparison on identical instances: per-method final return and AUC."""
    methods = list(cfg.compare.methods)
    files, random_ret = run_tabular_methods(cfg, methods, out)
    rand = [random_ret[s] for s in cfg.seeds]
    summ = _summaries_from_files(files, cfg.tabular.episode_length, None)
    n_episodes = cfg.tabular.steps // cfg.tabular.episode_length
    table = {m: {"final_return_mean": s["final_return_mean"], "auc_mean": float(np.mean(s["auc_per_seed"]))}
             for m, s in summ.items()}
    if "random" in methods:
        table["random"] = {"final_return_mean": float(np.mean(rand)), "auc_mean": float(np.mean(rand)) * n_episodes}
    checks = {}
    if "decentralized-ac" in summ:
        dec = summ["decentralized-ac"]
        for m in summ:
            if m == "decentralized-ac":
                continue
            wins = sum(a > b for a, b in zip(dec["auc_per_seed"], summ[m]["auc_per_seed"]))
            table[m]["decentralized_auc_wins"] = wins
            checks[f"auc_beats_{m}"] = wins >= cfg.compare.min_wins
        if "random" in methods:
            for m, s in summ.items():
                checks[f"{m}_beats_random"] = all(f > r for f, r in zip(s["final_return_per_seed"], rand))
    ranking = sorted(table, key=lambda m: -table[m]["auc_mean"])
    return {"methods": summ, "table": table, "ranking_by_auc": ranking, "random_return_per_seed": rand,
            "checks": checks}


def _continuous_run(args):
    cfg, seed = args
    ccfg = replace(cfg.continuous, seed=seed)
    kernel = build_kernel(cfg.graph_for(cfg.n_agents))
    trained = train_continuous(make_agents(cfg.n_agents, ccfg), kernel, ccfg)
    n_eval = min(len(trained.returns), 100)
    frozen = train_continuous(make_agents(cfg.n_agents, ccfg), kernel,
                              replace(ccfg, steps=n_eval * ccfg.env.episode_length), learn=False)
    return seed, trained, frozen


def _run_continuous(cfg: ExperimentConfig, out: Path) -> dict:
    results = _map(_continuous_run, [(cfg, s) for s in cfg.seeds], cfg.workers)
    per_seed, curves = {}, {}
    for seed, log, frozen in results:
        path = out / f"continuous_seed{seed}.csv"
        write_continuous_csv(path, log)
        rows = read_curve(path)["rows"]
        ret = [float(r["mean_return"]) for r in rows]
        dist = [float(r["final_distance"]) for r in rows]
        curves[seed] = ret
        k = min(100, len(ret) // 2)
        per_seed[str(seed)] = {
            "first_100_mean_return": float(np.mean(ret[:k])),
            "final_100_mean_return": float(np.mean(ret[-k:])),
            "final_100_mean_distance": float(np.mean(dist[-k:])),
            "frozen_initial_mean_distance": float(np.mean(frozen.final_distances)),
        }
    improved = [p["final_100_mean_return"] > p["first_100_mean_return"] for p in per_seed.values()]
    closer = [p["final_100_mean_distance"] < p["frozen_initial_mean_distance"] for p in per_seed.values()]
    need = math.ceil(2 * len(per_seed) / 3)
    summ = summarize_curves(curves, cfg.continuous.env.episode_length)
    return {"per_seed": per_seed, "curve_summary": summ,
            "checks": {"return_improves": sum(improved) >= need,
                       "distance_below_frozen": sum(i and c for i, c in zip(improved, closer)) >= need}}


def _run_consensus_demo(cfg: ExperimentConfig, out: Path) -> dict:
    spec = cfg.consensus
    g = CommGraph.parse(spec.graph)
    kernel = build_kernel(g)
    x0 = np.asarray(spec.x0, float)
    if len(x0) != g.num_nodes:
        raise ConfigError(f"x0 has {len(x0)} values for {g.num_nodes} nodes")
    try:
        x, iters = run_to_consensus(kernel, x0, spec.tol, spec.max_iters)
        ok = True
    except ConsensusTimeout as exc:
        x, iters, ok = exc.x, exc.iters, False
    return {"limit": float(x0.mean()), "final": x.tolist(), "iterations": iters,
            "weights": kernel.weights.tolist(), "degree": kernel.degree, "checks": {"converged": ok}}


def verify_theorem1(spec: Theorem1Spec, seed: int) -> dict:
    """Frozen random policies: local Q-tables vs the linear-solve oracle."""
    mdp = generate_random_mdp(seed, spec.states, [spec.actions] * spec.agents, gamma=spec.gamma)
    policy = JointPolicy.random(mdp, np.random.default_rng([seed, 1]))
    tab = TabularConfig(steps=spec.steps, omega=spec.omega, freeze_actor=True, init_policies=policy.per_agent,
                        clip=50.0, seed=seed, episode_length=spec.steps)
    log = train_tabular(mdp, tab)
    errs = [float(np.abs(ag.q - exact_local_q(mdp, policy, i)).max()) for i, ag in enumerate(log.agents)]
    return {"seed": seed, "max_abs_error_per_agent": errs, "max_abs_error": max(errs), "passed": max(errs) < spec.tol}


def _run_theorem1(cfg: ExperimentConfig, out: Path) -> dict:
    runs = [verify_theorem1(cfg.theorem1, s) for s in cfg.seeds]
    return {"runs": runs, "tol": cfg.theorem1.tol, "checks": {"converged": all(r["passed"] for r in runs)}}


def verify_theorem2(spec: Theorem2Spec, seed: int) -> dict:
    """Alternating exact improvements: monotone V and termination."""
    runs = []
    for k in range(spec.instances):
        mdp = generate_random_mdp(seed * 1000 + k, spec.states, [spec.actions] * spec.agents, gamma=spec.gamma)
        pol = JointPolicy.random(mdp, np.random.default_rng([seed, k]))
        _, values, rounds = alternating_improvement(mdp, pol, spec.max_rounds)
        drops = [float((values[j] - values[j + 1]).max()) for j in range(len(values) - 1)]
        runs.append({"instance": k, "rounds": rounds, "max_drop": max(drops, default=0.0),
                     "monotone": all(d <= spec.tol for d in drops), "converged": rounds > 0})
    return {"seed": seed, "instances": runs,
            "monotone": all(r["monotone"] for r in runs), "converged": all(r["converged"] for r in runs),
            "rounds_to_convergence": [r["rounds"] for r in runs]}


def _run_theorem2(cfg: ExperimentConfig, out: Path) -> dict:
    runs = [verify_theorem2(cfg.theorem2, s) for s in cfg.seeds]
    return {"runs": runs, "checks": {"monotone": all(r["monotone"] for r in runs),
                                     "converged": all(r["converged"] for r in runs)}}
