"""Tabular decentralized actor-critic on finite multi-agent MDPs.

Each agent keeps a local Q-table over (state, own action) and a table of
softmax logits. Critics follow a per-pair polynomial step size, actors a much
smaller one, and logits are clipped so every action keeps positive mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import audit
from .mdp import JointPolicy, Mdp, exact_local_q, exact_state_values, finite_horizon_return


class ConfigError(ValueError):
    pass


def softmax_policy(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class StepSizeSchedule:
    """alpha(n) = scale / (1 + n) ** exponent, with n the visit count."""

    exponent: float = 0.7
    scale: float = 1.0
    kind: str = "polynomial"

    def __post_init__(self):
        if self.kind != "polynomial":
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0.5 < self.exponent <= 1.0:
            raise ConfigError(f"exponent must lie in (0.5, 1], got {self.exponent}")
        if not 0.0 < self.scale <= 1.0:
            raise ConfigError(f"scale must lie in (0, 1], got {self.scale}")

    def __call__(self, visits) -> float:
        return self.scale / (1.0 + visits) ** self.exponent


class TabularAgent:
    def __init__(self, num_states: int, num_actions: int, clip_min: float = -5.0, clip_max: float = 5.0,
                 agent_id: int | None = None):
        if not clip_min < clip_max:
            raise ConfigError("clip_min must be below clip_max")
        self.agent_id = agent_id
        self.q = np.zeros((num_states, num_actions))
        self.logits = np.zeros((num_states, num_actions))
        self.visit_counts = np.zeros((num_states, num_actions), dtype=np.int64)
        self.clip_min = float(clip_min)
        self.clip_max = float(clip_max)
        self._cdf = None

    def set_logits(self, logits) -> None:
        self.logits[...] = np.clip(logits, self.clip_min, self.clip_max)
        self._cdf = None

    def _policy_cdf(self) -> np.ndarray:
        # cumulative policy rows, refreshed lazily when logits change
        if self._cdf is None:
            self._cdf = np.cumsum(softmax_policy(self.logits), axis=1)
            self._cdf[:, -1] = 1.0
        return self._cdf

    @property
    def num_states(self):
        return self.q.shape[0]

    @property
    def num_actions(self):
        return self.q.shape[1]

    def policy(self, state=None) -> np.ndarray:
        audit.touch(self.agent_id, "policy")
        return softmax_policy(self.logits if state is None else self.logits[state])

    def _check_state(self, s):
        if not 0 <= s < self.num_states:
            raise IndexError(f"state {s} out of range")


def sample_action(agent: TabularAgent, state: int, rng: np.random.Generator) -> int:
    agent._check_state(state)
    audit.touch(agent.agent_id, "policy")
    return int(np.searchsorted(agent._policy_cdf()[state], rng.random(), side="right"))


def q_update(agent: TabularAgent, s: int, a_i: int, r: float, s_next: int, fresh_next_action: int,
             alpha: float, gamma: float) -> float:
    """TD step toward r + gamma * Q(s', a~) with a~ freshly drawn from the agent's own policy."""
    audit.touch(agent.agent_id, "q")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    agent._check_state(s)
    agent._check_state(s_next)
    q = agent.q
    q[s, a_i] += alpha * (r + gamma * q[s_next, fresh_next_action] - q[s, a_i])
    agent.visit_counts[s, a_i] += 1
    return q[s, a_i]


def policy_gradient(logits_row, q_row) -> np.ndarray:
    """Gradient of sum_a softmax(z)_a q_a with respect to z: pi * (q - v)."""
    pi = softmax_policy(logits_row)
    v = pi @ q_row
    return pi * (q_row - v)


def policy_gradient_step(agent: TabularAgent, s: int, beta: float) -> np.ndarray:
    audit.touch(agent.agent_id, "logits")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    agent._check_state(s)
    if beta == 0:
        return agent.logits[s]
    row = agent.logits[s] + beta * policy_gradient(agent.logits[s], agent.q[s])
    agent.logits[s] = np.clip(row, agent.clip_min, agent.clip_max)
    if agent._cdf is not None:
        agent._cdf[s] = np.cumsum(softmax_policy(agent.logits[s]))
        agent._cdf[s, -1] = 1.0
    return agent.logits[s]


def exact_policy_improvement(mdp: Mdp, policy: JointPolicy, agent: int, tie_tol: float = 1e-12) -> JointPolicy:
    """Agent ``agent`` moves to a greedy point mass on its exact local Q; everybody else stays put.

    Rows whose incumbent distribution is already optimal (within ``tie_tol``)
    are kept, so the result is deterministic and ties never cause churn.
    """
    q = exact_local_q(mdp, policy, agent, strict=False)
    new = policy.copy()
    old = policy.per_agent[agent]
    table = new.per_agent[agent]
    for s in range(mdp.num_states):
        best = q[s].max()
        if old[s] @ q[s] >= best - tie_tol * max(1.0, abs(best)):
            continue
        table[s] = 0.0
        table[s, int(np.argmax(q[s]))] = 1.0
    return new


def alternating_improvement(mdp: Mdp, policy: JointPolicy, max_rounds: int = 100):
    """Run improvement rounds (agent k mod N at round k) until a full rotation changes nothing.

    Returns ``(policy, values, rounds)`` where ``values[k]`` is V under the
    policy after ``k`` rounds, and ``rounds`` is -1 if ``max_rounds`` ran out.
    """
    n = mdp.num_agents
    values = [exact_state_values(mdp, policy, strict=False)]
    unchanged = 0
    for k in range(max_rounds):
        nxt = exact_policy_improvement(mdp, policy, k % n)
        same = all(np.array_equal(a, b) for a, b in zip(nxt.per_agent, policy.per_agent))
        policy = nxt
        values.append(exact_state_values(mdp, policy, strict=False))
        unchanged = unchanged + 1 if same else 0
        if unchanged >= n:
            return policy, values, k + 1
    return policy, values, -1


@dataclass
class TabularConfig:
    steps: int = 50_000
    omega: float = 0.7
    alpha_scale: float = 1.0
    beta: float = 0.01
    min_ratio: float = 10.0
    clip: float = 5.0
    episode_length: int = 100
    seed: int = 0
    sequential: bool = False
    freeze_actor: bool = False
    init_policies: list | None = None  # optional per-agent (S, A_i) probability tables
    oracle_every: int = 0  # episodes between Q-residual checks; 0 disables
    q_snapshot_every: int = 0

    def validate(self):
        try:
            StepSizeSchedule(self.omega, self.alpha_scale)
        except ConfigError as exc:
            raise ConfigError(f"omega/alpha_scale: {exc}") from exc
        if self.min_ratio < 10.0:
            raise ConfigError("critic/actor step ratio must be at least 10")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")
        if self.steps < 1 or self.episode_length < 1:
            raise ConfigError("steps and episode_length must be positive")


@dataclass
class TrainingLog:
    method: str
    episode_end_steps: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    q_residuals: list = field(default_factory=list)  # per logged episode: list per agent, or None
    q_snapshots: list = field(default_factory=list)  # (step, [q tables])
    agents: list = field(default_factory=list)
    max_step_ratio_violation: float = 0.0

    def rows(self):
        for i, (t, ret) in enumerate(zip(self.episode_end_steps, self.returns)):
            res = self.q_residuals[i] if i < len(self.q_residuals) else None
            yield t, ret, res

    def final_fraction_mean(self, frac: float = 0.1) -> float:
        k = max(1, int(round(len(self.returns) * frac)))
        return float(np.mean(self.returns[-k:]))

    def auc(self) -> float:
        return float(np.sum(self.returns))


def actor_step_size(config: TabularConfig, alpha_t: float) -> float:
    """Constant beta capped so the critic step is at least ``min_ratio`` times larger."""
    return min(config.beta, alpha_t / config.min_ratio)


def current_policy(agents) -> JointPolicy:
    return JointPolicy([softmax_policy(a.logits) for a in agents])


def train_tabular(mdp: Mdp, config: TabularConfig, method: str = "decentralized-ac") -> TrainingLog:
    """Simultaneous two-timescale actor-critic; deterministic given ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, S = mdp.num_agents, mdp.num_states
    schedule = StepSizeSchedule(config.omega, config.alpha_scale)
    agents = [TabularAgent(S, k, -config.clip, config.clip, agent_id=i) for i, k in enumerate(mdp.action_sizes)]
    if config.init_policies is not None:
        for ag, p in zip(agents, config.init_policies):
            ag.set_logits(np.log(np.asarray(p, float)))
    radix = np.cumprod((1,) + mdp.action_sizes[:-1])
    log = TrainingLog(method=method, agents=agents)

    ep_return, episode = 0.0, 0
    s = int(rng.integers(S))
    for t in range(config.steps):
        local = [0] * n
        for i, ag in enumerate(agents):
            with audit.acting_as(i):
                local[i] = sample_action(ag, s, rng)
        s_next, r = step_env(mdp, s, int(np.dot(local, radix)), rng)
        for i, ag in enumerate(agents):
            with audit.acting_as(i):
                alpha = schedule(ag.visit_counts[s, local[i]])
                fresh = sample_action(ag, s_next, rng)
                q_update(ag, s, local[i], r, s_next, fresh, alpha, mdp.gamma)
                if config.freeze_actor or (config.sequential and t % n != i):
                    continue
                beta = actor_step_size(config, alpha)
                if beta > 0:
                    log.max_step_ratio_violation = max(log.max_step_ratio_violation,
                                                       config.min_ratio - alpha / beta)
                policy_gradient_step(ag, s, beta)
        ep_return += r
        s = s_next
        if (t + 1) % config.episode_length == 0:
            episode += 1
            log.episode_end_steps.append(t + 1)
            log.returns.append(ep_return)
            if config.oracle_every and episode % config.oracle_every == 0:
                log.q_residuals.append(q_residuals(mdp, agents))
            else:
                log.q_residuals.append(None)
            if config.q_snapshot_every and episode % config.q_snapshot_every == 0:
                log.q_snapshots.append((t + 1, [a.q.copy() for a in agents]))
            ep_return = 0.0
            s = int(rng.integers(S))
    return log


def step_env(mdp: Mdp, s: int, joint: int, rng) -> tuple[int, float]:
    nxt = int(np.searchsorted(mdp._cdf[s, joint], rng.random(), side="right"))
    return nxt, float(mdp.reward[s, joint])


def q_residuals(mdp: Mdp, agents) -> list[float]:
    """max |Q^i_t - Q^i_pi| per agent under the agents' current policies (global-visibility oracle)."""
    pol = current_policy(agents)
    return [float(np.abs(ag.q - exact_local_q(mdp, pol, i)).max()) for i, ag in enumerate(agents)]


def as_single_agent(mdp: Mdp) -> Mdp:
    """The same MDP seen by one global agent whose action is the joint action."""
    return Mdp(mdp.num_states, (mdp.num_joint_actions,), mdp.transition.copy(), mdp.reward.copy(), mdp.gamma,
               seed=mdp.seed)


def train_centralized_ac(mdp: Mdp, config: TabularConfig) -> TrainingLog:
    return train_tabular(as_single_agent(mdp), replace(config, init_policies=None), method="centralized-ac")


@dataclass
class QLearningConfig:
    steps: int = 50_000
    omega: float = 0.7
    alpha_scale: float = 1.0
    epsilon: float = 0.1
    episode_length: int = 100
    seed: int = 0
    max_joint_actions: int = 4096


def joint_q_learning_baseline(mdp: Mdp, config: QLearningConfig) -> TrainingLog:
    """Epsilon-greedy Q-learning over the joint action space (all agents as one)."""
    A = mdp.num_joint_actions
    if A > config.max_joint_actions:
        raise ConfigError(f"joint action space has {A} actions, above the cap of {config.max_joint_actions}")
    schedule = StepSizeSchedule(config.omega, config.alpha_scale)
    if not 0.0 <= config.epsilon <= 1.0:
        raise ConfigError("epsilon must lie in [0, 1]")
    rng = np.random.default_rng(config.seed)
    S = mdp.num_states
    q = np.zeros((S, A))
    visits = np.zeros((S, A), dtype=np.int64)
    log = TrainingLog(method="joint-q-learning")
    log.agents = [q]
    ep_return = 0.0
    s = int(rng.integers(S))
    for t in range(config.steps):
        if rng.random() < config.epsilon:
            a = int(rng.integers(A))
        else:
            a = int(np.argmax(q[s]))
        s_next, r = step_env(mdp, s, a, rng)
        alpha = schedule(visits[s, a])
        q[s, a] += alpha * (r + mdp.gamma * q[s_next].max() - q[s, a])
        visits[s, a] += 1
        ep_return += r
        s = s_next
        if (t + 1) % config.episode_length == 0:
            log.episode_end_steps.append(t + 1)
            log.returns.append(ep_return)
            log.q_residuals.append(None)
            ep_return = 0.0
            s = int(rng.integers(S))
    return log


def uniform_policy_return(mdp: Mdp, horizon: int) -> float:
    """Exact expected episode return of the uniform joint policy from a uniform start state."""
    return finite_horizon_return(mdp, JointPolicy.uniform(mdp), horizon)
