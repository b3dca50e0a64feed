"""Off-policy decentralized actor-critic for continuous actions.

Per tick, in order: every agent acts and stores its own experience with the
behavior log-density; samples a batch from its own buffer; takes one
importance-weighted critic step and one reparameterized actor step; refreshes
the log-ratios of its stored entries and mixes the consensus variables with
its neighbors; finally nudges its target critic toward the critic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import audit
from .approx import (MlpParams, Sgd, SquashedGaussianHead, backward, flatten, forward, forward_cached, log_prob,
                     reparam_backward, sample_squashed)
from .consensus import ConsensusKernel
from .envs import ACTION_DIM, SpreadConfig, observation_dim, spread_reset, spread_step, target_distances
from .replay import (LOG_WEIGHT_CLIP, ReplayBuffer, ReplayEntry, consensus_exchange, insert, is_weights,
                     local_beta_refresh, log_weight, sample_slots)


@dataclass
class ContinuousConfig:
    steps: int = 200_000
    gamma: float = 0.95
    batch_size: int = 64
    critic_lr: float = 1e-3  # alpha
    actor_lr: float = 1e-4  # beta
    target_rate: float = 0.005  # epsilon
    momentum: float = 0.0
    hidden: tuple = (64, 64)
    replay_capacity: int = 10_000
    warmup_batches: int = 10
    consensus_rounds: int = 1
    lazy_refresh: bool = False
    log_weight_clip: float = LOG_WEIGHT_CLIP
    seed: int = 0
    env: SpreadConfig = field(default_factory=SpreadConfig)

    def validate(self):
        if not 0.0 < self.target_rate <= 1.0:
            raise ValueError("target_rate must lie in (0, 1]")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("replay capacity must hold at least one batch")
        if self.replay_capacity < self.warmup_batches * self.batch_size:
            raise ValueError("replay capacity is below the warmup size, so updates would never start")
        if self.critic_lr < 0 or self.actor_lr < 0:
            raise ValueError("step sizes must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.consensus_rounds < 1:
            raise ValueError("need at least one consensus round per tick")


class ContinuousAgent:
    def __init__(self, agent_id: int, obs_dim: int, action_dim: int, config: ContinuousConfig, seed: int = 0):
        self.agent_id = agent_id
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.gamma = config.gamma
        self.target_rate = config.target_rate
        ss = np.random.SeedSequence([seed, agent_id])
        actor_seed, critic_seed, rng_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        self.actor = SquashedGaussianHead(obs_dim, action_dim, config.hidden, seed=actor_seed, owner=agent_id)
        self.critic = MlpParams([obs_dim + action_dim, *config.hidden, 1], seed=critic_seed, owner=agent_id)
        self.target_critic = self.critic.copy()
        self.buffer = ReplayBuffer(config.replay_capacity, obs_dim, action_dim, owner=agent_id)
        self.critic_opt = Sgd(self.critic, config.critic_lr, config.momentum)
        self.actor_opt = Sgd(self.actor.trunk, config.actor_lr, config.momentum)
        self.rng = np.random.default_rng(rng_seed)

    def act(self, obs):
        a, _ = sample_squashed(self.actor, obs, self.rng)
        return a, float(log_prob(self.actor, obs, a))

    def logprob_fn(self, states, actions):
        return log_prob(self.actor, states, actions)

    def q_value(self, states, actions):
        return forward(self.critic, np.concatenate([states, actions], axis=-1))[..., 0]


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    x: np.ndarray
    beta: np.ndarray

    def __len__(self):
        return len(self.r)

    @classmethod
    def from_slots(cls, buffer: ReplayBuffer, slots) -> "Batch":
        return cls(buffer.s[slots], buffer.a[slots], buffer.r[slots], buffer.s_next[slots], buffer.x[slots],
                   buffer.beta[slots])

    @classmethod
    def from_entries(cls, entries: list[ReplayEntry]) -> "Batch":
        return cls(np.array([e.s for e in entries]), np.array([e.a_local for e in entries]),
                   np.array([e.r for e in entries]), np.array([e.s_next for e in entries]),
                   np.array([e.x for e in entries]), np.array([e.beta for e in entries]))


def critic_targets(agent: ContinuousAgent, batch: Batch, next_actions=None) -> np.ndarray:
    """q_hat = r + gamma * Q_target(s', a~), a~ drawn fresh from the agent's current actor."""
    if next_actions is None:
        next_actions, _ = sample_squashed(agent.actor, batch.s_next, agent.rng)
    q_next = forward(agent.target_critic, np.concatenate([batch.s_next, next_actions], axis=-1))[:, 0]
    return batch.r + agent.gamma * q_next


def critic_gradient(agent: ContinuousAgent, batch: Batch, n_agents: int, next_actions=None, weights=None,
                    clip: float = LOG_WEIGHT_CLIP):
    """Importance-weighted TD gradient; returns (grads, weighted loss, weights).

    Loss is 0.5 * mean(w * (Q(s, a) - q_hat)^2) with q_hat and w held fixed.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if weights is None:
        weights = np.exp(log_weight(batch.x, batch.beta, n_agents, clip))
    q_hat = critic_targets(agent, batch, next_actions)
    inputs = np.concatenate([batch.s, batch.a], axis=-1)
    q, cache = forward_cached(agent.critic, inputs)
    resid = q[:, 0] - q_hat
    B = len(batch)
    grads, _ = backward(agent.critic, inputs, (weights * resid / B)[:, None], cache)
    loss = 0.5 * float(np.mean(weights * resid ** 2))
    return grads, loss, weights


def actor_gradient(agent: ContinuousAgent, states, xi=None):
    """Reparameterized gradient of mean Q(s, f(xi, s)) w.r.t. the actor; ascent direction."""
    states = np.asarray(states, dtype=float)
    if len(states) == 0:
        raise ValueError("empty batch")
    if xi is None:
        xi = agent.rng.standard_normal((len(states), agent.action_dim))
    a, _ = sample_squashed(agent.actor, states, agent.rng, xi=xi)
    inputs = np.concatenate([states, a], axis=-1)
    _, cache = forward_cached(agent.critic, inputs)
    upstream = np.full((len(states), 1), 1.0 / len(states))
    _, d_in = backward(agent.critic, inputs, upstream, cache)
    d_action = d_in[:, agent.obs_dim:]
    return reparam_backward(agent.actor, states, xi, d_action)


def target_update(agent: ContinuousAgent, rate: float | None = None) -> None:
    eps = agent.target_rate if rate is None else rate
    if not 0.0 < eps <= 1.0:
        raise ValueError("target rate must lie in (0, 1]")
    for tgt, src in zip(agent.target_critic.arrays(), agent.critic.arrays()):
        tgt *= 1.0 - eps
        tgt += eps * src


@dataclass
class ContinuousLog:
    returns: list = field(default_factory=list)
    final_distances: list = field(default_factory=list)
    critic_loss: list = field(default_factory=list)
    mean_abs_c: list = field(default_factory=list)
    trace: list | None = None

    def rows(self):
        for k, ret in enumerate(self.returns):
            yield k, ret, self.critic_loss[k], self.mean_abs_c[k], self.final_distances[k]


def make_agents(n_agents: int, config: ContinuousConfig) -> list[ContinuousAgent]:
    obs_dim = observation_dim(n_agents)
    return [ContinuousAgent(i, obs_dim, ACTION_DIM, config, seed=config.seed) for i in range(n_agents)]


def train_continuous(agents, kernel: ConsensusKernel, config: ContinuousConfig, trace: bool = False,
                     learn: bool = True) -> ContinuousLog:
    """Run the lockstep loop on the spread task. ``learn=False`` only acts (frozen-policy rollout)."""
    config.validate()
    n = len(agents)
    if kernel.num_nodes != n:
        raise ValueError(f"kernel has {kernel.num_nodes} nodes for {n} agents")
    for ag in agents:
        if ag.obs_dim != observation_dim(n) or ag.action_dim != ACTION_DIM:
            raise ValueError("agent dimensions do not match the environment")
    env_rng = np.random.default_rng([config.seed, 7919])
    log = ContinuousLog(trace=[] if trace else None)
    warm = config.warmup_batches * config.batch_size

    def mark(op, i=None):
        if log.trace is not None:
            log.trace.append((op, i))

    state = spread_reset(n, env_rng, config.env)
    ep_ret, ep_losses, ep_c = 0.0, [], []
    for t in range(config.steps):
        obs = state.observation()
        actions, logps = np.zeros((n, ACTION_DIM)), np.zeros(n)
        for i, ag in enumerate(agents):
            with audit.acting_as(i):
                mark("act", i)
                actions[i], logps[i] = ag.act(obs)
        state, r, _ = spread_step(state, actions, config.env)
        obs_next = state.observation()
        ep_ret += r
        if learn:
            for i, ag in enumerate(agents):
                with audit.acting_as(i):
                    mark("store", i)
                    insert(ag.buffer, ReplayEntry(obs, actions[i], r, obs_next, logps[i], t=t))
            if len(agents[0].buffer) >= warm:
                slots = []
                for i, ag in enumerate(agents):
                    with audit.acting_as(i):
                        mark("sample", i)
                        slots.append(sample_slots(ag.buffer, config.batch_size, ag.rng))
                for i, ag in enumerate(agents):
                    with audit.acting_as(i):
                        mark("evaluate", i)
                        batch = Batch.from_slots(ag.buffer, slots[i])
                        grads, loss, _ = critic_gradient(ag, batch, n, clip=config.log_weight_clip)
                        ag.critic_opt.step(grads)
                        ep_losses.append(loss)
                        ep_c.append(float(np.mean(np.abs(log_weight(batch.x, batch.beta, n,
                                                                    config.log_weight_clip)))))
                for i, ag in enumerate(agents):
                    with audit.acting_as(i):
                        mark("improve", i)
                        grads = actor_gradient(ag, ag.buffer.s[slots[i]])
                        ag.actor_opt.step(grads, ascent=True)
            else:
                slots = None
            for i, ag in enumerate(agents):
                with audit.acting_as(i):
                    mark("refresh", i)
                    lazy = slots[i] if (config.lazy_refresh and slots is not None) else None
                    local_beta_refresh(ag.buffer, ag.logprob_fn, lazy)
            mark("consensus")
            consensus_exchange([ag.buffer for ag in agents], kernel, config.consensus_rounds)
            for i, ag in enumerate(agents):
                with audit.acting_as(i):
                    mark("target", i)
                    target_update(ag)
        if state.step_count >= config.env.episode_length:
            log.returns.append(ep_ret)
            log.final_distances.append(float(target_distances(state).mean()))
            log.critic_loss.append(float(np.mean(ep_losses)) if ep_losses else float("nan"))
            log.mean_abs_c.append(float(np.mean(ep_c)) if ep_c else 0.0)
            ep_ret, ep_losses, ep_c = 0.0, [], []
            state = spread_reset(n, env_rng, config.env)
    return log


def parameter_gap(agent: ContinuousAgent) -> float:
    return float(np.linalg.norm(flatten(list(agent.target_critic.arrays())) - flatten(list(agent.critic.arrays()))))
