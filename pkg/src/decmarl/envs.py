"""Cooperative navigation ("spread") with continuous actions, plus a trajectory dump."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ACTION_DIM = 5


@dataclass(frozen=True)
class SpreadConfig:
    damping: float = 0.75  # velocity multiplier per step
    force_gain: float = 1.0
    dt: float = 0.1
    max_speed: float = 1.0
    collision_radius: float = 0.15
    episode_length: int = 25
    arena: float = 1.5
    spawn: float = 1.0


@dataclass
class SpreadState:
    positions: np.ndarray  # (N, 2)
    velocities: np.ndarray  # (N, 2)
    targets: np.ndarray  # (N, 2); agent k is assigned target k
    step_count: int = 0

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    def observation(self) -> np.ndarray:
        """Same flat vector for every agent: positions, velocities, targets."""
        return np.concatenate([self.positions.ravel(), self.velocities.ravel(), self.targets.ravel()])

    def copy(self) -> "SpreadState":
        return SpreadState(self.positions.copy(), self.velocities.copy(), self.targets.copy(), self.step_count)


def observation_dim(n_agents: int) -> int:
    return 6 * n_agents


def spread_reset(n_agents: int, rng: np.random.Generator, config: SpreadConfig = SpreadConfig()) -> SpreadState:
    if n_agents < 1:
        raise ValueError("need at least one agent")
    pos = rng.uniform(-config.spawn, config.spawn, size=(n_agents, 2))
    tgt = rng.uniform(-config.spawn, config.spawn, size=(n_agents, 2))
    return SpreadState(pos, np.zeros((n_agents, 2)), tgt, 0)


def action_to_force(action) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    return np.stack([a[..., 1] - a[..., 2], a[..., 3] - a[..., 4]], axis=-1)


def collisions(positions, radius: float) -> np.ndarray:
    """Boolean per agent: within ``radius`` of any other agent."""
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    return (dist < radius).any(axis=1)


def target_distances(state: SpreadState) -> np.ndarray:
    return np.linalg.norm(state.positions - state.targets, axis=1)


def agent_rewards(state: SpreadState, config: SpreadConfig = SpreadConfig()) -> np.ndarray:
    return -target_distances(state) - collisions(state.positions, config.collision_radius).astype(float)


def spread_step(state: SpreadState, actions, config: SpreadConfig = SpreadConfig()):
    """Advance one tick; returns (next_state, global_reward, per_agent_rewards)."""
    actions = np.asarray(actions, dtype=float)
    if actions.shape != (state.n_agents, ACTION_DIM):
        raise ValueError(f"expected actions of shape ({state.n_agents}, {ACTION_DIM}), got {actions.shape}")
    vel = state.velocities * config.damping + config.force_gain * action_to_force(actions) * config.dt
    speed = np.linalg.norm(vel, axis=1, keepdims=True)
    vel = np.where(speed > config.max_speed, vel * (config.max_speed / np.maximum(speed, 1e-300)), vel)
    pos = np.clip(state.positions + vel * config.dt, -config.arena, config.arena)
    nxt = SpreadState(pos, vel, state.targets.copy(), state.step_count + 1)
    rewards = agent_rewards(nxt, config)
    return nxt, float(rewards.mean()), rewards


@dataclass
class TrajectoryRecorder:
    rows: list = field(default_factory=list)

    def record(self, episode: int, state: SpreadState, rewards) -> None:
        for k in range(state.n_agents):
            self.rows.append((episode, state.step_count, k, state.positions[k, 0], state.positions[k, 1],
                              float(rewards[k])))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "step", "agent", "x", "y", "reward"])
            for row in self.rows:
                w.writerow([row[0], row[1], row[2], repr(float(row[3])), repr(float(row[4])), repr(float(row[5]))])
