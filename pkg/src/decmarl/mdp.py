"""Finite multi-agent MDPs, simulation and exact policy-evaluation oracles.

Joint actions are mixed-radix integers over the per-agent action sizes with
agent 0 as the least significant digit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12
RESIDUAL_TOL = 1e-10


class SolveError(RuntimeError):
    """Raised when a linear solve fails its residual check."""


@dataclass(frozen=True)
class Mdp:
    num_states: int
    action_sizes: tuple[int, ...]
    transition: np.ndarray  # (S, A_joint, S)
    reward: np.ndarray  # (S, A_joint)
    gamma: float
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "action_sizes", tuple(int(k) for k in self.action_sizes))
        if self.num_states < 1 or not self.action_sizes or min(self.action_sizes) < 1:
            raise ValueError("need at least one state and one action per agent")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        shape = (self.num_states, self.num_joint_actions, self.num_states)
        if self.transition.shape != shape:
            raise ValueError(f"transition shape {self.transition.shape} != {shape}")
        if self.reward.shape != shape[:2]:
            raise ValueError(f"reward shape {self.reward.shape} != {shape[:2]}")
        if (self.transition < 0).any():
            raise ValueError("negative transition probability")
        dev = np.abs(self.transition.sum(axis=2) - 1.0).max()
        if dev > ROW_TOL:
            raise ValueError(f"transition rows deviate from 1 by {dev:.3e}")
        if not np.isfinite(self.reward).all():
            raise ValueError("reward table must be finite")
        self.transition.setflags(write=False)
        self.reward.setflags(write=False)
        cdf = np.cumsum(self.transition, axis=2)
        cdf[:, :, -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @property
    def num_agents(self) -> int:
        return len(self.action_sizes)

    @property
    def num_joint_actions(self) -> int:
        return int(np.prod(self.action_sizes))

    @property
    def num_state_action_pairs(self) -> int:
        return self.num_states * self.num_joint_actions

    def encode(self, local_actions) -> int:
        return encode_joint_action(local_actions, self.action_sizes)

    def decode(self, joint_action: int) -> tuple[int, ...]:
        return decode_joint_action(joint_action, self.action_sizes)

    def to_json(self) -> dict:
        return {
            "format": "decmarl.mdp/1",
            "num_states": self.num_states,
            "action_sizes": list(self.action_sizes),
            "gamma": self.gamma,
            "seed": self.seed,
            # row-major (state, joint_action, next_state)
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Mdp":
        sizes = tuple(data["action_sizes"])
        S, A = data["num_states"], int(np.prod(sizes))
        return cls(
            num_states=S,
            action_sizes=sizes,
            transition=np.asarray(data["transition"], dtype=float).reshape(S, A, S),
            reward=np.asarray(data["reward"], dtype=float).reshape(S, A),
            gamma=float(data["gamma"]),
            seed=data.get("seed"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Mdp":
        return cls.from_json(json.loads(Path(path).read_text()))


def encode_joint_action(local_actions, action_sizes) -> int:
    idx, radix = 0, 1
    for a, k in zip(local_actions, action_sizes):
        if not 0 <= a < k:
            raise ValueError(f"local action {a} out of range for size {k}")
        idx += int(a) * radix
        radix *= k
    return idx


def decode_joint_action(joint_action: int, action_sizes) -> tuple[int, ...]:
    if not 0 <= joint_action < int(np.prod(action_sizes)):
        raise ValueError(f"joint action {joint_action} out of range")
    out = []
    for k in action_sizes:
        out.append(joint_action % k)
        joint_action //= k
    return tuple(out)


def joint_action_table(action_sizes) -> np.ndarray:
    """(A_joint, N) array of local actions for every joint index."""
    A = int(np.prod(action_sizes))
    return np.array([decode_joint_action(a, action_sizes) for a in range(A)], dtype=int).reshape(A, len(action_sizes))


def generate_random_mdp(seed: int, num_states: int, action_sizes, gamma: float = 0.9) -> Mdp:
    """Random instance: transitions U(0,1) then row-normalized, rewards N(0,1)."""
    if num_states < 1:
        raise ValueError("num_states must be >= 1")
    action_sizes = tuple(int(k) for k in action_sizes)
    if not action_sizes or min(action_sizes) < 1:
        raise ValueError("every agent needs at least one action")
    rng = np.random.default_rng(seed)
    A = int(np.prod(action_sizes))
    P = rng.uniform(0.0, 1.0, size=(num_states, A, num_states))
    rows = P.sum(axis=2)
    # all-zero rows have probability zero but would divide by zero
    while (rows <= 0).any():
        bad = rows <= 0
        P[bad] = rng.uniform(0.0, 1.0, size=(int(bad.sum()), num_states))
        rows = P.sum(axis=2)
    P /= rows[:, :, None]
    R = rng.standard_normal((num_states, A))
    return Mdp(num_states, action_sizes, P, R, gamma, seed=seed)


def step(mdp: Mdp, state: int, joint_action: int, rng: np.random.Generator) -> tuple[int, float]:
    if not 0 <= state < mdp.num_states:
        raise ValueError(f"state {state} out of range")
    if not 0 <= joint_action < mdp.num_joint_actions:
        raise ValueError(f"joint action {joint_action} out of range")
    nxt = int(np.searchsorted(mdp._cdf[state, joint_action], rng.random(), side="right"))
    return nxt, float(mdp.reward[state, joint_action])


@dataclass
class JointPolicy:
    """Per-agent tables of local action probabilities, indexed (state, action)."""

    per_agent: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.per_agent = [np.asarray(p, dtype=float) for p in self.per_agent]

    def validate(self, mdp: Mdp, strict: bool = True) -> None:
        if len(self.per_agent) != mdp.num_agents:
            raise ValueError("policy has wrong number of agents")
        for i, p in enumerate(self.per_agent):
            if p.shape != (mdp.num_states, mdp.action_sizes[i]):
                raise ValueError(f"agent {i} table has shape {p.shape}")
            if np.abs(p.sum(axis=1) - 1.0).max() > ROW_TOL:
                raise ValueError(f"agent {i} rows do not sum to 1")
            if strict and (p <= 0).any():
                raise ValueError(f"agent {i} has a non-positive probability")
            if (p < 0).any():
                raise ValueError(f"agent {i} has a negative probability")

    def copy(self) -> "JointPolicy":
        return JointPolicy([p.copy() for p in self.per_agent])

    def joint(self, mdp: Mdp) -> np.ndarray:
        """(S, A_joint) joint action probabilities."""
        return self.joint_excluding(mdp, None)

    def joint_excluding(self, mdp: Mdp, agent: int | None) -> np.ndarray:
        """Product over agents j != agent of pi^j(s, a^j), laid out over joint indices."""
        table = joint_action_table(mdp.action_sizes)
        out = np.ones((mdp.num_states, mdp.num_joint_actions))
        for j, p in enumerate(self.per_agent):
            if j != agent:
                out *= p[:, table[:, j]]
        return out

    @classmethod
    def uniform(cls, mdp: Mdp) -> "JointPolicy":
        return cls([np.full((mdp.num_states, k), 1.0 / k) for k in mdp.action_sizes])

    @classmethod
    def random(cls, mdp: Mdp, rng: np.random.Generator) -> "JointPolicy":
        tables = []
        for k in mdp.action_sizes:
            p = rng.uniform(0.1, 1.0, size=(mdp.num_states, k))
            tables.append(p / p.sum(axis=1, keepdims=True))
        return cls(tables)


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.linalg.solve(A, b)  # LAPACK gesv: LU with partial pivoting
    res = np.abs(A @ x - b).max()
    if not res < RESIDUAL_TOL * max(1.0, np.abs(b).max()):
        raise SolveError(f"linear solve residual {res:.3e} exceeds tolerance")
    return x


def policy_averaged(mdp: Mdp, policy: JointPolicy) -> tuple[np.ndarray, np.ndarray]:
    pi = policy.joint(mdp)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    R_pi = (pi * mdp.reward).sum(axis=1)
    return P_pi, R_pi


def exact_state_values(mdp: Mdp, policy: JointPolicy, strict: bool = True) -> np.ndarray:
    """V solving (I - gamma P_pi) V = R_pi."""
    policy.validate(mdp, strict=strict)
    P_pi, R_pi = policy_averaged(mdp, policy)
    return _solve(np.eye(mdp.num_states) - mdp.gamma * P_pi, R_pi)


def exact_joint_q(mdp: Mdp, policy: JointPolicy, strict: bool = True) -> np.ndarray:
    V = exact_state_values(mdp, policy, strict=strict)
    return mdp.reward + mdp.gamma * mdp.transition @ V


def exact_local_q(mdp: Mdp, policy: JointPolicy, agent: int, strict: bool = True) -> np.ndarray:
    """Q^i(s, a^i): joint Q marginalized over the other agents' policies."""
    if not 0 <= agent < mdp.num_agents:
        raise ValueError(f"agent {agent} out of range")
    q_joint = exact_joint_q(mdp, policy, strict=strict)
    return marginalize(mdp, policy, agent, q_joint)


def marginalize(mdp: Mdp, policy: JointPolicy, agent: int, joint_table: np.ndarray) -> np.ndarray:
    others = policy.joint_excluding(mdp, agent)
    table = joint_action_table(mdp.action_sizes)
    out = np.zeros((mdp.num_states, mdp.action_sizes[agent]))
    weighted = others * joint_table
    for a in range(mdp.action_sizes[agent]):
        out[:, a] = weighted[:, table[:, agent] == a].sum(axis=1)
    return out


def local_bellman_operator(mdp: Mdp, policy: JointPolicy, agent: int, q: np.ndarray) -> np.ndarray:
    """H^i q(s,a^i) = E_{a^-i}[R(s,a) + gamma E_{s'} E_{a~pi^i} q(s', a~)]."""
    v_next = (policy.per_agent[agent] * q).sum(axis=1)
    target = mdp.reward + mdp.gamma * mdp.transition @ v_next
    return marginalize(mdp, policy, agent, target)


def finite_horizon_return(mdp: Mdp, policy: JointPolicy, horizon: int, start=None) -> float:
    """Expected undiscounted sum of `horizon` rewards from a start distribution (uniform by default)."""
    P_pi, R_pi = policy_averaged(mdp, policy)
    d = np.full(mdp.num_states, 1.0 / mdp.num_states) if start is None else np.asarray(start, float)
    total = 0.0
    for _ in range(horizon):
        total += d @ R_pi
        d = d @ P_pi
    return float(total)
