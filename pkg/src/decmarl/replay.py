"""Per-agent replay buffers with consensus-estimated importance weights.

Every stored experience carries the log-density of the behavior policy at
the stored local action. On each refresh an agent recomputes
``beta = log pi_now - log pi_behavior`` for its own policy and adds the
change in beta into a consensus variable ``x``. Neighbors then mix their
``x`` values with the averaging kernel. Because the kernel preserves sums,
``sum_j x^j = sum_j beta^j`` at all times, and once mixed every agent holds
the average. ``N * x - beta`` then estimates the log-ratio of the other
agents' current and behavior policies without anyone sharing a policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import audit, checkpoint
from .consensus import ConsensusKernel, consensus_step

LOG_WEIGHT_CLIP = float(np.log(10.0))


class EmptyBufferError(RuntimeError):
    pass


class AlignmentError(RuntimeError):
    pass


@dataclass
class ReplayEntry:
    s: np.ndarray
    a_local: np.ndarray
    r: float
    s_next: np.ndarray
    behavior_logprob: float
    beta: float = 0.0
    beta_prev: float = 0.0
    x: float = 0.0
    t: int = -1
    stale: bool = False


_FIELDS = ("t", "s", "a", "r", "s_next", "behavior_logprob", "beta", "beta_prev", "x", "stale")


class ReplayBuffer:
    """Bounded FIFO stored as a ring of numpy arrays."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, owner=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.owner = owner
        self.t = np.full(capacity, -1, dtype=np.int64)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.behavior_logprob = np.zeros(capacity)
        self.beta = np.zeros(capacity)
        self.beta_prev = np.zeros(capacity)
        self.x = np.zeros(capacity)
        self.stale = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0  # next write slot

    def __len__(self):
        return self.size

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.head) % self.capacity

    def entry(self, slot: int) -> ReplayEntry:
        return ReplayEntry(self.s[slot].copy(), self.a[slot].copy(), float(self.r[slot]), self.s_next[slot].copy(),
                           float(self.behavior_logprob[slot]), float(self.beta[slot]), float(self.beta_prev[slot]),
                           float(self.x[slot]), int(self.t[slot]), bool(self.stale[slot]))

    def entries(self) -> list[ReplayEntry]:
        return [self.entry(k) for k in self.order()]

    def save(self, stem) -> None:
        meta = {"format": "decmarl.replay/1", "capacity": self.capacity, "obs_dim": self.obs_dim,
                "act_dim": self.act_dim, "size": self.size, "head": self.head}
        checkpoint.save(stem, meta, {f: getattr(self, f) for f in _FIELDS})

    @classmethod
    def load(cls, stem, owner=None) -> "ReplayBuffer":
        meta, arrays = checkpoint.load(stem)
        buf = cls(meta["capacity"], meta["obs_dim"], meta["act_dim"], owner=owner)
        for f in _FIELDS:
            getattr(buf, f)[...] = arrays[f]
        buf.size, buf.head = meta["size"], meta["head"]
        return buf


def insert(buffer: ReplayBuffer, entry: ReplayEntry) -> int:
    """Append with beta = x = 0, evicting the oldest entry when full. Returns the slot used."""
    if not np.isfinite(entry.behavior_logprob):
        raise ValueError("behavior log-density must be finite")
    k = buffer.head
    buffer.t[k] = entry.t
    buffer.s[k] = entry.s
    buffer.a[k] = entry.a_local
    buffer.r[k] = entry.r
    buffer.s_next[k] = entry.s_next
    buffer.behavior_logprob[k] = entry.behavior_logprob
    buffer.beta[k] = buffer.beta_prev[k] = buffer.x[k] = 0.0
    buffer.stale[k] = False
    buffer.head = (k + 1) % buffer.capacity
    buffer.size = min(buffer.size + 1, buffer.capacity)
    return k


def local_beta_refresh(buffer: ReplayBuffer, current_logprob_fn, slots=None) -> None:
    """beta <- log pi_now - log pi_behavior; x += beta - beta_prev.

    ``current_logprob_fn(states, actions)`` evaluates the owner's current
    policy in batch. ``slots`` restricts the refresh (lazy mode); default is
    every live entry.
    """
    audit.touch(buffer.owner, "replay")
    idx = np.arange(buffer.size) if slots is None else np.unique(np.asarray(slots, dtype=np.int64))
    idx = idx[~buffer.stale[idx]]
    if idx.size == 0:
        return
    with np.errstate(all="ignore"):
        cur = np.asarray(current_logprob_fn(buffer.s[idx], buffer.a[idx]), dtype=float)
    bad = ~np.isfinite(cur)
    if bad.any():
        buffer.stale[idx[bad]] = True
        idx, cur = idx[~bad], cur[~bad]
    buffer.beta_prev[idx] = buffer.beta[idx]
    buffer.beta[idx] = cur - buffer.behavior_logprob[idx]
    buffer.x[idx] += buffer.beta[idx] - buffer.beta_prev[idx]


def check_alignment(buffers) -> None:
    ref = buffers[0]
    for i, b in enumerate(buffers[1:], start=1):
        if b.size != ref.size or b.head != ref.head:
            raise AlignmentError(f"buffer {i} holds {b.size} entries (head {b.head}), buffer 0 holds {ref.size}")
        mism = np.nonzero(b.t[:b.size] != ref.t[:ref.size])[0]
        if mism.size:
            k = int(mism[0])
            raise AlignmentError(f"buffer {i} slot {k} holds timestep {b.t[k]}, buffer 0 holds {ref.t[k]}")


def consensus_exchange(buffers, kernel: ConsensusKernel, rounds: int = 1) -> None:
    """One (or ``rounds``) synchronous mixing round(s) of every entry's x across agents."""
    if len(buffers) != kernel.num_nodes:
        raise ValueError("one buffer per kernel node required")
    check_alignment(buffers)
    n = len(buffers)
    size = buffers[0].size
    if size == 0:
        return
    for _ in range(rounds):
        for i in range(n):
            for j in kernel.neighbors[i]:
                if j != i:
                    audit.message(j, i, "x")
        snapshot = [b.x[:size].copy() for b in buffers]
        mixed = consensus_step(kernel, snapshot)
        for b, row in zip(buffers, mixed):
            b.x[:size] = row


def log_weight(x, beta, n_agents: int, clip: float = LOG_WEIGHT_CLIP):
    """c = N*x - beta, clamped; zero when the agent is alone."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if n_agents == 1:
        return np.zeros_like(np.asarray(beta, dtype=float))
    return np.clip(n_agents * np.asarray(x, float) - np.asarray(beta, float), -clip, clip)


def is_weight(entry: ReplayEntry, n_agents: int, clip: float = LOG_WEIGHT_CLIP) -> float:
    return float(np.exp(log_weight(entry.x, entry.beta, n_agents, clip)))


def is_weights(buffer: ReplayBuffer, slots, n_agents: int, clip: float = LOG_WEIGHT_CLIP) -> np.ndarray:
    return np.exp(log_weight(buffer.x[slots], buffer.beta[slots], n_agents, clip))


def sample_slots(buffer: ReplayBuffer, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform with replacement over live (non-stale) entries."""
    if buffer.size == 0:
        raise EmptyBufferError("cannot sample from an empty replay buffer")
    live = np.nonzero(~buffer.stale[:buffer.size])[0]
    if live.size == 0:
        raise EmptyBufferError("every entry in the buffer is stale")
    if live.size == buffer.size:
        return rng.integers(buffer.size, size=size)
    return live[rng.integers(live.size, size=size)]


def sample_batch(buffer: ReplayBuffer, size: int, rng: np.random.Generator) -> list[ReplayEntry]:
    return [buffer.entry(int(k)) for k in sample_slots(buffer, size, rng)]
