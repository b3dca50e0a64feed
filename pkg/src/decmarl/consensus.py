"""Communication graphs and synchronous average consensus.

The averaging kernel puts ``1/(d+1)`` on every edge, where ``d`` is the
maximum node degree, and the remaining mass on the diagonal. It is symmetric
and doubly stochastic, so repeated application drives every node to the mean
of the initial values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DisconnectedGraphError(ValueError):
    pass


class ConsensusTimeout(RuntimeError):
    def __init__(self, x, iters, deviation):
        super().__init__(f"no consensus after {iters} iterations (max deviation {deviation:.3e})")
        self.x = x
        self.iters = iters
        self.deviation = deviation


@dataclass(frozen=True)
class CommGraph:
    num_nodes: int
    edges: frozenset

    def __init__(self, num_nodes: int, edges):
        if num_nodes < 1:
            raise ValueError("graph needs at least one node")
        canon = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < num_nodes and 0 <= j < num_nodes):
                raise ValueError(f"edge ({i}, {j}) references a missing node")
            e = (min(i, j), max(i, j))
            if e in canon:
                raise ValueError(f"duplicate edge {e}")
            canon.add(e)
        object.__setattr__(self, "num_nodes", int(num_nodes))
        object.__setattr__(self, "edges", frozenset(canon))

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def components(self) -> list[list[int]]:
        adj = {i: self.neighbors(i) for i in range(self.num_nodes)}
        seen, comps = set(), []
        for root in range(self.num_nodes):
            if root in seen:
                continue
            stack, comp = [root], []
            seen.add(root)
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return len(self.components()) == 1

    @classmethod
    def ring(cls, n: int) -> "CommGraph":
        if n == 1:
            return cls(1, [])
        if n == 2:
            return cls(2, [(0, 1)])
        return cls(n, [(i, (i + 1) % n) for i in range(n)])

    @classmethod
    def complete(cls, n: int) -> "CommGraph":
        return cls(n, [(i, j) for i in range(n) for j in range(i + 1, n)])

    @classmethod
    def path(cls, n: int) -> "CommGraph":
        return cls(n, [(i, i + 1) for i in range(n - 1)])

    @classmethod
    def parse(cls, spec: str) -> "CommGraph":
        """Parse ``ring:N``, ``complete:N``, ``path:N`` or a path to an edge-list file."""
        kind, _, arg = spec.partition(":")
        builders = {"ring": cls.ring, "complete": cls.complete, "path": cls.path}
        if kind in builders and arg:
            return builders[kind](int(arg))
        return cls.from_edge_list(Path(spec).read_text())

    @classmethod
    def from_edge_list(cls, text: str) -> "CommGraph":
        """First non-comment line holds N, every following line one ``i j`` pair."""
        lines = [ln.split("#")[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise ValueError("empty edge list")
        n = int(lines[0])
        edges = []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"bad edge line: {ln!r}")
            edges.append((int(parts[0]), int(parts[1])))
        return cls(n, edges)

    def to_edge_list(self) -> str:
        return "\n".join([str(self.num_nodes)] + [f"{i} {j}" for i, j in sorted(self.edges)]) + "\n"


@dataclass(frozen=True)
class ConsensusKernel:
    weights: np.ndarray
    degree: int
    neighbors: tuple  # per node: sorted support of its row, self included

    @property
    def num_nodes(self) -> int:
        return self.weights.shape[0]


def build_kernel(graph: CommGraph) -> ConsensusKernel:
    comps = graph.components()
    if len(comps) > 1:
        raise DisconnectedGraphError(f"graph is disconnected; components: {comps}")
    n = graph.num_nodes
    d = max((graph.degree(i) for i in range(n)), default=0)
    W = np.zeros((n, n))
    for i, j in graph.edges:
        W[i, j] = W[j, i] = 1.0 / (d + 1)
    for i in range(n):
        W[i, i] = 1.0 - graph.degree(i) / (d + 1)
    W.setflags(write=False)
    support = tuple(tuple(sorted([i] + graph.neighbors(i))) for i in range(n))
    return ConsensusKernel(W, d, support)


def consensus_step(kernel: ConsensusKernel, x):
    """One synchronous round ``x <- W x``.

    ``x`` may carry trailing dimensions (one consensus problem per column).
    Node ``i`` only reads ``x[j]`` for ``j`` in its own row's support.
    """
    n = kernel.num_nodes
    if len(x) != n:
        raise ValueError(f"expected {n} node values, got {len(x)}")
    W = kernel.weights
    rows = []
    for i in range(n):
        acc = 0.0
        for j in kernel.neighbors[i]:
            acc = acc + W[i, j] * np.asarray(x[j], dtype=float)
        rows.append(acc)
    return np.array(rows, dtype=float)


def max_deviation(x, target) -> float:
    return float(np.max(np.abs(np.asarray(x, float) - target)))


def run_to_consensus(kernel: ConsensusKernel, x0, tol: float, max_iters: int, raise_on_timeout: bool = True):
    """Iterate until every node is within ``tol`` of the initial mean.

    Returns ``(x, iters)``. On timeout raises :class:`ConsensusTimeout`, or
    returns ``(x, -1)`` when ``raise_on_timeout`` is false.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x0, dtype=float).copy()
    target = x.mean(axis=0)
    for it in range(max_iters + 1):
        if max_deviation(x, target) < tol:
            return x, it
        if it == max_iters:
            break
        x = consensus_step(kernel, x)
    if raise_on_timeout:
        raise ConsensusTimeout(x, max_iters, max_deviation(x, target))
    return x, -1
