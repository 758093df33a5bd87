"""Communication graphs, row-stochastic mixing matrices, and balance diagnostics.

Clients are nodes of a directed graph; ``a[i, j] = 1`` means client ``i``
receives estimates from client ``j``. Every client hears itself
(``a[i, i] = 1``), so the directed-circle construction yields a doubly
stochastic mixing matrix. All functions here are pure and take RNGs
explicitly, so they are safe to call from parallel replication workers.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Adjacency",
    "WeightMatrix",
    "TopologySpec",
    "PowerIterationError",
    "build_directed_circle",
    "build_erdos_renyi",
    "build_topology",
    "row_normalize",
    "network_balance",
    "spectral_condition",
    "connectivity_report",
]


class PowerIterationError(RuntimeError):
    """Power iteration failed to reach the requested tolerance."""


@dataclass(frozen=True)
class Adjacency:
    """Binary receive matrix over ``m`` clients, self-loops included."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=np.int64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        if not (np.diag(a) == 1).all():
            raise ValueError("adjacency must have self-loops on the diagonal")
        if (a.sum(axis=1) < 1).any():
            raise ValueError("every client must receive from at least one client")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def in_degrees(self) -> np.ndarray:
        """Row sums, self-loop included."""
        return self.entries.sum(axis=1)


@dataclass(frozen=True)
class WeightMatrix:
    """Row-stochastic mixing matrix supported on the adjacency."""

    entries: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.entries, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight matrix must be square, got shape {w.shape}")
        if (w < 0).any():
            raise ValueError("weight matrix entries must be nonnegative")
        dev = np.abs(w.sum(axis=1) - 1.0).max()
        if dev > 1e-12:
            raise ValueError(f"rows must sum to 1 (max deviation {dev:.3e})")
        w.setflags(write=False)
        object.__setattr__(self, "entries", w)

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    def to_csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row-compressed (indptr, indices, weights) of the nonzero pattern."""
        rows, cols = np.nonzero(self.entries)
        indptr = np.zeros(self.m + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr, dtype=np.int64)
        return indptr, cols.astype(np.int64), self.entries[rows, cols].copy()


@dataclass(frozen=True)
class TopologySpec:
    """Config-level description of a communication graph.

    kind
        ``"directed_circle"`` (param = in-degree D, excluding self) or
        ``"erdos_renyi"`` (param = link probability q).
    """

    kind: str
    m: int
    param: float

    def __post_init__(self):
        if self.kind not in ("directed_circle", "erdos_renyi"):
            raise ValueError(f"unknown topology kind {self.kind!r}")
        if self.m < 2:
            raise ValueError("need at least 2 clients")
        if self.kind == "directed_circle":
            d = self.param
            if d != int(d) or not 1 <= int(d) <= self.m - 1:
                raise ValueError(f"in-degree must be an integer in [1, {self.m - 1}], got {d}")
        else:
            if not 0.0 < self.param <= 1.0:
                raise ValueError(f"link probability must be in (0, 1], got {self.param}")

    def label(self) -> str:
        if self.kind == "directed_circle":
            return f"directed_circle(D={int(self.param)})"
        return f"erdos_renyi(q={self.param:g})"


def build_directed_circle(m: int, d: int) -> Adjacency:
    """Directed circle: client i hears its d cyclic predecessors and itself.

    Uniform in- and out-degrees make the row-normalized matrix doubly
    stochastic, so its balance statistic is exactly zero.
    """
    if not 1 <= d <= m - 1:
        raise ValueError(f"in-degree must be in [1, {m - 1}], got {d}")
    a = np.zeros((m, m), dtype=np.int64)
    idx = np.arange(m)
    a[idx, idx] = 1
    for k in range(1, d + 1):
        a[idx, (idx - k) % m] = 1
    return Adjacency(a)


def build_erdos_renyi(m: int, q: float, rng: np.random.Generator) -> Adjacency:
    """Undirected Erdos-Renyi graph G(m, q) with self-loops.

    Each unordered pair is linked independently with probability q. A node
    left with no neighbor besides itself gets one uniformly random mirrored
    link, so every client can receive outside information.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"link probability must be in (0, 1], got {q}")
    a = np.zeros((m, m), dtype=np.int64)
    u = rng.random((m, m))
    upper = np.triu(u < q, k=1)
    a[upper] = 1
    a |= a.T
    np.fill_diagonal(a, 1)
    for i in range(m):
        if a[i].sum() == 1:  # isolated: only the self-loop
            j = int(rng.integers(m - 1))
            if j >= i:
                j += 1
            a[i, j] = a[j, i] = 1
    return Adjacency(a)


def build_topology(spec: TopologySpec, rng: np.random.Generator | None = None) -> Adjacency:
    if spec.kind == "directed_circle":
        return build_directed_circle(spec.m, int(spec.param))
    if rng is None:
        raise ValueError("erdos_renyi topology requires an RNG")
    return build_erdos_renyi(spec.m, spec.param, rng)


def row_normalize(adj: Adjacency) -> WeightMatrix:
    """Mixing weights w[i, j] = a[i, j] / in_degree(i)."""
    a = adj.entries.astype(np.float64)
    return WeightMatrix(a / a.sum(axis=1, keepdims=True))


def network_balance(w: WeightMatrix) -> float:
    """Root-mean-square deviation of the column sums from 1.

    Zero exactly when the matrix is doubly stochastic (balanced network);
    grows as in-neighborhood weight concentrates on few clients.
    """
    col = w.entries.sum(axis=0)
    return float(np.linalg.norm(col - 1.0) / np.sqrt(w.m))


def _power_iteration_sym(b: np.ndarray, tol: float, max_iter: int) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    m = b.shape[0]
    # Fixed-seed start vector: deterministic, and almost surely not
    # orthogonal to the top eigenspace (the all-ones vector can be).
    v = np.random.default_rng(0x5EED).standard_normal(m)
    v /= np.linalg.norm(v)
    lam_prev = np.inf
    for _ in range(max_iter):
        y = b @ v
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        v = y / norm
        lam = float(v @ (b @ v))
        if abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
    raise PowerIterationError(f"no convergence after {max_iter} power iterations")


def spectral_condition(w: WeightMatrix, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Mixing contraction bound: ||W'(I - 11'/M) W|| + balance(W).

    Values below 1 certify geometric consensus contraction for the gossip
    step; doubly stochastic, well-connected matrices land well inside (0, 1).
    """
    we = w.entries
    col = we.sum(axis=0)
    b = we.T @ we - np.outer(col, col) / w.m
    b = (b + b.T) / 2.0  # symmetrize roundoff
    return _power_iteration_sym(b, tol, max_iter) + network_balance(w)


def _reachable(entries: np.ndarray, start: int) -> np.ndarray:
    m = entries.shape[0]
    seen = np.zeros(m, dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in np.nonzero(entries[i])[0]:
            if not seen[j]:
                seen[j] = True
                queue.append(int(j))
    return seen


def connectivity_report(adj: Adjacency) -> dict:
    """Advisory connectivity diagnostics (never enforced).

    Edges are read in the information-flow direction: i -> j carries j's
    estimate to i, so reachability follows receive links.
    """
    a = adj.entries
    sym = ((a + a.T) > 0).astype(np.int64)
    weakly = bool(_reachable(sym, 0).all())
    strongly = bool(_reachable(a, 0).all() and _reachable(a.T, 0).all())
    return {
        "weakly_connected": weakly,
        "strongly_connected": strongly,
    }
