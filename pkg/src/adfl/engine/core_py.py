"""Pure-NumPy round kernels (fallback backend).

Each kernel advances the stacked client estimates (M, p) through one or more
synchronous rounds: an aggregation of in-neighbor estimates followed by a
local gradient step on the squared-error moments (gram = X'X/n per client,
xmom = X'y/n per client). The compiled backend in ``_core`` mirrors these
signatures exactly; parity is enforced by tests and the kernel benchmark.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class Mixing(NamedTuple):
    """Row-stochastic mixing weights in dense and CSR form."""

    dense: np.ndarray    # (M, M) float64, C-contiguous
    indptr: np.ndarray   # (M+1,) int64
    indices: np.ndarray  # (nnz,) int64
    weights: np.ndarray  # (nnz,) float64


def _gather(mix: Mixing, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group clients by in-degree; yields (rows, neighbor index matrix)."""
    degrees = np.diff(mix.indptr)
    for deg in np.unique(degrees):
        rows = np.nonzero(degrees == deg)[0]
        nb = np.stack([mix.indices[mix.indptr[r] : mix.indptr[r + 1]] for r in rows])
        yield rows, nb


def average_mix(mix: Mixing, thetas: np.ndarray) -> np.ndarray:
    """Plain weighted averaging of in-neighbor estimates."""
    return mix.dense @ thetas


def median_mix(mix: Mixing, thetas: np.ndarray) -> np.ndarray:
    """Coordinate-wise median over in-neighbors (self included)."""
    out = np.empty_like(thetas)
    for rows, nb in _gather(mix, thetas):
        out[rows] = np.median(thetas[nb], axis=1)
    return out


def trimmed_mix(mix: Mixing, thetas: np.ndarray, b: int) -> np.ndarray:
    """Coordinate-wise b-trimmed mean over in-neighbors (self included)."""
    out = np.empty_like(thetas)
    for rows, nb in _gather(mix, thetas):
        deg = nb.shape[1]
        if deg <= 2 * b:
            raise ValueError(f"in-degree {deg} too small for trim level {b}")
        vals = np.sort(thetas[nb], axis=1)
        out[rows] = vals[:, b : deg - b].mean(axis=1)
    return out


def _auto_radii(mix: Mixing, norms: np.ndarray) -> np.ndarray:
    """Per-client median distance to in-neighbors, self excluded."""
    m = norms.shape[0]
    out = np.zeros(m)
    for i in range(m):
        nb = mix.indices[mix.indptr[i] : mix.indptr[i + 1]]
        nb = nb[nb != i]
        if nb.size:
            out[i] = np.median(norms[i, nb])
    return out


def clipped_mix(mix: Mixing, thetas: np.ndarray, tau: float, auto: bool) -> np.ndarray:
    """Gossip with neighbor differences clipped to radius tau.

    A non-finite tau clips nothing, so the rule collapses to the exact plain
    average (rows sum to 1); taking that path keeps the reduction exact in
    floating point as well.
    """
    if not auto and math.isinf(tau):
        return average_mix(mix, thetas)
    diffs = thetas[None, :, :] - thetas[:, None, :]  # diffs[m, k] = theta_k - theta_m
    norms = np.sqrt(np.einsum("mkj,mkj->mk", diffs, diffs))
    radii = _auto_radii(mix, norms) if auto else np.full(thetas.shape[0], float(tau))
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.minimum(1.0, radii[:, None] / norms)
    factor[norms == 0.0] = 1.0
    return thetas + np.einsum("mk,mkj->mj", mix.dense * factor, diffs)


def _sq_gradient(gram: np.ndarray, xmom: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    return np.matmul(gram, thetas[:, :, None])[:, :, 0] - xmom


def gossip_gd_steps(
    mix: Mixing,
    gram: np.ndarray,
    xmom: np.ndarray,
    thetas: np.ndarray,
    alpha: float,
    omega: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Average-then-descend rounds; omega scales each client's rate."""
    cur = thetas
    scale = (alpha * omega)[:, None]
    for _ in range(steps):
        mixed = mix.dense @ cur
        cur = mixed - scale * _sq_gradient(gram, xmom, mixed)
    return cur


def bridge_median_steps(mix, gram, xmom, thetas, alpha, steps):
    cur = thetas
    for _ in range(steps):
        mixed = median_mix(mix, cur)
        cur = mixed - alpha * _sq_gradient(gram, xmom, mixed)
    return cur


def bridge_trimmed_steps(mix, gram, xmom, thetas, alpha, b, steps):
    cur = thetas
    for _ in range(steps):
        mixed = trimmed_mix(mix, cur, b)
        cur = mixed - alpha * _sq_gradient(gram, xmom, mixed)
    return cur


def clipped_gossip_steps(mix, gram, xmom, thetas, alpha, tau, auto, steps):
    cur = thetas
    for _ in range(steps):
        mixed = clipped_mix(mix, cur, tau, auto)
        cur = mixed - alpha * _sq_gradient(gram, xmom, mixed)
    return cur
