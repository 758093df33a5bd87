"""Loss functions, local gradient oracles, and reference estimators.

Squared error uses the half-quadratic convention l = (y - x'theta)^2 / 2 so
the per-sample Hessian is x x' with no factor 2. The logistic loss exercises
the same generic interface with Bernoulli responses.

Reference estimators (whole-sample, trustworthy-only "oracle", and per-client
local fits) are ground truth for the simulator's diagnostics, not part of any
decentralized algorithm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientDataset, _sigmoid

__all__ = [
    "SquaredErrorLoss",
    "LogisticLoss",
    "get_loss",
    "ReferenceEstimates",
    "ReferenceSolveError",
    "local_loss",
    "local_gradient",
    "local_hessian",
    "solve_reference",
    "empirical_bias",
    "smallest_hessian_eigenvalue",
]


class ReferenceSolveError(RuntimeError):
    """A reference estimator could not be computed; names the estimator."""


class SquaredErrorLoss:
    kind = "squared_error"
    response = "gaussian"

    def value(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> float:
        r = y - x @ theta
        return float(0.5 * np.mean(r * r))

    def gradient(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return -(x.T @ (y - x @ theta)) / len(y)

    def hessian(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return (x.T @ x) / len(y)

    def solve(self, x: np.ndarray, y: np.ndarray, name: str) -> np.ndarray:
        # SVD-backed least squares: stable even for ill-conditioned pooled designs.
        theta, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
        if rank < x.shape[1]:
            raise ReferenceSolveError(f"{name}: pooled design is rank-deficient ({rank} < {x.shape[1]})")
        return theta


class LogisticLoss:
    kind = "logistic"
    response = "bernoulli"

    max_newton_iter = 200
    newton_tol = 1e-10

    def value(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> float:
        eta = x @ theta
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))

    def gradient(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return x.T @ (_sigmoid(x @ theta) - y) / len(y)

    def hessian(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
        s = _sigmoid(x @ theta)
        return (x * (s * (1.0 - s))[:, None]).T @ x / len(y)

    def solve(self, x: np.ndarray, y: np.ndarray, name: str) -> np.ndarray:
        theta = np.zeros(x.shape[1])
        val = self.value(x, y, theta)
        for _ in range(self.max_newton_iter):
            g = self.gradient(x, y, theta)
            if np.linalg.norm(g) <= self.newton_tol:
                return theta
            h = self.hessian(x, y, theta)
            try:
                step = np.linalg.solve(h, g)
            except np.linalg.LinAlgError as exc:
                raise ReferenceSolveError(f"{name}: singular Hessian in Newton solve") from exc
            # Damped Newton: halve until the objective stops increasing.
            t = 1.0
            while t > 1e-8:
                cand = theta - t * step
                cand_val = self.value(x, y, cand)
                if cand_val <= val + 1e-14:
                    theta, val = cand, cand_val
                    break
                t /= 2.0
            else:
                raise ReferenceSolveError(f"{name}: Newton line search stalled")
        raise ReferenceSolveError(
            f"{name}: Newton did not converge in {self.max_newton_iter} iterations"
        )


_LOSSES = {"squared_error": SquaredErrorLoss, "logistic": LogisticLoss}


def get_loss(kind: str):
    try:
        return _LOSSES[kind]()
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}") from None


def local_loss(loss, ds: ClientDataset, theta: np.ndarray) -> float:
    """Mean per-sample loss on one client."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (ds.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({ds.p},)")
    return loss.value(ds.x, ds.y, theta)


def local_gradient(loss, ds: ClientDataset, theta: np.ndarray) -> np.ndarray:
    """Gradient of the client's mean loss at theta."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (ds.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({ds.p},)")
    return loss.gradient(ds.x, ds.y, theta)


def local_hessian(loss, ds: ClientDataset, theta: np.ndarray) -> np.ndarray:
    return loss.hessian(ds.x, ds.y, np.asarray(theta, dtype=np.float64))


@dataclass(frozen=True)
class ReferenceEstimates:
    """Ground-truth minimizers: pooled, trustworthy-only, and per-client."""

    whole_sample: np.ndarray
    oracle: np.ndarray
    local: np.ndarray  # (M, p)


def solve_reference(loss, datasets: list[ClientDataset], abnormal_ids) -> ReferenceEstimates:
    """Solve the pooled, trustworthy-only, and local problems exactly.

    With no abnormal clients the whole-sample and oracle estimators coincide
    bitwise (identical pooled data in identical order).
    """
    abnormal = set(int(i) for i in np.asarray(abnormal_ids, dtype=np.int64).ravel()) if len(
        np.atleast_1d(abnormal_ids)
    ) else set()
    xs = [ds.x for ds in datasets]
    ys = [ds.y for ds in datasets]
    whole = loss.solve(np.vstack(xs), np.concatenate(ys), "whole-sample estimator")
    normal = [i for i in range(len(datasets)) if i not in abnormal]
    if not normal:
        raise ReferenceSolveError("oracle estimator: no normal clients")
    if abnormal:
        oracle = loss.solve(
            np.vstack([xs[i] for i in normal]),
            np.concatenate([ys[i] for i in normal]),
            "oracle estimator",
        )
    else:
        oracle = whole.copy()
    local = np.stack(
        [loss.solve(ds.x, ds.y, f"local estimator (client {ds.client_id})") for ds in datasets]
    )
    return ReferenceEstimates(whole_sample=whole, oracle=oracle, local=local)


def empirical_bias(loss, ds: ClientDataset, theta0: np.ndarray) -> float:
    """Plug-in gradient norm at the true parameter.

    Near zero (order sqrt(p/n)) for normal clients; bounded away from zero
    for corrupted ones, which is what the adaptive weights exploit.
    """
    return float(np.linalg.norm(local_gradient(loss, ds, theta0)))


def smallest_hessian_eigenvalue(
    h: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000
) -> float:
    """Smallest eigenvalue of a symmetric PSD matrix by inverse power iteration.

    Diagnostic only. Singular matrices report 0.
    """
    p = h.shape[0]
    try:
        chol = np.linalg.cholesky(h + 0.0)
    except np.linalg.LinAlgError:
        return 0.0
    v = np.random.default_rng(0x5EED).standard_normal(p)
    v /= np.linalg.norm(v)
    lam_prev = np.inf
    for _ in range(max_iter):
        y = np.linalg.solve(chol.T, np.linalg.solve(chol, v))
        norm = np.linalg.norm(y)
        if not np.isfinite(norm) or norm == 0.0:
            return 0.0
        v = y / norm
        lam = float(v @ (h @ v))
        if abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
    return lam_prev
