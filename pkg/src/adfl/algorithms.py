"""Decentralized update rules and runners.

Implements the round-synchronous algorithms: standard gossip gradient descent
(DFL), trust-weighted descent, the adaptive multi-stage variant (aDFL) with
max-consensus weight renormalization, and the robust aggregation baselines
(coordinate-wise median / trimmed-mean screening, clipped gossip).

Every round reads only the previous round's snapshot, so per-client updates
commute; replications are parallelizable with disjoint RNG streams. Squared
error runs on the fused engine kernels; other losses take the generic path.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClientDataset
from .engine import Mixing, kernels, mixing_from_weights
from .loss import local_gradient, local_loss
from .topology import WeightMatrix

__all__ = [
    "AlgoConfig",
    "FleetState",
    "TrustWeights",
    "RunResult",
    "NonFiniteError",
    "dfl_step",
    "weighted_dfl_step",
    "bridge_step",
    "clipped_gossip_step",
    "adaptive_weights",
    "renormalize_weights",
    "run_standard_dfl",
    "run_bridge",
    "run_clipped_gossip",
    "run_adfl",
    "run_multistage_adfl",
    "run_algorithm",
    "default_lambda_grid",
    "select_lambda_cv",
]

ALGORITHMS = ("dfl", "adfl", "bridge_m", "bridge_t", "clipped_gossip")

EARLY_STOP_TOL = 1e-10


class NonFiniteError(RuntimeError):
    """An update produced NaN/Inf; carries the offending iteration."""

    def __init__(self, algorithm: str, iteration: int):
        super().__init__(f"{algorithm}: non-finite estimate at iteration {iteration}")
        self.algorithm = algorithm
        self.iteration = iteration


@dataclass(frozen=True)
class TrustWeights:
    """Per-client learning-rate multipliers in [0, 1] and their tuning scale."""

    omega: np.ndarray
    lambda_n: float
    normalized: bool = False

    def __post_init__(self):
        om = np.ascontiguousarray(self.omega, dtype=np.float64)
        if om.ndim != 1:
            raise ValueError("omega must be a vector")
        if (om < 0).any() or (om > 1).any():
            raise ValueError("trust weights must lie in [0, 1]")
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be nonnegative")
        om.setflags(write=False)
        object.__setattr__(self, "omega", om)

    @classmethod
    def ones(cls, m: int) -> "TrustWeights":
        return cls(omega=np.ones(m), lambda_n=0.0, normalized=True)


@dataclass(frozen=True)
class FleetState:
    """Snapshot of all client estimates after round t."""

    t: int
    thetas: np.ndarray  # (M, p)
    weights: TrustWeights | None = None

    @property
    def m(self) -> int:
        return self.thetas.shape[0]


@dataclass(frozen=True)
class AlgoConfig:
    """One algorithm's hyperparameters.

    ``max_iter`` is the per-stage round count for adfl and the total round
    count for everything else; ``init_iters``/``stages``/``lambda_n`` only
    apply to adfl. ``lambda_n`` may be a number, "log_n" (log of the total
    sample size), or "cv". ``early_stop`` forces per-round execution so the
    movement test sees every round.
    """

    name: str
    algorithm: str
    alpha: float
    max_iter: int
    init_iters: int = 200
    stages: int = 1
    lambda_n: float | str = "log_n"
    renormalize: bool = True
    trim_b: int | str = "auto"
    rho_hat: float = 0.3
    tau: float | str = "auto"
    cv_grid_points: int = 8
    early_stop: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.alpha <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_iter < 0 or self.init_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if isinstance(self.lambda_n, str):
            if self.lambda_n not in ("log_n", "cv"):
                raise ValueError(f"lambda_n must be a number, 'log_n', or 'cv', got {self.lambda_n!r}")
        elif self.lambda_n < 0:
            raise ValueError("lambda_n must be nonnegative")
        if isinstance(self.trim_b, str) and self.trim_b != "auto":
            raise ValueError(f"trim_b must be an integer or 'auto', got {self.trim_b!r}")
        if not 0.0 <= self.rho_hat < 0.5:
            raise ValueError("rho_hat must be in [0, 0.5)")
        if isinstance(self.tau, str) and self.tau != "auto":
            raise ValueError(f"tau must be a number or 'auto', got {self.tau!r}")
        if self.cv_grid_points < 1:
            raise ValueError("cv_grid_points must be >= 1")


@dataclass
class RunResult:
    """Recorded trace plus the trust weights each stage actually used."""

    algorithm: str
    states: list[FleetState]
    weights_per_stage: list[TrustWeights] = field(default_factory=list)
    raw_weights_per_stage: list[TrustWeights] = field(default_factory=list)
    lambda_n: float | None = None
    stage_ends: list[int] = field(default_factory=list)

    @property
    def final(self) -> FleetState:
        return self.states[-1]


# ---------------------------------------------------------------------------
# Single-round contract operations (generic over loss kind)
# ---------------------------------------------------------------------------


def _fleet_gradients(loss, datasets: list[ClientDataset], thetas: np.ndarray) -> np.ndarray:
    return np.stack([local_gradient(loss, ds, thetas[m]) for m, ds in enumerate(datasets)])


def _check_finite(algorithm: str, thetas: np.ndarray, iteration: int) -> None:
    if not np.isfinite(thetas).all():
        raise NonFiniteError(algorithm, iteration)


def _descend(
    algorithm: str,
    state: FleetState,
    mixed: np.ndarray,
    loss,
    datasets,
    alpha: float,
    omega: np.ndarray | None,
    weights: TrustWeights | None,
) -> FleetState:
    grads = _fleet_gradients(loss, datasets, mixed)
    if omega is None:
        new = mixed - alpha * grads
    else:
        new = mixed - (alpha * omega)[:, None] * grads
    _check_finite(algorithm, new, state.t + 1)
    return FleetState(t=state.t + 1, thetas=new, weights=weights)


def dfl_step(state: FleetState, w: WeightMatrix, datasets, loss, alpha: float) -> FleetState:
    """One standard round: average in-neighbors, then a local gradient step."""
    mixed = kernels.average_mix(mixing_from_weights(w), state.thetas)
    return _descend("dfl", state, mixed, loss, datasets, alpha, None, None)


def weighted_dfl_step(
    state: FleetState, w: WeightMatrix, datasets, loss, alpha: float, tw: TrustWeights
) -> FleetState:
    """Standard round with each client's rate scaled by its trust weight."""
    mixed = kernels.average_mix(mixing_from_weights(w), state.thetas)
    return _descend("weighted_dfl", state, mixed, loss, datasets, alpha, tw.omega, tw)


def bridge_step(
    state: FleetState,
    w: WeightMatrix,
    datasets,
    loss,
    alpha: float,
    variant: str,
    trim_b: int = 0,
) -> FleetState:
    """Robust screening round: coordinate-wise median or b-trimmed mean."""
    mix = mixing_from_weights(w)
    if variant == "median":
        mixed = kernels.median_mix(mix, state.thetas)
    elif variant == "trimmed":
        _validate_trim(w, trim_b)
        mixed = kernels.trimmed_mix(mix, state.thetas, trim_b)
    else:
        raise ValueError(f"unknown bridge variant {variant!r}")
    return _descend(f"bridge_{variant}", state, mixed, loss, datasets, alpha, None, None)


def clipped_gossip_step(
    state: FleetState, w: WeightMatrix, datasets, loss, alpha: float, tau: float | str
) -> FleetState:
    """Gossip round with neighbor differences clipped to radius tau."""
    auto, radius = _resolve_tau(tau)
    mixed = kernels.clipped_mix(mixing_from_weights(w), state.thetas, radius, auto)
    return _descend("clipped_gossip", state, mixed, loss, datasets, alpha, None, None)


def _resolve_tau(tau: float | str) -> tuple[bool, float]:
    if isinstance(tau, str):
        if tau != "auto":
            raise ValueError(f"tau must be a number or 'auto', got {tau!r}")
        return True, 0.0
    tau = float(tau)
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    return False, tau


def _validate_trim(w: WeightMatrix, b: int) -> None:
    if b < 0:
        raise ValueError("trim level must be nonnegative")
    neighborhood = np.diff(w.to_csr()[0])
    if int(neighborhood.min()) <= 2 * b:
        raise ValueError(
            f"trim level {b} needs every in-neighborhood larger than {2 * b}, "
            f"smallest is {int(neighborhood.min())}"
        )


# ---------------------------------------------------------------------------
# Adaptive trust weights
# ---------------------------------------------------------------------------


def adaptive_weights(loss, datasets, init_thetas: np.ndarray, lambda_n: float) -> TrustWeights:
    """Trust from gradient size: omega_m = exp(-lambda_n * ||grad_m at own init||)."""
    if lambda_n < 0:
        raise ValueError("lambda_n must be nonnegative")
    norms = np.array(
        [np.linalg.norm(local_gradient(loss, ds, init_thetas[m])) for m, ds in enumerate(datasets)]
    )
    return TrustWeights(omega=np.exp(-lambda_n * norms), lambda_n=lambda_n, normalized=False)


def renormalize_weights(tw: TrustWeights, w: WeightMatrix) -> TrustWeights:
    """Divide by the max weight, found by distributed max-consensus.

    Each round every client keeps the largest weight among its in-neighbors
    (self included); M rounds reach the fixpoint on any graph. If some client
    cannot hear the global max holder (graph not strongly connected in the
    receive direction) a warning is recorded and the per-client fixpoint is
    used as its divisor.
    """
    omega = tw.omega.copy()
    mask = w.entries > 0
    global_max = float(omega.max())
    if global_max == 0.0:
        warnings.warn("all trust weights are zero; renormalization skipped", RuntimeWarning)
        return tw
    for _ in range(w.m):
        new = np.where(mask, omega[None, :], -np.inf).max(axis=1)
        if np.array_equal(new, omega):
            break
        omega = new
    if not np.all(omega == global_max):
        warnings.warn(
            "max-consensus fixpoint below the global max; graph is not strongly "
            "connected, using per-component maxima",
            RuntimeWarning,
        )
    return TrustWeights(omega=tw.omega / omega, lambda_n=tw.lambda_n, normalized=True)


# ---------------------------------------------------------------------------
# Fused runners
# ---------------------------------------------------------------------------


def _sq_moments(datasets) -> tuple[np.ndarray, np.ndarray]:
    gram = np.stack([ds.x.T @ ds.x / ds.n for ds in datasets])
    xmom = np.stack([ds.x.T @ ds.y / ds.n for ds in datasets])
    return gram, xmom


class _Recorder:
    """Collects snapshots on the global iteration grid (plus segment ends)."""

    def __init__(self, record_every: int):
        self.every = max(1, int(record_every))
        self.states: list[FleetState] = []

    def add(self, t: int, thetas: np.ndarray, tw: TrustWeights | None, force: bool = False):
        if self.states and self.states[-1].t == t:
            return
        if force or t % self.every == 0:
            self.states.append(FleetState(t=t, thetas=thetas.copy(), weights=tw))


class _Segment:
    """One homogeneous block of rounds driven by a single aggregation rule."""

    def __init__(self, loss, datasets, mix: Mixing, alpha: float, algorithm: str):
        self.loss = loss
        self.datasets = datasets
        self.mix = mix
        self.alpha = alpha
        self.algorithm = algorithm
        self.fast = loss.kind == "squared_error"
        if self.fast:
            self.gram, self.xmom = _sq_moments(datasets)

    def _advance(self, thetas: np.ndarray, omega: np.ndarray, rule: str, param, steps: int) -> np.ndarray:
        if steps == 0:
            return thetas
        if self.fast:
            if rule == "average":
                return kernels.gossip_gd_steps(
                    self.mix, self.gram, self.xmom, thetas, self.alpha, omega, steps
                )
            if rule == "median":
                return kernels.bridge_median_steps(
                    self.mix, self.gram, self.xmom, thetas, self.alpha, steps
                )
            if rule == "trimmed":
                return kernels.bridge_trimmed_steps(
                    self.mix, self.gram, self.xmom, thetas, self.alpha, param, steps
                )
            auto, radius = param
            return kernels.clipped_gossip_steps(
                self.mix, self.gram, self.xmom, thetas, self.alpha, radius, auto, steps
            )
        cur = thetas
        for _ in range(steps):
            if rule == "average":
                mixed = kernels.average_mix(self.mix, cur)
            elif rule == "median":
                mixed = kernels.median_mix(self.mix, cur)
            elif rule == "trimmed":
                mixed = kernels.trimmed_mix(self.mix, cur, param)
            else:
                auto, radius = param
                mixed = kernels.clipped_mix(self.mix, cur, radius, auto)
            grads = _fleet_gradients(self.loss, self.datasets, mixed)
            cur = mixed - (self.alpha * omega)[:, None] * grads
        return cur

    def run(
        self,
        thetas: np.ndarray,
        t0: int,
        steps: int,
        rec: _Recorder,
        omega: np.ndarray | None = None,
        rule: str = "average",
        param=None,
        tw: TrustWeights | None = None,
        early_stop: bool = False,
    ) -> tuple[np.ndarray, int]:
        m = thetas.shape[0]
        omega = np.ones(m) if omega is None else omega
        t = t0
        end = t0 + steps
        while t < end:
            chunk = 1 if early_stop else min(rec.every - (t % rec.every), end - t)
            nxt = self._advance(thetas, omega, rule, param, chunk)
            t += chunk
            if not np.isfinite(nxt).all():
                raise NonFiniteError(self.algorithm, self._locate(thetas, omega, rule, param, t - chunk))
            if early_stop and np.abs(nxt - thetas).max() < EARLY_STOP_TOL:
                thetas = nxt
                rec.add(t, thetas, tw, force=True)
                return thetas, t
            thetas = nxt
            rec.add(t, thetas, tw, force=(t == end))
        return thetas, t

    def _locate(self, thetas: np.ndarray, omega, rule, param, t_start: int) -> int:
        # Replay the failed chunk one round at a time for the exact iteration.
        cur = thetas
        t = t_start
        while True:
            cur = self._advance(cur, omega, rule, param, 1)
            t += 1
            if not np.isfinite(cur).all():
                return t


def run_standard_dfl(
    loss,
    datasets,
    w: WeightMatrix,
    alpha: float,
    iters: int,
    record_every: int = 1,
    thetas0: np.ndarray | None = None,
    early_stop: bool = False,
    label: str = "dfl",
) -> RunResult:
    """Plain gossip gradient descent from zeros (or a given stack)."""
    thetas = _initial_stack(datasets, thetas0)
    rec = _Recorder(record_every)
    rec.add(0, thetas, None, force=True)
    seg = _Segment(loss, datasets, mixing_from_weights(w), alpha, label)
    seg.run(thetas, 0, iters, rec, early_stop=early_stop)
    return RunResult(algorithm=label, states=rec.states)


def run_bridge(
    loss,
    datasets,
    w: WeightMatrix,
    alpha: float,
    iters: int,
    variant: str,
    trim_b: int = 0,
    record_every: int = 1,
    early_stop: bool = False,
    label: str | None = None,
) -> RunResult:
    if variant not in ("median", "trimmed"):
        raise ValueError(f"unknown bridge variant {variant!r}")
    if variant == "trimmed":
        _validate_trim(w, trim_b)
    label = label or f"bridge_{variant}"
    thetas = _initial_stack(datasets, None)
    rec = _Recorder(record_every)
    rec.add(0, thetas, None, force=True)
    seg = _Segment(loss, datasets, mixing_from_weights(w), alpha, label)
    seg.run(thetas, 0, iters, rec, rule=variant, param=trim_b, early_stop=early_stop)
    return RunResult(algorithm=label, states=rec.states)


def run_clipped_gossip(
    loss,
    datasets,
    w: WeightMatrix,
    alpha: float,
    iters: int,
    tau: float | str = "auto",
    record_every: int = 1,
    early_stop: bool = False,
    label: str = "clipped_gossip",
) -> RunResult:
    thetas = _initial_stack(datasets, None)
    rec = _Recorder(record_every)
    rec.add(0, thetas, None, force=True)
    seg = _Segment(loss, datasets, mixing_from_weights(w), alpha, label)
    seg.run(thetas, 0, iters, rec, rule="clipped", param=_resolve_tau(tau), early_stop=early_stop)
    return RunResult(algorithm=label, states=rec.states)


def _initial_stack(datasets, thetas0: np.ndarray | None) -> np.ndarray:
    m, p = len(datasets), datasets[0].p
    if thetas0 is None:
        return np.zeros((m, p))
    thetas0 = np.ascontiguousarray(thetas0, dtype=np.float64)
    if thetas0.shape != (m, p):
        raise ValueError(f"initial stack must have shape ({m}, {p})")
    return thetas0.copy()


def _resolve_lambda(cfg: AlgoConfig, loss, datasets, w, rng) -> float:
    if isinstance(cfg.lambda_n, str):
        if cfg.lambda_n == "log_n":
            return float(np.log(len(datasets) * datasets[0].n))
        if rng is None:
            raise ValueError("lambda_n='cv' needs an RNG for the holdout split")
        grid = default_lambda_grid(datasets[0].n, len(datasets), cfg.cv_grid_points)
        return select_lambda_cv(loss, datasets, w, cfg, grid, rng)
    return float(cfg.lambda_n)


def _run_adfl_impl(loss, datasets, w, cfg: AlgoConfig, stages: int, record_every, rng) -> RunResult:
    lam = _resolve_lambda(cfg, loss, datasets, w, rng)
    rec = _Recorder(record_every)
    seg = _Segment(loss, datasets, mixing_from_weights(w), cfg.alpha, cfg.name)
    thetas = _initial_stack(datasets, None)
    rec.add(0, thetas, None, force=True)
    thetas, t = seg.run(thetas, 0, cfg.init_iters, rec, early_stop=cfg.early_stop)
    result = RunResult(algorithm=cfg.name, states=rec.states, lambda_n=lam)
    for _ in range(stages):
        raw = adaptive_weights(loss, datasets, thetas, lam)
        tw = renormalize_weights(raw, w) if cfg.renormalize else raw
        result.raw_weights_per_stage.append(raw)
        result.weights_per_stage.append(tw)
        thetas, t = seg.run(
            thetas, t, cfg.max_iter, rec, omega=tw.omega, tw=tw, early_stop=cfg.early_stop
        )
        result.stage_ends.append(t)
    result.states = rec.states
    return result


def run_adfl(loss, datasets, w: WeightMatrix, cfg: AlgoConfig, record_every: int = 1, rng=None) -> RunResult:
    """Two-stage adaptive run: warmup rounds, one weight fit, weighted rounds."""
    return _run_adfl_impl(loss, datasets, w, cfg, 1, record_every, rng)


def run_multistage_adfl(
    loss, datasets, w: WeightMatrix, cfg: AlgoConfig, record_every: int = 1, rng=None
) -> RunResult:
    """Adaptive run that refits trust weights at each stage boundary."""
    return _run_adfl_impl(loss, datasets, w, cfg, cfg.stages, record_every, rng)


# ---------------------------------------------------------------------------
# Tuning-scale selection
# ---------------------------------------------------------------------------


def default_lambda_grid(n_local: int, m: int, points: int = 8) -> np.ndarray:
    """Geometric grid spanning the admissible tuning range.

    Endpoints are log(total sample size) and sqrt(n) * m^(-1/8); they can
    arrive in either order, so the grid runs from the smaller to the larger.
    """
    a = math.log(n_local * m)
    b = math.sqrt(n_local) * m ** (-0.125)
    lo, hi = sorted((a, b))
    return np.geomspace(lo, hi, points)


def select_lambda_cv(loss, datasets, w: WeightMatrix, cfg: AlgoConfig, grid, rng) -> float:
    """Holdout selection of the tuning scale.

    Each client holds out 20% of its samples; for every grid value the full
    adaptive run executes on the retained parts and each client scores its
    own final estimate on its holdout. The per-value score is the median
    across clients (corrupted clients scoring corrupted holdouts cannot move
    the median while they are a minority). Smallest score wins; ties go to
    the larger value.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    if min(ds.n for ds in datasets) < 10:
        raise ValueError("cross-validation needs at least 10 samples per client")
    streams = rng.spawn(len(datasets))
    retained, holdouts = [], []
    for ds, stream in zip(datasets, streams):
        perm = stream.permutation(ds.n)
        cut = ds.n // 5
        hold, keep = np.sort(perm[:cut]), np.sort(perm[cut:])
        retained.append(replace(ds, x=ds.x[keep], y=ds.y[keep]))
        holdouts.append((ds.x[hold], ds.y[hold]))
    scores = []
    for lam in grid:
        cfg_lam = replace(cfg, lambda_n=lam)
        res = _run_adfl_impl(loss, retained, w, cfg_lam, cfg.stages, record_every=10**9, rng=None)
        finals = res.final.thetas
        client_scores = [
            loss.value(hx, hy, finals[m_idx]) for m_idx, (hx, hy) in enumerate(holdouts)
        ]
        scores.append(float(np.median(client_scores)))
    best = min(scores)
    return max(lam for lam, s in zip(grid, scores) if s == best)


# ---------------------------------------------------------------------------
# Config-driven dispatch (harness entry point)
# ---------------------------------------------------------------------------


def resolve_trim_level(cfg: AlgoConfig, w: WeightMatrix) -> int:
    """Explicit trim level, or floor(rho_hat * smallest predecessor count)."""
    neighborhood = np.diff(w.to_csr()[0])
    if cfg.trim_b == "auto":
        b = int(math.floor(cfg.rho_hat * (int(neighborhood.min()) - 1)))
        return min(b, (int(neighborhood.min()) - 1) // 2)
    return int(cfg.trim_b)


def run_algorithm(
    cfg: AlgoConfig, loss, datasets, w: WeightMatrix, rng=None, record_every: int = 1
) -> RunResult:
    """Run one configured algorithm from the zero stack."""
    if cfg.algorithm == "dfl":
        return run_standard_dfl(
            loss, datasets, w, cfg.alpha, cfg.max_iter, record_every,
            early_stop=cfg.early_stop, label=cfg.name,
        )
    if cfg.algorithm == "adfl":
        return run_multistage_adfl(loss, datasets, w, cfg, record_every, rng)
    if cfg.algorithm == "bridge_m":
        return run_bridge(
            loss, datasets, w, cfg.alpha, cfg.max_iter, "median",
            record_every=record_every, early_stop=cfg.early_stop, label=cfg.name,
        )
    if cfg.algorithm == "bridge_t":
        return run_bridge(
            loss, datasets, w, cfg.alpha, cfg.max_iter, "trimmed",
            trim_b=resolve_trim_level(cfg, w), record_every=record_every,
            early_stop=cfg.early_stop, label=cfg.name,
        )
    if cfg.algorithm == "clipped_gossip":
        return run_clipped_gossip(
            loss, datasets, w, cfg.alpha, cfg.max_iter, cfg.tau,
            record_every=record_every, early_stop=cfg.early_stop, label=cfg.name,
        )
    raise ValueError(f"unknown algorithm {cfg.algorithm!r}")
