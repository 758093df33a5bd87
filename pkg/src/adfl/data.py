"""Synthetic per-client regression data and the three corruption models.

Every client draws n i.i.d. rows. Normal clients share the conditional law
y | x (true parameter ``theta0``); covariate marginals may differ per client
in the heterogeneous scenario. Corruption modes:

* ``bf``  -- bit-flipping: responses negated (labels flipped for Bernoulli).
* ``ood`` -- out-of-distribution: features replaced by 0.7*X + U(0,1) noise,
  responses kept, so the stored pairs no longer satisfy the common model.
* ``mp``  -- model-parameter corruption: responses regenerated from a wrong
  parameter vector (ones on the first floor(0.1*p) coordinates).

Per-client RNG streams are derived from a single seed by client id, so
generation order and parallelism never change the data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "TrueModel",
    "ClientDataset",
    "CorruptionSpec",
    "CovariateSpec",
    "CORRUPTION_KINDS",
    "assign_abnormal",
    "gen_client_data",
    "corrupt",
    "make_fleet",
    "dataset_fingerprint",
]

CORRUPTION_KINDS = ("bf", "ood", "mp")

_CLIENT_STREAM = 1
_ASSIGN_STREAM = 2
_CORRUPT_STREAM = 3


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class TrueModel:
    """Ground-truth generating model: theta0 has ones on its leading block."""

    p: int
    theta0: np.ndarray
    noise_sd: float = 1.0
    response: str = "gaussian"  # or "bernoulli" for the logistic loss

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if self.response not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown response kind {self.response!r}")
        t = np.asarray(self.theta0, dtype=np.float64)
        if t.shape != (self.p,):
            raise ValueError(f"theta0 must have shape ({self.p},)")
        t.setflags(write=False)
        object.__setattr__(self, "theta0", t)

    @classmethod
    def default(cls, p: int, noise_sd: float = 1.0, response: str = "gaussian") -> "TrueModel":
        s = int(np.floor(0.2 * p))
        theta0 = np.zeros(p)
        theta0[:s] = 1.0
        return cls(p=p, theta0=theta0, noise_sd=noise_sd, response=response)

    def sample_responses(self, x: np.ndarray, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        eta = x @ theta
        if self.response == "gaussian":
            return eta + self.noise_sd * rng.standard_normal(len(eta))
        return (rng.random(len(eta)) < _sigmoid(eta)).astype(np.float64)

    def flip_responses(self, y: np.ndarray) -> np.ndarray:
        if self.response == "gaussian":
            return -y
        return 1.0 - y


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    abnormal: bool = False
    corruption: str | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("x must be (n, p) and y (n,) with matching n")
        if x.shape[0] < 1:
            raise ValueError("client dataset must be nonempty")
        if self.abnormal != (self.corruption is not None):
            raise ValueError("abnormal flag must match corruption provenance")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class CorruptionSpec:
    """Which corruption to apply and to what fraction of clients."""

    kind: str
    rho: float

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.rho < 0.5:
            raise ValueError(f"abnormal fraction must be in [0, 0.5), got {self.rho}")

    def mp_theta(self, p: int) -> np.ndarray:
        sc = int(np.floor(0.1 * p))
        theta_c = np.zeros(p)
        theta_c[:sc] = 1.0
        return theta_c


@dataclass(frozen=True)
class CovariateSpec:
    """Covariate scenario.

    homogeneous: X ~ N(0, I) everywhere. heterogeneous ("ar1-v1"): client m
    draws X ~ N(mu_m, S_m) with mu_m entries U(-0.5, 0.5) and S_m an AR(1)
    correlation matrix with parameter U(0.1, 0.9), both drawn once per client
    from its own stream.
    """

    kind: str = "homogeneous"
    scheme: str = "ar1-v1"

    def __post_init__(self):
        if self.kind not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "heterogeneous" and self.scheme != "ar1-v1":
            raise ValueError(f"unknown heterogeneous scheme {self.scheme!r}")


def assign_abnormal(m: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random floor(rho*m) client ids, sorted."""
    if not 0.0 <= rho < 0.5:
        raise ValueError(f"abnormal fraction must be in [0, 0.5), got {rho}")
    k = int(np.floor(rho * m))
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(m, size=k, replace=False)).astype(np.int64)


def _draw_covariates(cov: CovariateSpec, n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    if cov.kind == "homogeneous":
        return rng.standard_normal((n, p))
    mu = rng.uniform(-0.5, 0.5, size=p)
    ar = rng.uniform(0.1, 0.9)
    cov_mat = ar ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    chol = np.linalg.cholesky(cov_mat)
    return mu + rng.standard_normal((n, p)) @ chol.T


def gen_client_data(
    model: TrueModel,
    cov: CovariateSpec,
    n: int,
    client_id: int,
    rng: np.random.Generator,
) -> ClientDataset:
    """One normal client's (X, Y) sample of size n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = _draw_covariates(cov, n, model.p, rng)
    y = model.sample_responses(x, model.theta0, rng)
    return ClientDataset(client_id=client_id, x=x, y=y)


def corrupt(
    ds: ClientDataset,
    spec: CorruptionSpec,
    model: TrueModel,
    rng: np.random.Generator,
) -> ClientDataset:
    """Apply one corruption mode to a client's data; n, p, id unchanged."""
    if spec.kind == "bf":
        x, y = ds.x, model.flip_responses(ds.y)
    elif spec.kind == "ood":
        x = 0.7 * ds.x + rng.random(ds.x.shape)
        y = ds.y  # responses kept: pairs now violate the common model
    elif spec.kind == "mp":
        x = ds.x
        y = model.sample_responses(ds.x, spec.mp_theta(model.p), rng)
    else:  # pragma: no cover - CorruptionSpec already validates
        raise ValueError(f"unknown corruption kind {spec.kind!r}")
    return replace(ds, x=x, y=y, abnormal=True, corruption=spec.kind)


def _stream(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(kind, index)))


def make_fleet(
    model: TrueModel,
    cov: CovariateSpec,
    n: int,
    m: int,
    corruption: CorruptionSpec | None,
    seed: int,
) -> tuple[list[ClientDataset], np.ndarray]:
    """Generate the whole fleet from one seed; returns (datasets, abnormal ids).

    Client data is drawn before corruption from per-client streams, so the
    same seed yields the same underlying sample regardless of which clients
    end up corrupted.
    """
    if corruption is not None and corruption.rho > 0:
        abnormal = assign_abnormal(m, corruption.rho, _stream(seed, _ASSIGN_STREAM, 0))
    else:
        abnormal = np.empty(0, dtype=np.int64)
    abnormal_set = set(int(i) for i in abnormal)
    datasets = []
    for cid in range(m):
        ds = gen_client_data(model, cov, n, cid, _stream(seed, _CLIENT_STREAM, cid))
        if cid in abnormal_set:
            ds = corrupt(ds, corruption, model, _stream(seed, _CORRUPT_STREAM, cid))
        datasets.append(ds)
    return datasets, abnormal


def dataset_fingerprint(datasets: list[ClientDataset]) -> str:
    """Stable hash of the fleet's raw bytes, for pairing audits."""
    h = hashlib.sha256()
    for ds in datasets:
        h.update(ds.x.tobytes())
        h.update(ds.y.tobytes())
        h.update(str(ds.corruption).encode())
    return h.hexdigest()[:16]
