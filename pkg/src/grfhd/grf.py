"""Gaussian random field terrain model with an absolute-exponential kernel."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

from ._rng import stream
from .errors import CapacityError, ConditioningError, NumericalError, ParameterError
from .terrain import PointCloud

MAX_DENSE = 4000
JITTER_START = 1e-10
JITTER_STOP = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelParams:
    u: float
    ell: float
    sigma: float = 0.0

    def __post_init__(self):
        for name in ("u", "ell", "sigma"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")
        if self.u <= 0 or self.ell <= 0 or self.sigma < 0:
            raise ParameterError(f"invalid kernel parameters {self}")


def kernel_eval(p, q, params: KernelParams) -> float:
    d = math.hypot(p[0] - q[0], p[1] - q[1])
    return params.u * math.exp(-d / params.ell)


def kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    return params.u * np.exp(-cdist(np.atleast_2d(a), np.atleast_2d(b)) / params.ell)


def jitter_ladder(trace: float, n: int):
    """Absolute jitter levels: 0 first, then 1e-10..1e-4 times the mean diagonal."""
    yield 0.0
    scale = trace / n if n else 0.0
    level = JITTER_START
    while level <= JITTER_STOP * (1 + 1e-9):
        yield level * scale
        level *= 10.0


def cholesky_with_jitter(m: np.ndarray, what: str = "matrix"):
    """Lower Cholesky factor of ``m`` escalating diagonal jitter; returns (L, jitter)."""
    n = m.shape[0]
    tried = 0.0
    for jitter in jitter_ladder(float(np.trace(m)), n):
        tried = jitter
        try:
            return linalg.cholesky(m + jitter * np.eye(n), lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            continue
    raise ConditioningError(f"{what} not positive definite even with jitter {tried:.3g}", jitter=tried)


def log_marginal_likelihood(params: KernelParams, xy: np.ndarray, z: np.ndarray) -> float:
    """LML of zero-mean data ``z`` at ``xy``; determinant from the Cholesky diagonal."""
    k = kernel_matrix(xy, xy, params)
    k[np.diag_indices_from(k)] += params.sigma ** 2
    chol, _ = cholesky_with_jitter(k, "K + sigma^2 I")
    alpha = linalg.cho_solve((chol, True), z, check_finite=False)
    return float(-0.5 * z @ alpha - np.log(np.diag(chol)).sum() - 0.5 * len(z) * LOG_2PI)


@dataclass(frozen=True)
class GrfPosterior:
    query_locations: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance)

    def subset(self, idx) -> "GrfPosterior":
        idx = np.asarray(idx)
        return GrfPosterior(self.query_locations[idx], self.mean[idx], self.covariance[np.ix_(idx, idx)])


@dataclass(frozen=True, eq=False)
class GrfModel:
    """Conditioned GRF. The constant prior mean is subtracted before regression."""

    params: KernelParams
    train_locations: np.ndarray
    train_elevations: np.ndarray
    prior_mean: float
    max_dense: int = MAX_DENSE
    _chol: Optional[np.ndarray] = field(default=None, repr=False)
    _alpha: Optional[np.ndarray] = field(default=None, repr=False)
    jitter: float = 0.0

    def __post_init__(self):
        xy = np.array(self.train_locations, dtype=np.float64).reshape(-1, 2)
        z = np.array(self.train_elevations, dtype=np.float64).ravel()
        if len(xy) < 1 or len(xy) != len(z):
            raise ParameterError("need at least one training point with matching elevations")
        object.__setattr__(self, "train_locations", xy)
        object.__setattr__(self, "train_elevations", z)
        if len(xy) <= self.max_dense:
            k = kernel_matrix(xy, xy, self.params)
            k[np.diag_indices_from(k)] += self.params.sigma ** 2
            chol, jitter = cholesky_with_jitter(k, "K + sigma^2 I")
            alpha = linalg.cho_solve((chol, True), z - self.prior_mean, check_finite=False)
            object.__setattr__(self, "_chol", chol)
            object.__setattr__(self, "_alpha", alpha)
            object.__setattr__(self, "jitter", jitter)

    @classmethod
    def from_pcd(cls, pcd: PointCloud, params: KernelParams, prior_mean: Optional[float] = None,
                 max_dense: int = MAX_DENSE) -> "GrfModel":
        if prior_mean is None:
            prior_mean = float(pcd.z.mean())
        return cls(params, pcd.xy, pcd.z, float(prior_mean), max_dense=max_dense)

    @property
    def n(self) -> int:
        return len(self.train_elevations)

    @property
    def is_dense(self) -> bool:
        return self._chol is not None

    def lml(self) -> float:
        if not self.is_dense:
            raise CapacityError(f"{self.n} training points exceed the dense cap {self.max_dense}")
        r = self.train_elevations - self.prior_mean
        return float(-0.5 * r @ self._alpha - np.log(np.diag(self._chol)).sum() - 0.5 * self.n * LOG_2PI)

    def local(self, center, radius: float) -> "GrfModel":
        """Sub-model on the measurements within ``radius`` of ``center`` (same prior mean)."""
        d = np.hypot(*(self.train_locations - np.asarray(center, dtype=float)).T)
        sel = d <= radius
        if not sel.any():
            sel = d <= d.min()
        if sel.sum() > self.max_dense:
            raise CapacityError(f"{int(sel.sum())} points within window radius {radius:g} m exceed "
                                f"the dense cap {self.max_dense}")
        return GrfModel(self.params, self.train_locations[sel], self.train_elevations[sel],
                        self.prior_mean, self.max_dense)

    def cross_solve(self, query: np.ndarray):
        """Return (K*, L^-1 K*^T) for query locations."""
        ks = kernel_matrix(query, self.train_locations, self.params)
        v = linalg.solve_triangular(self._chol, ks.T, lower=True, check_finite=False)
        return ks, v

    def predict_mean(self, query) -> np.ndarray:
        self._require_dense()
        ks = kernel_matrix(np.asarray(query, float).reshape(-1, 2), self.train_locations, self.params)
        return self.prior_mean + ks @ self._alpha

    def _require_dense(self):
        if not self.is_dense:
            raise CapacityError(f"{self.n} training points exceed the dense cap {self.max_dense}; "
                                "use windowed conditioning via GrfModel.local()")

    def to_record(self, pcd_path: Optional[str] = None, achieved_lml: Optional[float] = None) -> dict:
        return {"u": self.params.u, "ell": self.params.ell, "sigma": self.params.sigma,
                "prior_mean": self.prior_mean, "n": self.n,
                "achieved_lml": achieved_lml, "pcd_path": pcd_path}


def condition(model: GrfModel, query_locations) -> GrfPosterior:
    """Joint posterior of elevations at ``query_locations``."""
    model._require_dense()
    q = np.asarray(query_locations, dtype=np.float64).reshape(-1, 2)
    if len(q) < 1 or not np.isfinite(q).all():
        raise ParameterError("query locations must be finite and non-empty")
    ks, v = model.cross_solve(q)
    mean = model.prior_mean + ks @ model._alpha
    cov = kernel_matrix(q, q, model.params) - v.T @ v
    cov = 0.5 * (cov + cov.T)
    np.fill_diagonal(cov, np.clip(np.diag(cov), 0.0, None))
    if not np.isfinite(mean).all() or not np.isfinite(cov).all():
        raise NumericalError("non-finite posterior", jitter=model.jitter)
    return GrfPosterior(q, mean, cov)


def posterior_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix L with L L^T = cov, for sampling.

    Near-singular covariances (queries on noiseless data) fall back to a
    clipped eigen-factor.
    """
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        chol, _ = cholesky_with_jitter(cov, "posterior covariance")
        return chol
    except ConditioningError:
        w, v = np.linalg.eigh(cov)
        # roundoff floor: 1e-12 m^2 is a micrometre standard deviation
        if w.min() < -max(1e-8 * w.max(), 1e-12):
            raise
        return v * np.sqrt(np.clip(w, 0.0, None))


def sample_posterior(post: GrfPosterior, n_samples: int, seed: int) -> np.ndarray:
    """(n_samples, n*) draws of mean + L eta."""
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    chol = posterior_factor(post.covariance)
    eta = stream(seed, "sample_posterior").standard_normal((n_samples, len(post.mean)))
    return post.mean[None, :] + eta @ chol.T


# ---------------------------------------------------------------------------
# hyperparameter fitting


@dataclass(frozen=True)
class FitResult:
    params: KernelParams
    lml: float
    lml_init: float
    prior_mean: float
    n_evaluations: int


def default_bounds(pcd: PointCloud) -> dict:
    xy = pcd.xy
    if len(xy) > 1:
        from scipy.spatial import cKDTree

        d, _ = cKDTree(xy).query(xy, k=2)
        spacing = float(np.median(d[:, 1]))
        extent = float(np.max(xy.max(axis=0) - xy.min(axis=0)))
    else:
        spacing = extent = 1.0
    return {"u": (1e-6, 1e4), "ell": (0.5 * spacing, 10.0 * max(extent, spacing)),
            "sigma": (1e-6, 10.0)}


def fit_hyperparameters(pcd: PointCloud, init: Optional[KernelParams] = None,
                        bounds: Optional[dict] = None, fix_sigma: bool = True,
                        n_starts: int = 5, seed: int = 0, max_iter: int = 200,
                        xatol: float = 1e-4, max_dense: int = MAX_DENSE) -> FitResult:
    """Maximise the log marginal likelihood over (log u, log ell) by multi-start Nelder-Mead.

    Starts are ``init`` plus ``n_starts`` points drawn log-uniformly inside the
    bounds. With ``fix_sigma`` the noise level is the sensor value
    ``pcd.noise_sigma``; otherwise log sigma is optimised too.
    """
    n = len(pcd)
    if n < 3:
        raise ParameterError(f"need at least 3 measurements to fit, got {n}")
    if n > max_dense:
        raise CapacityError(f"{n} measurements exceed the dense cap {max_dense}; fit on a spatial "
                            "window of the point cloud instead")
    b = default_bounds(pcd)
    b.update(bounds or {})
    names = ["u", "ell"] if fix_sigma else ["u", "ell", "sigma"]
    lo = np.log([b[k][0] for k in names])
    hi = np.log([b[k][1] for k in names])
    if np.any(lo > hi):
        raise ParameterError(f"empty bounds {b}")

    prior_mean = float(pcd.z.mean())
    z = pcd.z - prior_mean
    xy = pcd.xy
    if init is None:
        var = float(z.var()) if z.var() > 0 else 1e-4
        init = KernelParams(u=var, ell=math.sqrt(b["ell"][0] * b["ell"][1]), sigma=pcd.noise_sigma)
    if fix_sigma:
        init = KernelParams(init.u, init.ell, pcd.noise_sigma)

    def unpack(theta):
        vals = np.exp(theta)
        sigma = vals[2] if not fix_sigma else pcd.noise_sigma
        return KernelParams(float(vals[0]), float(vals[1]), float(sigma))

    n_eval = 0

    def objective(theta):
        nonlocal n_eval
        n_eval += 1
        try:
            return -log_marginal_likelihood(unpack(theta), xy, z)
        except (ConditioningError, ParameterError, FloatingPointError):
            return 1e300

    theta0 = np.log(np.maximum([getattr(init, k) for k in names], np.exp(lo)))
    lml_init = -objective(theta0)
    rng = stream(seed, "fit_hyperparameters")
    starts = [np.clip(theta0, lo, hi)] + [rng.uniform(lo, hi) for _ in range(n_starts)]

    best_theta, best_val = theta0, -lml_init
    for x0 in starts:
        res = optimize.minimize(objective, x0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                                options={"maxiter": max_iter, "xatol": xatol, "fatol": np.inf})
        if res.fun < best_val:
            best_theta, best_val = res.x, float(res.fun)
    if best_val >= 1e300:
        raise ConditioningError("K + sigma^2 I singular for every candidate parameter set")
    return FitResult(unpack(best_theta), -best_val, lml_init, prior_mean, n_eval)


def fit_model(pcd: PointCloud, **kwargs) -> tuple[GrfModel, FitResult]:
    res = fit_hyperparameters(pcd, **kwargs)
    return GrfModel.from_pcd(pcd, res.params, res.prior_mean, max_dense=kwargs.get("max_dense", MAX_DENSE)), res


def save_model(model: GrfModel, path, pcd_path: Optional[str] = None,
               achieved_lml: Optional[float] = None) -> None:
    Path(path).write_text(json.dumps(model.to_record(pcd_path, achieved_lml), indent=2) + "\n")


def load_model(path, pcd: Optional[PointCloud] = None) -> GrfModel:
    from .errors import FormatError
    from .terrain import load_pcd

    try:
        rec = json.loads(Path(path).read_text())
        params = KernelParams(float(rec["u"]), float(rec["ell"]), float(rec["sigma"]))
        prior_mean = float(rec["prior_mean"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model record ({exc})") from None
    if pcd is None:
        if not rec.get("pcd_path"):
            raise FormatError(f"{path}: model has no point-cloud reference")
        pcd_path = Path(rec["pcd_path"])
        if not pcd_path.is_absolute():
            pcd_path = Path(path).parent / pcd_path
        pcd = load_pcd(pcd_path)
    if rec.get("n") is not None and int(rec["n"]) != len(pcd):
        raise FormatError(f"{path}: model declares n={rec['n']} but point cloud has {len(pcd)} points")
    return GrfModel.from_pcd(pcd, params, prior_mean)
