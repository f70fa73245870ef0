"""Landing-safety evaluators: deterministic, analytic (SHD) and Monte-Carlo.

Analytic probabilities approximate each quadratic form ``Z^T M Z`` by a
Gaussian with its exact mean and variance. ``denom_mode="paper"`` divides the
margin by ``sqrt(2)*sd``; ``"standard"`` uses ``sd``, which is
the usual Gaussian tail.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.special import ndtr

from .errors import CapacityError, NumericalError, ParameterError, StateError
from .grf import GrfModel, GrfPosterior, condition, kernel_matrix, posterior_factor
from ._rng import stream
from .lander import LanderGeometry, PadSet, QuadFormRoughness, QuadFormSlope, QuadFormTable, precompute
from .terrain import DemGrid, GridSpec, PointCloud, _as_spec, bilinear_upsample, load_dem, save_dem

DEGENERATE_SD = 1e-12
TARGET_BATCH = 16
SAMPLE_BATCH = 25
MAX_MC_QUERY = 4000


@dataclass(frozen=True)
class SafetyThresholds:
    slope_max: float = math.radians(10.0)
    roughness_max: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.slope_max < math.pi / 2:
            raise ParameterError("slope_max must lie in (0, pi/2) radians")
        if not self.roughness_max > 0:
            raise ParameterError("roughness_max must be positive")

    @classmethod
    def from_degrees(cls, slope_deg: float = 10.0, roughness_m: float = 0.3):
        return cls(math.radians(slope_deg), roughness_m)

    def to_dict(self):
        return {"slope_max_deg": math.degrees(self.slope_max), "roughness_max_m": self.roughness_max}


@dataclass(frozen=True)
class RaisingFactors:
    k1: float = 1.0
    k2: float = 1.0

    def __post_init__(self):
        for k in (self.k1, self.k2):
            if not (k > 0 and math.isfinite(k)):
                raise ParameterError(f"raising factors must be finite and positive, got {self}")


@dataclass(frozen=True, eq=False)
class SafetyMap:
    spec: GridSpec
    p_slope: np.ndarray
    p_roughness: np.ndarray
    p_safe: np.ndarray
    valid: np.ndarray
    meta: dict = field(default_factory=dict)

    def channel(self, name: str) -> np.ndarray:
        return {"slope": self.p_slope, "roughness": self.p_roughness, "safe": self.p_safe}[name]


@dataclass(frozen=True, eq=False)
class SafetyTruth:
    spec: GridSpec
    slope: np.ndarray
    roughness: np.ndarray
    is_safe: np.ndarray
    valid: np.ndarray
    thresholds: SafetyThresholds

    @property
    def slope_safe(self):
        return self.valid & (self.slope < self.thresholds.slope_max)

    @property
    def roughness_safe(self):
        return self.valid & (self.roughness < self.thresholds.roughness_max)

    def as_map(self) -> SafetyMap:
        return _masked_map(self.spec, self.slope_safe.astype(float), self.roughness_safe.astype(float),
                           self.is_safe.astype(float), self.valid, {"kind": "deterministic"})


def _masked_map(spec, ps, pr, pa, valid, meta) -> SafetyMap:
    nan = np.full(spec.shape, np.nan)
    return SafetyMap(spec, np.where(valid, ps, nan), np.where(valid, pr, nan), np.where(valid, pa, nan),
                     valid.copy(), meta)


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        threads = int(os.environ.get("GRFHD_THREADS", "1") or 1)
    return threads if threads > 0 else (os.cpu_count() or 1)


def _parallel_map(fn, items, threads):
    threads = resolve_threads(threads)
    if threads == 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# quadratic forms


def quadform_moments(mu, Sigma, M):
    """Mean and variance of Z^T M Z for Z ~ N(mu, Sigma)."""
    mu = np.asarray(mu, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    d = mu.shape[-1]
    if Sigma.shape[-2:] != (d, d) or M.shape[-2:] != (d, d):
        raise ParameterError(f"dimension mismatch: mu {mu.shape}, Sigma {Sigma.shape}, M {M.shape}")
    m, var = _moments(mu, Sigma, M)
    if np.ndim(m) == 0:
        return float(m), float(var)
    return m, var


def _moments(mu, S, M):
    ms = M @ S
    mean = np.einsum("...ii->...", ms) + np.einsum("...i,...ij,...j->...", mu, M, mu)
    w = np.einsum("...ij,...j->...i", M, mu)
    var = 2.0 * np.einsum("...ij,...ji->...", ms, ms) + 4.0 * np.einsum("...i,...ij,...j->...", w, S, w)
    var = np.where((var < 0) & (var >= -1e-12), 0.0, var)
    return mean, var


def _gaussian_prob(tau, mean, var, denom_mode: str):
    if denom_mode not in ("paper", "standard"):
        raise ParameterError(f"denom_mode must be 'paper' or 'standard', got {denom_mode!r}")
    if np.any(var < 0):
        raise NumericalError("negative quadratic-form variance; covariance is not PSD")
    sd = np.sqrt(var)
    scale = math.sqrt(2.0) if denom_mode == "paper" else 1.0
    degenerate = sd < DEGENERATE_SD
    z = (tau - mean) / np.where(degenerate, 1.0, scale * sd)
    return np.where(degenerate, (mean < tau).astype(float), ndtr(z))


def _check_psd(cov):
    ev = np.linalg.eigvalsh(cov)
    if ev.min() < -1e-8 * max(np.trace(cov), 1e-300):
        raise NumericalError(f"posterior covariance is not PSD (min eigenvalue {ev.min():.3g})")


def prob_slope_safe(post: GrfPosterior, qf: QuadFormSlope, denom_mode: str = "paper") -> float:
    """Gaussian approximation of P{Z^T A Z < tau_s}; ``post`` covers (z1, z2, z3)."""
    if post.mean.shape != (3,):
        raise ParameterError("slope posterior must be 3-dimensional")
    _check_psd(post.covariance)
    m, var = _moments(post.mean, post.covariance, qf.A)
    return float(_gaussian_prob(qf.tau_s, m, var, denom_mode))


def prob_roughness_safe_point(post: GrfPosterior, qf: QuadFormRoughness, denom_mode: str = "paper") -> float:
    """Gaussian approximation of P{Z^T B Z < tau_r}; ``post`` covers (z1, z2, z3, zp) in that order."""
    if post.mean.shape != (4,):
        raise ParameterError("roughness posterior must be 4-dimensional")
    _check_psd(post.covariance)
    m, var = _moments(post.mean, post.covariance, qf.B)
    return float(_gaussian_prob(qf.tau_r, m, var, denom_mode))


def _plane_height(xy, z, at):
    """Height of the plane through three pads (xy (...,3,2), z (...,3)) at point ``at`` (...,2)."""
    x12 = xy[..., 1, 0] - xy[..., 0, 0]
    y12 = xy[..., 1, 1] - xy[..., 0, 1]
    x13 = xy[..., 2, 0] - xy[..., 0, 0]
    y13 = xy[..., 2, 1] - xy[..., 0, 1]
    dz2 = z[..., 1] - z[..., 0]
    dz3 = z[..., 2] - z[..., 0]
    a = y12 * dz3 - y13 * dz2
    b = x13 * dz2 - x12 * dz3
    c = x12 * y13 - x13 * y12
    return z[..., 0] - (a * (at[..., 0] - xy[..., 0, 0]) + b * (at[..., 1] - xy[..., 0, 1])) / c


def fourth_pad_feasible(post: GrfPosterior, pads: PadSet, conservative: bool = False) -> bool:
    """False when the fourth pad sits below the plane of the first three (skip this orientation)."""
    if pads.pad_xy.shape[0] != 4 or post.mean.shape != (4,):
        raise ParameterError("fourth-pad check needs a 4-pad geometry and a 4-dimensional posterior")
    h = _plane_height(pads.pad_xy[:3], post.mean[:3], pads.pad_xy[3])
    z4 = post.mean[3]
    if conservative:
        z4 = z4 - 3.0 * math.sqrt(max(post.covariance[3, 3], 0.0))
    return not (z4 < h - 1e-12)


# ---------------------------------------------------------------------------
# target bookkeeping


def _snap(v):
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def _stencil(offsets: np.ndarray, resolution: float):
    """Bilinear stencil (dr, dc, w) per offset: arrays of shape (N, 4)."""
    fc = _snap(offsets[:, 0] / resolution)
    fr = _snap(offsets[:, 1] / resolution)
    c0 = np.floor(fc).astype(np.intp)
    r0 = np.floor(fr).astype(np.intp)
    tc = fc - c0
    tr = fr - r0
    dr = np.stack([r0, r0, r0 + 1, r0 + 1], axis=1)
    dc = np.stack([c0, c0 + 1, c0, c0 + 1], axis=1)
    w = np.stack([(1 - tr) * (1 - tc), (1 - tr) * tc, tr * (1 - tc), tr * tc], axis=1)
    return dr, dc, w


def grid_disk_mask(spec: GridSpec, radius: float) -> np.ndarray:
    """Targets whose disk of ``radius`` lies inside the raster extent."""
    xs, ys = spec.xs, spec.ys
    tol = 1e-9
    okx = (xs - radius >= xs[0] - tol) & (xs + radius <= xs[-1] + tol)
    oky = (ys - radius >= ys[0] - tol) & (ys + radius <= ys[-1] + tol)
    return oky[:, None] & okx[None, :]


def hull_disk_mask(spec: GridSpec, points_xy: np.ndarray, radius: float) -> np.ndarray:
    """Targets whose disk of ``radius`` lies inside the convex hull of ``points_xy``."""
    try:
        hull = ConvexHull(points_xy)
    except (QhullError, ValueError):
        return np.zeros(spec.shape, dtype=bool)
    pos = spec.coordinates()
    # facet equations are unit-normal: n.x + offset <= 0 inside
    signed = pos @ hull.equations[:, :2].T + hull.equations[:, 2]
    return (signed.max(axis=1) <= -radius + 1e-9).reshape(spec.shape)


@dataclass
class _Stencils:
    pad: tuple          # each (T, P, 4)
    foot: tuple         # each (U, 4)


def _build_stencils(table: QuadFormTable, resolution: float) -> _Stencils:
    T, P, _ = table.pad_xy.shape
    dr, dc, w = _stencil(table.pad_xy.reshape(-1, 2), resolution)
    pad = tuple(a.reshape(T, P, 4) for a in (dr, dc, w))
    foot = _stencil(table.footprint, resolution)
    return _Stencils(pad, foot)


def _gather(fields, rows, cols, dr, dc, w):
    """Interpolated values for targets: fields (S, R, C) -> (S, N) per stencil row."""
    out = 0.0
    for k in range(4):
        wk = w[..., k]
        if np.all(wk == 0):
            continue
        vals = fields[:, rows + dr[..., k], cols + dc[..., k]]
        out = out + np.where(wk == 0, 0.0, wk * vals)
    return out


def _evaluate_fields(fields: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                     table: QuadFormTable, st: _Stencils):
    """Worst-case slope (rad) and roughness (m) per (sample, target).

    ``fields`` is (S, R, C). Stencils must stay in range for the given targets.
    """
    S = fields.shape[0]
    n_t = len(rows)
    P = table.pad_xy.shape[1]
    dr_f, dc_f, w_f = st.foot
    fz = np.stack([_gather(fields, rows, cols, dr_f[u], dc_f[u], w_f[u]) for u in range(len(table.footprint))],
                  axis=-1)  # (S, n_t, U)
    worst_slope = np.full((S, n_t), -np.inf)
    worst_rough = np.full((S, n_t), -np.inf)
    for ti in range(len(table.thetas)):
        pz = np.stack([_gather(fields, rows, cols, st.pad[0][ti, p], st.pad[1][ti, p], st.pad[2][ti, p])
                       for p in range(P)], axis=-1)  # (S, n_t, P)
        fp = table.footprint[table.member[ti]]
        fpz = fz[..., table.member[ti]]
        theta_slope = np.full((S, n_t), -np.inf)
        theta_rough = np.full((S, n_t), -np.inf)
        for ki, tri in enumerate(table.triples):
            xy = table.pad_xy[ti, tri]
            z = pz[..., tri]
            x12, y12 = xy[1] - xy[0]
            x13, y13 = xy[2] - xy[0]
            dz2 = z[..., 1] - z[..., 0]
            dz3 = z[..., 2] - z[..., 0]
            a = y12 * dz3 - y13 * dz2
            b = x13 * dz2 - x12 * dz3
            c = x12 * y13 - x13 * y12
            feasible = np.ones((S, n_t), dtype=bool)
            if table.others[ki] >= 0:
                o = table.others[ki]
                h = z[..., 0] - (a * (table.pad_xy[ti, o, 0] - xy[0, 0]) + b * (table.pad_xy[ti, o, 1] - xy[0, 1])) / c
                feasible = ~(pz[..., o] < h - 1e-12)
            hyp = np.sqrt(a * a + b * b)
            slope = np.arctan2(hyp, c)
            norm = np.sqrt(a * a + b * b + c * c)
            x1p = fp[:, 0] - xy[0, 0]
            y1p = fp[:, 1] - xy[0, 1]
            dist = np.abs(a[..., None] * x1p + b[..., None] * y1p + c * (fpz - z[..., 0:1])) / norm[..., None]
            rough = dist.max(axis=-1)
            theta_slope = np.where(feasible, np.maximum(theta_slope, slope), theta_slope)
            theta_rough = np.where(feasible, np.maximum(theta_rough, rough), theta_rough)
        worst_slope = np.maximum(worst_slope, theta_slope)
        worst_rough = np.maximum(worst_rough, theta_rough)
    return worst_slope, worst_rough


def _stencil_ok(spec: GridSpec, rows, cols, st: _Stencils) -> np.ndarray:
    ok = np.ones(len(rows), dtype=bool)
    for dr, dc, w in (st.pad, st.foot):
        dr, dc, w = dr.reshape(-1, 4), dc.reshape(-1, 4), w.reshape(-1, 4)
        used = w != 0
        rr = rows[:, None] + dr[used][None, :]
        cc = cols[:, None] + dc[used][None, :]
        ok &= ((rr >= 0) & (rr < spec.n_rows) & (cc >= 0) & (cc < spec.n_cols)).all(axis=1)
    return ok


def _targets(mask: np.ndarray):
    rows, cols = np.nonzero(mask)
    return rows.astype(np.intp), cols.astype(np.intp)


# ---------------------------------------------------------------------------
# deterministic evaluator


def deterministic_eval(dem: DemGrid, geom: LanderGeometry, thresholds: SafetyThresholds,
                       table: Optional[QuadFormTable] = None) -> SafetyTruth:
    """Worst-case slope and roughness per pixel over all orientations."""
    table = table or precompute(geom, thresholds.slope_max, thresholds.roughness_max)
    spec = dem.spec
    st = _build_stencils(table, spec.resolution)
    mask = grid_disk_mask(spec, geom.footprint_radius)
    rows, cols = _targets(mask)
    ok = _stencil_ok(spec, rows, cols, st)
    rows, cols = rows[ok], cols[ok]
    slope = np.full(spec.shape, np.nan)
    rough = np.full(spec.shape, np.nan)
    if len(rows):
        s, r = _evaluate_fields(dem.elevations[None], rows, cols, table, st)
        slope[rows, cols] = s[0]
        rough[rows, cols] = r[0]
    valid = np.isfinite(slope) & np.isfinite(rough)
    slope[~valid] = np.nan
    rough[~valid] = np.nan
    with np.errstate(invalid="ignore"):
        is_safe = valid & (slope < thresholds.slope_max) & (rough < thresholds.roughness_max)
    return SafetyTruth(spec, slope, rough, is_safe, valid, thresholds)


# ---------------------------------------------------------------------------
# analytic map


def _query_offsets(table: QuadFormTable):
    """Union of pad and footprint offsets; index arrays for slope and roughness blocks."""
    T, P, _ = table.pad_xy.shape
    pads = table.pad_xy.reshape(-1, 2)
    offsets = np.concatenate([pads, table.footprint])
    pad_index = np.arange(T * P).reshape(T, P)
    foot_index = T * P + np.arange(len(table.footprint))

    slope_idx = pad_index[:, table.triples]            # (T, K, 3)
    ent_t, ent_k, ent_u = [], [], []
    for ti in range(T):
        for ki in range(len(table.triples)):
            for ui in np.flatnonzero(table.member[ti]):
                ent_t.append(ti)
                ent_k.append(ki)
                ent_u.append(ui)
    ent_t, ent_k, ent_u = map(np.array, (ent_t, ent_k, ent_u))
    rough_idx = np.concatenate([slope_idx[ent_t, ent_k], foot_index[ent_u][:, None]], axis=1)  # (E, 4)
    return offsets, slope_idx, rough_idx, (ent_t, ent_k, ent_u)


def _raise(p, k):
    return np.power(p, k)


def apply_raising_factors(raw: SafetyMap, factors: RaisingFactors) -> SafetyMap:
    """Slope probability to the power k1, roughness to k1*k2; combined as the product."""
    if raw.meta.get("factors", [1.0, 1.0]) != [1.0, 1.0]:
        raise StateError("raising factors must be applied to an unraised (k1 = k2 = 1) map")
    ps = _raise(raw.p_slope, factors.k1)
    pr = _raise(raw.p_roughness, factors.k1 * factors.k2)
    meta = dict(raw.meta, factors=[factors.k1, factors.k2])
    return _masked_map(raw.spec, ps, pr, ps * pr, raw.valid, meta)


def model_valid_mask(model: GrfModel, geom: LanderGeometry, spec: GridSpec) -> np.ndarray:
    return grid_disk_mask(spec, geom.footprint_radius) & hull_disk_mask(
        spec, model.train_locations, geom.footprint_radius)


def shd_map(model: Optional[GrfModel], geom: LanderGeometry, thresholds: SafetyThresholds,
            factors: RaisingFactors = RaisingFactors(), grid=None, denom_mode: str = "paper",
            conservative_fourth_pad: bool = False, threads: Optional[int] = None,
            window_ells: float = 5.0) -> SafetyMap:
    """Analytic per-pixel safety probabilities from the GRF posterior."""
    if model is None:
        raise StateError("shd_map needs a fitted GRF model")
    if denom_mode not in ("paper", "standard"):
        raise ParameterError(f"denom_mode must be 'paper' or 'standard', got {denom_mode!r}")
    spec = _as_spec(grid)
    table = precompute(geom, thresholds.slope_max, thresholds.roughness_max)
    offsets, slope_idx, rough_idx, (ent_t, ent_k, ent_u) = _query_offsets(table)
    A = table.A                                  # (T, K, 3, 3)
    B = table.B[ent_t, ent_k, ent_u]             # (E, 4, 4)
    tau_r = table.tau_r[ent_t, ent_k]            # (E,)
    k_self = kernel_matrix(offsets, offsets, model.params)

    valid = model_valid_mask(model, geom, spec)
    rows, cols = _targets(valid)
    centers = np.column_stack(spec.cell_xy(rows, cols))
    T, K = table.tau_s.shape
    four = table.others[0] >= 0
    other_idx = np.arange(T * table.pad_xy.shape[1]).reshape(T, -1)[:, table.others] if four else None

    def run(batch):
        b_centers = centers[batch]
        nb = len(b_centers)
        q = (b_centers[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        nq = len(offsets)
        if model.is_dense:
            ks, v = model.cross_solve(q)
            means = (model.prior_mean + ks @ model._alpha).reshape(nb, nq)
            vb = v.reshape(v.shape[0], nb, nq)
            covs = k_self[None] - np.einsum("nbi,nbj->bij", vb, vb)
        else:
            means = np.empty((nb, nq))
            covs = np.empty((nb, nq, nq))
            for i, c in enumerate(b_centers):
                sub = model.local(c, window_ells * model.params.ell + geom.footprint_radius)
                post = condition(sub, c + offsets)
                means[i], covs[i] = post.mean, post.covariance
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))

        mu_s = means[:, slope_idx]                                        # (b, T, K, 3)
        cov_s = covs[:, slope_idx[..., :, None], slope_idx[..., None, :]]  # (b, T, K, 3, 3)
        m_s, v_s = _moments(mu_s, cov_s, A[None])
        if np.any(v_s < 0):
            raise NumericalError("negative slope quadratic-form variance")
        p_s = _gaussian_prob(table.tau_s[None], m_s, v_s, denom_mode)     # (b, T, K)

        mu_r = means[:, rough_idx]
        cov_r = covs[:, rough_idx[:, :, None], rough_idx[:, None, :]]
        m_r, v_r = _moments(mu_r, cov_r, B[None])
        if np.any(v_r < 0):
            raise NumericalError("negative roughness quadratic-form variance")
        p_r = _gaussian_prob(tau_r[None], m_r, v_r, denom_mode)           # (b, E)

        if four:
            z_pads = means[:, slope_idx]                                   # (b, T, K, 3)
            h = _plane_height(table.pad_xy[:, table.triples][None], z_pads,
                              table.pad_xy[np.arange(T)[:, None], table.others[None, :]][None])
            z4 = means[:, other_idx]
            if conservative_fourth_pad:
                var4 = np.diagonal(covs, axis1=1, axis2=2)[:, other_idx]
                z4 = z4 - 3.0 * np.sqrt(np.clip(var4, 0.0, None))
            feasible = ~(z4 < h - 1e-12)                                   # (b, T, K)
        else:
            feasible = np.ones((nb, T, K), dtype=bool)
        any_feasible = feasible.any(axis=(1, 2))
        p_slope = np.where(feasible, p_s, np.inf).reshape(nb, -1).min(axis=1)
        p_rough = np.where(feasible[:, ent_t, ent_k], p_r, np.inf).min(axis=1)
        # no feasible contact configuration at any orientation: treat as unsafe
        p_slope = np.where(any_feasible, p_slope, 0.0)
        p_rough = np.where(any_feasible, p_rough, 0.0)
        return p_slope, p_rough

    batches = [np.arange(i, min(i + TARGET_BATCH, len(rows))) for i in range(0, len(rows), TARGET_BATCH)]
    results = _parallel_map(run, batches, threads)
    ps = np.full(spec.shape, np.nan)
    pr = np.full(spec.shape, np.nan)
    if results:
        ps[rows, cols] = np.concatenate([r[0] for r in results])
        pr[rows, cols] = np.concatenate([r[1] for r in results])
    raw = _masked_map(spec, ps, pr, ps * pr, valid, {
        "kind": "shd", "denom_mode": denom_mode, "factors": [1.0, 1.0],
        "n_orientations": geom.n_orientations, "thresholds": thresholds.to_dict(),
        "geometry": geom.to_dict()})
    if factors.k1 == 1.0 and factors.k2 == 1.0:
        return raw
    return apply_raising_factors(raw, factors)


# ---------------------------------------------------------------------------
# Monte-Carlo oracle


def mc_safety_map(model: Optional[GrfModel], geom: LanderGeometry, thresholds: SafetyThresholds,
                  n_samples: int = 100, seed: int = 0, grid=None,
                  threads: Optional[int] = None) -> SafetyMap:
    """Per-pixel pass fractions over posterior terrain draws on the target grid."""
    if model is None:
        raise StateError("mc_safety_map needs a fitted GRF model")
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    spec = _as_spec(grid)
    n_query = spec.n_rows * spec.n_cols
    if n_query > MAX_MC_QUERY:
        raise CapacityError(f"joint sampling over {n_query} grid cells exceeds the cap {MAX_MC_QUERY}")
    post = condition(model, spec.coordinates())
    chol = posterior_factor(post.covariance)

    table = precompute(geom, thresholds.slope_max, thresholds.roughness_max)
    st = _build_stencils(table, spec.resolution)
    valid = model_valid_mask(model, geom, spec)
    rows, cols = _targets(valid)
    ok = _stencil_ok(spec, rows, cols, st)
    valid[rows[~ok], cols[~ok]] = False
    rows, cols = rows[ok], cols[ok]

    def run(chunk):
        start, stop = chunk
        eta = stream(seed, "mc_safety_map", start).standard_normal((stop - start, n_query))
        fields = (post.mean[None, :] + eta @ chol.T).reshape(-1, *spec.shape)
        s, r = _evaluate_fields(fields, rows, cols, table, st)
        s_ok = s < thresholds.slope_max
        r_ok = r < thresholds.roughness_max
        return s_ok.sum(axis=0), r_ok.sum(axis=0), (s_ok & r_ok).sum(axis=0)

    chunks = [(i, min(i + SAMPLE_BATCH, n_samples)) for i in range(0, n_samples, SAMPLE_BATCH)]
    counts = np.zeros((3, len(rows)), dtype=np.int64)
    for res in _parallel_map(run, chunks, threads):
        counts += np.stack(res)
    out = np.full((3,) + spec.shape, np.nan)
    out[:, rows, cols] = counts / n_samples
    return _masked_map(spec, out[0], out[1], out[2], valid,
                       {"kind": "mc", "n_samples": n_samples, "seed": seed,
                        "n_orientations": geom.n_orientations, "thresholds": thresholds.to_dict(),
                        "geometry": geom.to_dict()})


# ---------------------------------------------------------------------------
# baseline


def baseline_map(pcd: PointCloud, geom: LanderGeometry, thresholds: SafetyThresholds, grid=None) -> SafetyMap:
    """Bilinear reconstruction followed by the deterministic evaluator (0/1 map)."""
    spec = _as_spec(grid)
    truth = deterministic_eval(bilinear_upsample(pcd, spec), geom, thresholds)
    m = truth.as_map()
    return SafetyMap(m.spec, m.p_slope, m.p_roughness, m.p_safe, m.valid,
                     {"kind": "baseline", "n_orientations": geom.n_orientations,
                      "thresholds": thresholds.to_dict(), "geometry": geom.to_dict()})


# ---------------------------------------------------------------------------
# persistence

MAP_CHANNELS = ("p_slope", "p_roughness", "p_safe")


def save_safety_map(smap: SafetyMap, directory, extra_meta: Optional[dict] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in MAP_CHANNELS:
        save_dem(DemGrid(smap.spec, getattr(smap, name)), d / f"{name}.grd")
    meta = dict(smap.meta)
    meta.update(extra_meta or {})
    meta["grid"] = smap.spec.to_dict()
    (d / "map.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_safety_map(directory) -> SafetyMap:
    d = Path(directory)
    grids = {name: load_dem(d / f"{name}.grd") for name in MAP_CHANNELS}
    meta = json.loads((d / "map.json").read_text())
    spec = grids["p_slope"].spec
    valid = np.isfinite(grids["p_slope"].elevations)
    return SafetyMap(spec, *(grids[n].elevations for n in MAP_CHANNELS), valid, meta)


def save_truth(truth: SafetyTruth, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_dem(DemGrid(truth.spec, truth.slope), d / "slope.grd")
    save_dem(DemGrid(truth.spec, truth.roughness), d / "roughness.grd")
    (d / "truth.json").write_text(json.dumps({"thresholds": truth.thresholds.to_dict(),
                                              "grid": truth.spec.to_dict()}, indent=2) + "\n")


def load_truth(directory) -> SafetyTruth:
    d = Path(directory)
    meta = json.loads((d / "truth.json").read_text())
    th = SafetyThresholds.from_degrees(meta["thresholds"]["slope_max_deg"], meta["thresholds"]["roughness_max_m"])
    slope = load_dem(d / "slope.grd").elevations
    rough = load_dem(d / "roughness.grd").elevations
    valid = np.isfinite(slope) & np.isfinite(rough)
    with np.errstate(invalid="ignore"):
        is_safe = valid & (slope < th.slope_max) & (rough < th.roughness_max)
    return SafetyTruth(GridSpec(**meta["grid"]), slope, rough, is_safe, valid, th)
