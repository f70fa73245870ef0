"""Lander geometry and the quadratic-form matrices for slope and roughness safety.

Conventions: pads are ordered counterclockwise in a target-centred frame, and
``x_ij = x_j - x_i``. With pads l1, l2, l3 the landing-plane normal is
``(a, b, c) = (l2 - l1) x (l3 - l1)`` where ``c = x12*y13 - x13*y12 > 0``.
Slope safety is ``Z^T A Z < tau_s`` for ``Z = (z1, z2, z3)`` and roughness
safety at a footprint point is ``Z^T B Z < tau_r`` for ``Z = (z1, z2, z3, zp)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, ParameterError

COLLINEAR_TOL = 1e-12


@dataclass(frozen=True)
class LanderGeometry:
    n_pads: int = 3
    pad_radius: float = 5.0
    footprint_radius: Optional[float] = None
    n_orientations: int = 24
    footprint_step: float = 1.0

    def __post_init__(self):
        if self.n_pads not in (3, 4):
            raise ParameterError(f"n_pads must be 3 or 4, got {self.n_pads}")
        if not self.pad_radius > 0:
            raise ParameterError("pad_radius must be positive")
        if self.footprint_radius is None:
            object.__setattr__(self, "footprint_radius", float(self.pad_radius))
        if self.footprint_radius < self.pad_radius:
            raise ParameterError("footprint_radius must be >= pad_radius")
        if self.n_orientations < 1:
            raise ParameterError("n_orientations must be >= 1")
        if not (self.footprint_step > 0 and math.isfinite(self.footprint_step)):
            raise DegenerateInputError("footprint_step must be positive")

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.n_pads

    def orientations(self) -> np.ndarray:
        return np.arange(self.n_orientations) * (self.period / self.n_orientations)

    def triples(self) -> list[tuple[int, int, int]]:
        """Pad triples that may carry the lander, in counterclockwise index order."""
        return list(combinations(range(self.n_pads), 3))

    def to_dict(self) -> dict:
        return {"n_pads": self.n_pads, "pad_radius_m": self.pad_radius,
                "footprint_radius_m": self.footprint_radius,
                "n_orientations": self.n_orientations, "footprint_step_m": self.footprint_step}

    @classmethod
    def from_dict(cls, d: dict) -> "LanderGeometry":
        return cls(n_pads=int(d["n_pads"]), pad_radius=float(d["pad_radius_m"]),
                   footprint_radius=d.get("footprint_radius_m"),
                   n_orientations=int(d["n_orientations"]), footprint_step=float(d["footprint_step_m"]))


@dataclass(frozen=True)
class PadSet:
    theta: float
    pad_xy: np.ndarray

    @property
    def c(self) -> float:
        return normal_z(self.pad_xy)

    def select(self, idx) -> "PadSet":
        return PadSet(self.theta, self.pad_xy[list(idx)])


def normal_z(xy: np.ndarray) -> float:
    x12, y12 = xy[1] - xy[0]
    x13, y13 = xy[2] - xy[0]
    return float(x12 * y13 - x13 * y12)


def pad_locations(geom: LanderGeometry, theta: float) -> PadSet:
    ang = theta + np.arange(geom.n_pads) * (2.0 * math.pi / geom.n_pads)
    return PadSet(float(theta), geom.pad_radius * np.column_stack([np.cos(ang), np.sin(ang)]))


def in_convex_polygon(points: np.ndarray, poly: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Point-in-polygon test for a counterclockwise convex polygon (boundary included)."""
    points = np.atleast_2d(points)
    inside = np.ones(len(points), dtype=bool)
    for i in range(len(poly)):
        p, q = poly[i], poly[(i + 1) % len(poly)]
        cross = (q[0] - p[0]) * (points[:, 1] - p[1]) - (q[1] - p[1]) * (points[:, 0] - p[0])
        inside &= cross >= -tol
    return inside


def footprint_points(geom: LanderGeometry, theta: float) -> np.ndarray:
    """Lattice points of pitch ``footprint_step`` under the lander body at ``theta``.

    Always contains the target centre; points coinciding with a pad are dropped.
    """
    pads = pad_locations(geom, theta).pad_xy
    step = geom.footprint_step
    n = int(math.floor(geom.pad_radius / step + 1e-9))
    ax = np.arange(-n, n + 1) * step
    gx, gy = np.meshgrid(ax, ax)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    keep = in_convex_polygon(pts, pads)
    d_pad = np.min(np.hypot(pts[:, None, 0] - pads[None, :, 0], pts[:, None, 1] - pads[None, :, 1]), axis=1)
    keep &= d_pad > 1e-9
    keep |= (pts[:, 0] == 0) & (pts[:, 1] == 0)
    return pts[keep]


@dataclass(frozen=True)
class QuadFormSlope:
    theta: float
    A: np.ndarray
    tau_s: float


@dataclass(frozen=True)
class QuadFormRoughness:
    theta: float
    gamma_p: np.ndarray
    B: np.ndarray
    tau_r: float


def _diffs(xy: np.ndarray):
    x12, y12 = xy[1] - xy[0]
    x13, y13 = xy[2] - xy[0]
    x23, y23 = xy[2] - xy[1]
    return x12, y12, x13, y13, x23, y23


def _checked_c(xy) -> float:
    c = normal_z(xy)
    if abs(c) < COLLINEAR_TOL:
        raise DegenerateInputError(f"collinear pads (c = {c:.3g})")
    return c


def slope_matrix(xy: np.ndarray) -> np.ndarray:
    """Matrix A with Z^T A Z = a^2 + b^2 for the first three pads in ``xy``."""
    x12, y12, x13, y13, x23, y23 = _diffs(xy)
    a12 = -x13 * x23 - y13 * y23
    a13 = x12 * x23 + y12 * y23
    a23 = -x12 * x13 - y12 * y13
    return np.array([
        [x23 ** 2 + y23 ** 2, a12, a13],
        [a12, x13 ** 2 + y13 ** 2, a23],
        [a13, a23, x12 ** 2 + y12 ** 2],
    ])


def build_A(pads: PadSet, slope_threshold: float) -> QuadFormSlope:
    if not 0.0 < slope_threshold < math.pi / 2:
        raise ParameterError("slope threshold must lie in (0, pi/2)")
    xy = pads.pad_xy[:3]
    c = _checked_c(xy)
    return QuadFormSlope(pads.theta, slope_matrix(xy), c * c * math.tan(slope_threshold) ** 2)


def roughness_matrix(xy: np.ndarray, gamma_p, r_max: float) -> np.ndarray:
    """Matrix B with Z^T B Z = (a x1p + b y1p + c (zp - z1))^2 - r^2 (a^2 + b^2)."""
    x12, y12, x13, y13, x23, y23 = _diffs(xy)
    x1p = gamma_p[0] - xy[0, 0]
    y1p = gamma_p[1] - xy[0, 1]
    c = x12 * y13 - x13 * y12
    r2 = r_max * r_max
    p12 = x1p * y12 - x12 * y1p
    p13 = x1p * y13 - x13 * y1p
    p23 = x1p * y23 - x23 * y1p

    b11 = p23 ** 2 - r2 * (x23 ** 2 + y23 ** 2) + c ** 2 - 2 * c * p23
    b22 = p13 ** 2 - r2 * (x13 ** 2 + y13 ** 2)
    b33 = p12 ** 2 - r2 * (x12 ** 2 + y12 ** 2)
    b44 = c ** 2
    b12 = -p13 * (p23 - c) + r2 * (x13 * x23 + y13 * y23)
    b13 = p12 * (p23 - c) - r2 * (x12 * x23 + y12 * y23)
    b14 = c * (p23 - c)
    b23 = (-(x1p ** 2 - r2) * y12 * y13 - (y1p ** 2 - r2) * x12 * x13
           + x1p * y1p * (x12 * y13 + x13 * y12))
    b24 = -c * p13
    b34 = c * p12
    return np.array([
        [b11, b12, b13, b14],
        [b12, b22, b23, b24],
        [b13, b23, b33, b34],
        [b14, b24, b34, b44],
    ])


def build_B(pads: PadSet, gamma_p, roughness_threshold: float) -> QuadFormRoughness:
    if not roughness_threshold > 0:
        raise ParameterError("roughness threshold must be positive")
    xy = pads.pad_xy[:3]
    c = _checked_c(xy)
    gp = np.asarray(gamma_p, dtype=np.float64)
    return QuadFormRoughness(pads.theta, gp, roughness_matrix(xy, gp, roughness_threshold),
                             roughness_threshold ** 2 * c * c)


@dataclass(frozen=True)
class QuadFormTable:
    """Per-orientation matrices and thresholds for map evaluation, in target-centred coordinates.

    Shapes: ``T`` orientations, ``P`` pads, ``K`` pad triples, ``U`` footprint
    points in the union over orientations.
    """

    geometry: LanderGeometry
    thetas: np.ndarray         # (T,)
    pad_xy: np.ndarray         # (T, P, 2)
    triples: np.ndarray        # (K, 3) pad indices
    others: np.ndarray         # (K,) remaining pad for 4-pad landers, -1 otherwise
    A: np.ndarray              # (T, K, 3, 3)
    tau_s: np.ndarray          # (T, K)
    footprint: np.ndarray      # (U, 2)
    member: np.ndarray         # (T, U) bool
    B: np.ndarray              # (T, K, U, 4, 4), zero where not a member
    tau_r: np.ndarray          # (T, K)


def precompute(geom: LanderGeometry, slope_max: float, roughness_max: float) -> QuadFormTable:
    thetas = geom.orientations()
    pads = [pad_locations(geom, t) for t in thetas]
    per_theta_fp = [footprint_points(geom, t) for t in thetas]
    union = np.unique(np.round(np.concatenate(per_theta_fp), 12), axis=0)
    member = np.zeros((len(thetas), len(union)), dtype=bool)
    for ti, fp in enumerate(per_theta_fp):
        keys = {tuple(p) for p in np.round(fp, 12)}
        member[ti] = [tuple(p) in keys for p in union]

    triples = np.array(geom.triples())
    others = np.array([next(iter(set(range(geom.n_pads)) - set(t)), -1) for t in triples.tolist()])
    T, K, U = len(thetas), len(triples), len(union)
    A = np.zeros((T, K, 3, 3))
    tau_s = np.zeros((T, K))
    B = np.zeros((T, K, U, 4, 4))
    tau_r = np.zeros((T, K))
    for ti, ps in enumerate(pads):
        for ki, tri in enumerate(triples):
            sub = ps.select(tri)
            qa = build_A(sub, slope_max)
            A[ti, ki], tau_s[ti, ki] = qa.A, qa.tau_s
            tau_r[ti, ki] = roughness_max ** 2 * sub.c ** 2
            for ui in np.flatnonzero(member[ti]):
                B[ti, ki, ui] = roughness_matrix(sub.pad_xy, union[ui], roughness_max)
    return QuadFormTable(geom, thetas, np.stack([p.pad_xy for p in pads]), triples, others,
                         A, tau_s, union, member, B, tau_r)
