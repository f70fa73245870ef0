import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grfhd.errors import DegenerateInputError, ParameterError
from grfhd.lander import (LanderGeometry, PadSet, build_A, build_B, footprint_points, pad_locations,
                          precompute, roughness_matrix, slope_matrix)


def normal(xy, z):
    p = np.column_stack([xy[:3], z[:3]])
    return np.cross(p[1] - p[0], p[2] - p[0])


def plane_offset(xy, z, gp, zp):
    a, b, c = normal(xy, z)
    return a * (gp[0] - xy[0, 0]) + b * (gp[1] - xy[0, 1]) + c * (zp - z[0]), a, b, c


def test_regular_triangle_normal():
    pads = pad_locations(LanderGeometry(pad_radius=5.0), 0.0)
    assert pads.c == pytest.approx(64.9519, abs=1e-4)
    assert pads.c == pytest.approx(1.5 * math.sqrt(3) * 25, rel=1e-12)


def test_geometry_validation():
    with pytest.raises(ParameterError):
        LanderGeometry(n_pads=5)
    with pytest.raises(ParameterError):
        LanderGeometry(pad_radius=2.0, footprint_radius=1.0)
    with pytest.raises(DegenerateInputError):
        LanderGeometry(footprint_step=0.0)
    assert LanderGeometry(n_pads=4).period == pytest.approx(math.pi / 2)
    assert len(LanderGeometry(n_pads=4).triples()) == 4


def test_geometry_dict_round_trip():
    g = LanderGeometry(4, 3.0, 3.5, 12, 0.5)
    assert LanderGeometry.from_dict(g.to_dict()) == g


def brute_force_footprint(geom, theta):
    pads = pad_locations(geom, theta).pad_xy
    n = int(geom.pad_radius // geom.footprint_step) + 1
    out = []
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            p = np.array([i, j]) * geom.footprint_step
            if min(np.hypot(*(pads - p).T)) <= 1e-9:
                continue
            inside = all(
                (pads[(k + 1) % len(pads)][0] - pads[k][0]) * (p[1] - pads[k][1])
                - (pads[(k + 1) % len(pads)][1] - pads[k][1]) * (p[0] - pads[k][0]) >= -1e-9
                for k in range(len(pads)))
            if inside or (i == 0 and j == 0):
                out.append(tuple(p))
    return sorted(out)


@pytest.mark.parametrize("n_pads,theta,step", [(3, 0.0, 1.0), (3, 0.4, 1.0), (4, 0.3, 0.5), (3, 1.0, 2.5)])
def test_footprint_matches_enumeration(n_pads, theta, step):
    geom = LanderGeometry(n_pads=n_pads, pad_radius=5.0, footprint_step=step)
    got = sorted(map(tuple, footprint_points(geom, theta)))
    assert got == brute_force_footprint(geom, theta)
    assert (0.0, 0.0) in got


def test_footprint_step_beyond_hull_keeps_centre():
    pts = footprint_points(LanderGeometry(pad_radius=1.0, footprint_step=5.0), 0.2)
    assert pts.tolist() == [[0.0, 0.0]]


def random_pads(rng):
    while True:
        xy = rng.uniform(-6, 6, (3, 2))
        c = (xy[1, 0] - xy[0, 0]) * (xy[2, 1] - xy[0, 1]) - (xy[2, 0] - xy[0, 0]) * (xy[1, 1] - xy[0, 1])
        if c > 1.0:
            return xy


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_slope_matrix_expands_normal(seed):
    rng = np.random.default_rng(seed)
    xy = random_pads(rng)
    z = rng.normal(size=3)
    a, b, _ = normal(xy, z)
    assert z @ slope_matrix(xy) @ z == pytest.approx(a * a + b * b, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 1.0))
def test_roughness_matrix_expands_offset(seed, r):
    rng = np.random.default_rng(seed)
    xy = random_pads(rng)
    gp = rng.uniform(-4, 4, 2)
    z = rng.normal(size=4)
    off, a, b, _ = plane_offset(xy, z, gp, z[3])
    expected = off ** 2 - r * r * (a * a + b * b)
    assert z @ roughness_matrix(xy, gp, r) @ z == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_b44_is_c_squared_and_thresholds():
    pads = pad_locations(LanderGeometry(), 0.3)
    qb = build_B(pads, [0.5, -0.2], 0.3)
    assert qb.B[3, 3] == pytest.approx(pads.c ** 2, rel=1e-12)
    assert qb.tau_r == pytest.approx(0.09 * pads.c ** 2, rel=1e-12)
    qa = build_A(pads, math.radians(10))
    assert qa.tau_s == pytest.approx(pads.c ** 2 * math.tan(math.radians(10)) ** 2, rel=1e-12)


def test_roughness_is_zero_on_plane():
    pads = pad_locations(LanderGeometry(), 0.0)
    z = 0.1 * pads.pad_xy[:, 0] - 0.3 * pads.pad_xy[:, 1] + 2.0
    gp = np.array([0.7, 1.1])
    zp = 0.1 * gp[0] - 0.3 * gp[1] + 2.0
    Z = np.append(z, zp)
    off, *_ = plane_offset(pads.pad_xy, z, gp, zp)
    assert abs(off) < 1e-12
    assert Z @ roughness_matrix(pads.pad_xy, gp, 0.0) @ Z == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-100, 100), st.floats(-100, 100))
def test_translation_invariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    xy = random_pads(rng)
    gp = rng.uniform(-4, 4, 2)
    shift = np.array([dx, dy])
    assert np.allclose(slope_matrix(xy + shift), slope_matrix(xy), rtol=1e-9, atol=1e-7)
    assert np.allclose(roughness_matrix(xy + shift, gp + shift, 0.3), roughness_matrix(xy, gp, 0.3),
                       rtol=1e-8, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10))
def test_slope_matrix_scales_quadratically(seed, s):
    xy = random_pads(np.random.default_rng(seed))
    assert np.allclose(slope_matrix(s * xy), s * s * slope_matrix(xy), rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_slope_matrix_psd(seed):
    a = slope_matrix(random_pads(np.random.default_rng(seed)))
    assert np.allclose(a, a.T)
    assert np.linalg.eigvalsh(a).min() >= -1e-9 * np.trace(a)


def test_collinear_pads_rejected():
    pads = PadSet(0.0, np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(DegenerateInputError):
        build_A(pads, 0.1)
    with pytest.raises(DegenerateInputError):
        build_B(pads, [0, 0], 0.3)


def test_precompute_shapes_and_membership():
    geom = LanderGeometry(n_pads=4, pad_radius=2.0, n_orientations=6, footprint_step=1.0)
    t = precompute(geom, math.radians(10), 0.3)
    T, K, U = 6, 4, len(t.footprint)
    assert t.A.shape == (T, K, 3, 3) and t.B.shape == (T, K, U, 4, 4)
    assert sorted(t.others.tolist()) == [0, 1, 2, 3]
    for ti, theta in enumerate(t.thetas):
        fp = {tuple(p) for p in np.round(footprint_points(geom, theta), 12)}
        assert {tuple(p) for p in np.round(t.footprint[t.member[ti]], 12)} == fp
    assert np.all(t.B[~np.broadcast_to(t.member[:, None, :], (T, K, U))] == 0)
