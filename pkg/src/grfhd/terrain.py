"""Terrain rasters, sparse point clouds, synthetic terrain and LiDAR emulation."""

from __future__ import annotations

import csv
import gzip
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from ._rng import stream
from .errors import DegenerateInputError, FormatError, ParameterError, StructureError

MAGIC = "GRFHD1"
NODATA_SENTINEL = -32768.0
PLAUSIBLE_ABS_ELEVATION = 1.0e4


@dataclass(frozen=True)
class GridSpec:
    n_rows: int
    n_cols: int
    resolution: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.n_rows < 2 or self.n_cols < 2:
            raise ParameterError(f"grid must be at least 2x2, got {self.n_rows}x{self.n_cols}")
        if not (self.resolution > 0 and math.isfinite(self.resolution)):
            raise ParameterError(f"resolution must be positive, got {self.resolution}")
        if not (math.isfinite(self.origin_x) and math.isfinite(self.origin_y)):
            raise ParameterError("origin must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def xs(self) -> np.ndarray:
        return self.origin_x + np.arange(self.n_cols) * self.resolution

    @property
    def ys(self) -> np.ndarray:
        return self.origin_y + np.arange(self.n_rows) * self.resolution

    def cell_xy(self, row, col):
        return (self.origin_x + np.asarray(col) * self.resolution,
                self.origin_y + np.asarray(row) * self.resolution)

    def coordinates(self) -> np.ndarray:
        """(n_rows*n_cols, 2) array of cell positions in row-major order."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def to_dict(self) -> dict:
        return dict(n_rows=self.n_rows, n_cols=self.n_cols, resolution=self.resolution,
                    origin_x=self.origin_x, origin_y=self.origin_y)


@dataclass(frozen=True, eq=False)
class DemGrid:
    """Uniform elevation raster. NaN marks nodata."""

    spec: GridSpec
    elevations: np.ndarray
    max_abs_elevation: float = field(default=PLAUSIBLE_ABS_ELEVATION, repr=False)

    def __post_init__(self):
        z = np.array(self.elevations, dtype=np.float64, copy=True)
        if z.ndim == 1 and z.size == self.spec.n_rows * self.spec.n_cols:
            z = z.reshape(self.spec.shape)
        if z.shape != self.spec.shape:
            raise ParameterError(f"elevations shape {z.shape} does not match grid {self.spec.shape}")
        if np.isinf(z).any():
            raise ParameterError("elevations contain infinities")
        finite = z[np.isfinite(z)]
        if finite.size and np.abs(finite).max() >= self.max_abs_elevation:
            raise ParameterError(f"elevation outside plausibility bound |z| < {self.max_abs_elevation}")
        z.flags.writeable = False
        object.__setattr__(self, "elevations", z)

    @classmethod
    def from_array(cls, z, resolution: float = 1.0, origin_x: float = 0.0, origin_y: float = 0.0):
        z = np.asarray(z, dtype=np.float64)
        return cls(GridSpec(z.shape[0], z.shape[1], float(resolution), float(origin_x), float(origin_y)), z)

    @property
    def n_rows(self):
        return self.spec.n_rows

    @property
    def n_cols(self):
        return self.spec.n_cols

    @property
    def resolution(self):
        return self.spec.resolution

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.elevations)

    def __eq__(self, other):
        if not isinstance(other, DemGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.elevations, other.elevations, equal_nan=True)

    def sample(self, x, y) -> np.ndarray:
        """Bilinear interpolation at (x, y); NaN outside the raster."""
        return bilinear_sample(self.elevations, self.spec, x, y)


def _as_spec(template) -> GridSpec:
    if isinstance(template, GridSpec):
        return template
    if isinstance(template, DemGrid):
        return template.spec
    if isinstance(template, dict):
        return GridSpec(**template)
    raise ParameterError(f"cannot interpret {type(template).__name__} as a grid spec")


def bilinear_sample(z: np.ndarray, spec: GridSpec, x, y) -> np.ndarray:
    """Bilinear interpolation of raster ``z`` (leading dims allowed) at points (x, y).

    Terms with an exactly-zero weight are dropped, so sampling at a node returns
    the node value even when a neighbour is nodata.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fc = (x - spec.origin_x) / spec.resolution
    fr = (y - spec.origin_y) / spec.resolution
    tol = 1e-9
    inside = (fc >= -tol) & (fc <= spec.n_cols - 1 + tol) & (fr >= -tol) & (fr <= spec.n_rows - 1 + tol)
    fc = np.clip(fc, 0, spec.n_cols - 1)
    fr = np.clip(fr, 0, spec.n_rows - 1)
    c0 = np.minimum(np.floor(fc).astype(np.intp), spec.n_cols - 2)
    r0 = np.minimum(np.floor(fr).astype(np.intp), spec.n_rows - 2)
    tc = fc - c0
    tr = fr - r0
    out = 0.0
    for dr, wr in ((0, 1.0 - tr), (1, tr)):
        for dc, wc in ((0, 1.0 - tc), (1, tc)):
            w = wr * wc
            v = z[..., r0 + dr, c0 + dc]
            out = out + np.where(w == 0.0, 0.0, w * v)
    return np.where(inside, out, np.nan)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Sparse elevation samples with a shared noise standard deviation."""

    points: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.isfinite(p).all():
            raise ParameterError("point coordinates must be finite")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(p) > 1:
            xy = np.ascontiguousarray(p[:, :2]).view([("x", "f8"), ("y", "f8")]).ravel()
            if np.unique(xy).size != len(p):
                raise ParameterError("duplicate (x, y) locations in point cloud")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.noise_sigma == other.noise_sigma and np.array_equal(self.points, other.points)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]


# ---------------------------------------------------------------------------
# synthesis


def generate_fractal_terrain(seed: int, n_rows: int, n_cols: int, resolution: float = 1.0,
                             hurst: float = 0.8, amplitude: float = 1.0,
                             rock_spec: Optional[dict] = None, tilt_deg: float = 0.0,
                             tilt_azimuth_deg: float = 0.0) -> DemGrid:
    """Spectral fractional-Brownian surface with optional hemispherical rocks.

    ``rock_spec`` keys: ``count``, ``height_range`` (m), ``radius_range`` (m).
    ``tilt_deg`` adds a regional planar ramp dipping toward ``tilt_azimuth_deg``
    (counterclockwise from +x).
    The field is synthesised on a doubled domain and cropped to avoid
    periodic wrap-around, then rescaled to RMS ``amplitude``. Output values
    are rounded to float32 so the grid file round-trip is exact.
    """
    spec = GridSpec(int(n_rows), int(n_cols), float(resolution))
    if not (0.0 < hurst <= 1.0):
        raise ParameterError(f"hurst must lie in (0, 1], got {hurst}")
    if not (amplitude >= 0.0 and math.isfinite(amplitude)):
        raise ParameterError(f"amplitude must be non-negative, got {amplitude}")

    z = np.zeros(spec.shape)
    if amplitude > 0:
        rng = stream(seed, "generate_fractal_terrain")
        ny, nx = 2 * n_rows, 2 * n_cols
        noise = rng.standard_normal((ny, nx))
        ky = np.fft.fftfreq(ny, d=resolution)
        kx = np.fft.fftfreq(nx, d=resolution)
        k = np.hypot(*np.meshgrid(kx, ky))
        filt = np.zeros_like(k)
        filt[k > 0] = k[k > 0] ** (-(hurst + 1.0))
        field_ = np.fft.ifft2(np.fft.fft2(noise) * filt).real[:n_rows, :n_cols]
        field_ -= field_.mean()
        rms = math.sqrt(float(np.mean(field_ ** 2)))
        z = field_ * (amplitude / rms)

    if tilt_deg:
        if not abs(tilt_deg) < 90:
            raise ParameterError(f"tilt must lie in (-90, 90) degrees, got {tilt_deg}")
        az = math.radians(tilt_azimuth_deg)
        gx, gy = np.meshgrid(spec.xs, spec.ys)
        ramp = -math.tan(math.radians(tilt_deg)) * (gx * math.cos(az) + gy * math.sin(az))
        z = z + ramp - ramp.mean()
    if rock_spec:
        z = z + _rocks(seed, spec, **rock_spec)
    return DemGrid(spec, z.astype(np.float32).astype(np.float64))


def _rocks(seed, spec: GridSpec, count=0, height_range=(0.3, 0.6), radius_range=(0.5, 1.5)):
    rng = stream(seed, "generate_fractal_terrain.rocks")
    out = np.zeros(spec.shape)
    if count <= 0:
        return out
    (h_lo, h_hi), (r_lo, r_hi) = height_range, radius_range
    if h_lo < 0 or h_hi < h_lo or r_lo <= 0 or r_hi < r_lo:
        raise ParameterError("invalid rock height/radius ranges")
    gx, gy = np.meshgrid(spec.xs, spec.ys)
    xmax, ymax = spec.xs[-1], spec.ys[-1]
    for _ in range(int(count)):
        cx = rng.uniform(spec.origin_x, xmax)
        cy = rng.uniform(spec.origin_y, ymax)
        h = rng.uniform(h_lo, h_hi)
        r = rng.uniform(r_lo, r_hi)
        d2 = ((gx - cx) ** 2 + (gy - cy) ** 2) / r ** 2
        out = np.maximum(out, h * np.sqrt(np.clip(1.0 - d2, 0.0, None)))
    return out


def lattice_axis(start: float, stop: float, step: float) -> np.ndarray:
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + np.arange(n) * step


def simulate_lidar(dem: DemGrid, gsd: float, noise_sigma: float, seed: int,
                   hole_fraction: float = 0.0) -> PointCloud:
    """Sample ``dem`` on a ``gsd`` lattice, add Gaussian noise, drop points at random."""
    if not gsd >= dem.resolution * (1 - 1e-12):
        raise ParameterError(f"gsd {gsd} is finer than the DEM resolution {dem.resolution}")
    if not (0.0 <= hole_fraction < 1.0):
        raise ParameterError(f"hole_fraction must lie in [0, 1), got {hole_fraction}")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be >= 0")
    spec = dem.spec
    xs = lattice_axis(spec.origin_x, spec.xs[-1], gsd)
    ys = lattice_axis(spec.origin_y, spec.ys[-1], gsd)
    gx, gy = np.meshgrid(xs, ys)
    x, y = gx.ravel(), gy.ravel()
    z = dem.sample(x, y)

    if noise_sigma > 0:
        z = z + stream(seed, "simulate_lidar.noise").normal(0.0, noise_sigma, size=z.shape)
    keep = np.isfinite(z)
    if hole_fraction > 0:
        keep &= stream(seed, "simulate_lidar.holes").random(z.shape) >= hole_fraction
    if not keep.any():
        raise DegenerateInputError("no LiDAR points left after hole masking")
    return PointCloud(np.column_stack([x[keep], y[keep], z[keep]]), noise_sigma)


# ---------------------------------------------------------------------------
# baseline reconstruction


@dataclass(frozen=True)
class Lattice:
    x0: float
    y0: float
    spacing: float
    values: np.ndarray  # (ny, nx), NaN at holes

    @property
    def xs(self):
        return self.x0 + np.arange(self.values.shape[1]) * self.spacing

    @property
    def ys(self):
        return self.y0 + np.arange(self.values.shape[0]) * self.spacing


def _axis_index(v: np.ndarray, v0: float, spacing: float, name: str) -> np.ndarray:
    f = (v - v0) / spacing
    i = np.rint(f)
    if np.abs(f - i).max(initial=0.0) > 1e-6:
        raise StructureError(f"{name} coordinates are not on a uniform lattice")
    return i.astype(np.intp)


def to_lattice(pcd: PointCloud) -> Lattice:
    """Recover the uniform lattice underlying ``pcd`` (holes become NaN)."""
    if len(pcd) < 2:
        raise StructureError("need at least two points to infer a lattice")
    ux = np.unique(pcd.xy[:, 0])
    uy = np.unique(pcd.xy[:, 1])
    steps = [np.diff(u).min() for u in (ux, uy) if u.size > 1]
    spacing = float(min(steps))
    ix = _axis_index(pcd.xy[:, 0], ux[0], spacing, "x")
    iy = _axis_index(pcd.xy[:, 1], uy[0], spacing, "y")
    values = np.full((iy.max() + 1, ix.max() + 1), np.nan)
    values[iy, ix] = pcd.z
    return Lattice(float(ux[0]), float(uy[0]), spacing, values)


def bilinear_upsample(pcd: PointCloud, template) -> DemGrid:
    """Rebuild a raster from a lattice point cloud by bilinear interpolation.

    Cells whose four surrounding lattice nodes are not all present take the
    value of the nearest available node. Cells outside the lattice bounding
    box are nodata.
    """
    spec = _as_spec(template)
    lat = to_lattice(pcd)
    v = lat.values
    ny, nx = v.shape
    pos = spec.coordinates()
    fx = (pos[:, 0] - lat.x0) / lat.spacing
    fy = (pos[:, 1] - lat.y0) / lat.spacing
    tol = 1e-9
    inside = (fx >= -tol) & (fx <= nx - 1 + tol) & (fy >= -tol) & (fy <= ny - 1 + tol)
    fx = np.clip(fx, 0, nx - 1)
    fy = np.clip(fy, 0, ny - 1)
    i0 = np.minimum(np.floor(fx).astype(np.intp), max(nx - 2, 0))
    j0 = np.minimum(np.floor(fy).astype(np.intp), max(ny - 2, 0))
    tx = fx - i0
    ty = fy - j0
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)

    out = np.zeros(len(pos))
    complete = np.ones(len(pos), dtype=bool)
    for jj, wy in ((j0, 1.0 - ty), (j1, ty)):
        for ii, wx in ((i0, 1.0 - tx), (i1, tx)):
            val = v[jj, ii]
            complete &= np.isfinite(val)
            out += np.where(wy * wx == 0.0, 0.0, wy * wx * np.nan_to_num(val))

    need_fill = inside & ~complete
    if need_fill.any():
        avail = np.argwhere(np.isfinite(v))
        tree = cKDTree(np.column_stack([lat.xs[avail[:, 1]], lat.ys[avail[:, 0]]]))
        _, nn = tree.query(pos[need_fill])
        out[need_fill] = v[avail[nn, 0], avail[nn, 1]]
    out[~inside] = np.nan
    return DemGrid(spec, out.reshape(spec.shape))


# ---------------------------------------------------------------------------
# file formats

PathLike = Union[str, os.PathLike]


def _open(path: PathLike, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def save_dem(dem: DemGrid, path: PathLike) -> None:
    """Write the GRFHD1 grid format: text header, then little-endian float32 payload."""
    s = dem.spec
    header = (
        f"{MAGIC}\n"
        f"n_rows {s.n_rows}\n"
        f"n_cols {s.n_cols}\n"
        f"resolution {s.resolution!r}\n"
        f"origin_x {s.origin_x!r}\n"
        f"origin_y {s.origin_y!r}\n"
        f"nodata {NODATA_SENTINEL!r}\n"
        "dtype <f4\n"
        "end\n"
    )
    payload = np.where(np.isfinite(dem.elevations), dem.elevations, NODATA_SENTINEL).astype("<f4")
    with _open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes(order="C"))


_HEADER_KEYS = ("n_rows", "n_cols", "resolution", "origin_x", "origin_y", "nodata", "dtype")


def load_dem(path: PathLike) -> DemGrid:
    with _open(path, "rb") as fh:
        raw = fh.read()
    offset = 0
    fields = {}
    line_no = 0
    while True:
        nl = raw.find(b"\n", offset)
        if nl < 0:
            raise FormatError(f"{path}: header not terminated (line {line_no + 1}, byte {offset})")
        line = raw[offset:nl].decode("ascii", errors="replace").strip()
        line_no += 1
        offset = nl + 1
        if line_no == 1:
            if line != MAGIC:
                raise FormatError(f"{path}: bad magic {line!r} on line 1, expected {MAGIC}")
            continue
        if line == "end":
            break
        parts = line.split()
        if len(parts) != 2 or parts[0] not in _HEADER_KEYS:
            raise FormatError(f"{path}: malformed header line {line_no}: {line!r}")
        fields[parts[0]] = parts[1]
        if line_no > 32:
            raise FormatError(f"{path}: header too long")
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise FormatError(f"{path}: header missing {missing}")
    if fields["dtype"] != "<f4":
        raise FormatError(f"{path}: unsupported dtype {fields['dtype']!r}")
    try:
        n_rows, n_cols = int(fields["n_rows"]), int(fields["n_cols"])
        res = float(fields["resolution"])
        ox, oy = float(fields["origin_x"]), float(fields["origin_y"])
        nodata = float(fields["nodata"])
    except ValueError as exc:
        raise FormatError(f"{path}: unparsable header value ({exc})") from None
    expected = n_rows * n_cols * 4
    got = len(raw) - offset
    if got != expected:
        kind = "truncated" if got < expected else "oversized"
        raise FormatError(f"{path}: {kind} payload at byte {offset}: header declares "
                          f"{n_rows}x{n_cols} = {n_rows * n_cols} values, payload holds {got / 4:g}")
    z = np.frombuffer(raw, dtype="<f4", count=n_rows * n_cols, offset=offset).astype(np.float64)
    if np.isnan(z).any():
        raise FormatError(f"{path}: NaN in payload; nodata must use the sentinel {nodata}")
    z[z == nodata] = np.nan
    try:
        spec = GridSpec(n_rows, n_cols, res, ox, oy)
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return DemGrid(spec, z.reshape(n_rows, n_cols))


def pcd_sidecar(path: PathLike) -> Path:
    return Path(str(path) + ".json")


def save_pcd(pcd: PointCloud, path: PathLike) -> None:
    """CSV ``x,y,z`` with repr-precision floats plus a JSON sidecar holding noise_sigma."""
    buf = io.StringIO()
    buf.write("x,y,z\n")
    for x, y, z in pcd.points.tolist():
        buf.write(f"{x!r},{y!r},{z!r}\n")
    with _open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("ascii"))
    pcd_sidecar(path).write_text(json.dumps({"noise_sigma": pcd.noise_sigma, "n_points": len(pcd)}, indent=2))


def load_pcd(path: PathLike) -> PointCloud:
    with _open(path, "rb") as fh:
        text = fh.read().decode("ascii", errors="replace")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["x", "y", "z"]:
        raise FormatError(f"{path}: row 1: expected header 'x,y,z', got {header!r}")
    rows = []
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"{path}: row {row_no}: expected 3 fields, got {len(row)}")
        try:
            rows.append([float(v) for v in row])
        except ValueError:
            raise FormatError(f"{path}: row {row_no}: non-numeric field in {row!r}") from None
    sidecar = pcd_sidecar(path)
    noise_sigma = 0.0
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text())
            noise_sigma = float(meta["noise_sigma"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{sidecar}: bad metadata ({exc})") from None
        if "n_points" in meta and meta["n_points"] != len(rows):
            raise FormatError(f"{sidecar}: declares {meta['n_points']} points, CSV holds {len(rows)}")
    try:
        return PointCloud(np.array(rows).reshape(-1, 3), noise_sigma)
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from None
