"""Discretized gravity and magnetic forward operators.

Every body is a set of voxels; each voxel contributes as a point source at its
center weighted by the cell volume.  The gravity operator returns the
potential ``G * sum(rho_i * dv_i / r_ij)``; the magnetic operator returns the
z-component of the dipole induction for a magnetization of fixed direction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .grid import (
    MagnetizationDirection,
    PhysicalConstants,
    SensorPlane,
    VoxelDomain,
    cell_centers,
    sensor_positions,
)

R_TOL = 1e-9
KINDS = ("gravity", "magnetic_z", "gravity_gz")


class CoincidentPointError(ValueError):
    """A sensor coincides with a source point."""


@dataclass(frozen=True)
class FieldMap:
    values: np.ndarray
    plane: SensorPlane

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.plane.shape:
            raise ValueError(f"field map shape {v.shape} does not match plane {self.plane.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field map contains non-finite values")
        object.__setattr__(self, "values", v)

    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass(frozen=True)
class ForwardMatrix:
    entries: np.ndarray  # (S, N)
    kind: str
    domain: VoxelDomain
    plane: SensorPlane

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def apply(self, occupancy) -> np.ndarray:
        """Unscaled product ``entries @ flatten(occupancy)`` reshaped to the plane grid."""
        occ = np.asarray(occupancy, dtype=np.float64)
        if occ.shape != self.domain.shape:
            raise ValueError(f"occupancy shape {occ.shape} does not match domain {self.domain.shape}")
        return (self.entries @ occ.ravel()).reshape(self.plane.shape)

    def apply_batch(self, bodies) -> np.ndarray:
        """Unscaled fields for a stack of bodies, shape ``(K, mx, my)``."""
        b = np.asarray(bodies, dtype=np.float64)
        if b.shape[1:] != self.domain.shape:
            raise ValueError(f"body stack shape {b.shape} does not match domain {self.domain.shape}")
        out = b.reshape(len(b), -1) @ self.entries.T
        return out.reshape((len(b),) + self.plane.shape)


def _check_distance(r):
    if np.any(r <= R_TOL):
        raise CoincidentPointError(f"source/sensor separation {np.min(r):.3e} m <= r_tol={R_TOL:g} m")


def gravity_kernel(cell_center, sensor) -> float:
    d = np.asarray(cell_center, dtype=float) - np.asarray(sensor, dtype=float)
    r = math.sqrt(float(d @ d))
    _check_distance(r)
    return 1.0 / r


def magnetic_kernel(cell_center, sensor) -> np.ndarray:
    """Dipole kernel ``(3 d_a d_b - delta_ab r^2) / r^5`` with ``d = center - sensor``."""
    d = np.asarray(cell_center, dtype=float) - np.asarray(sensor, dtype=float)
    r2 = float(d @ d)
    _check_distance(math.sqrt(r2))
    return (3.0 * np.outer(d, d) - r2 * np.eye(3)) / r2 ** 2.5


def assemble_forward_matrix(
    domain: VoxelDomain,
    plane: SensorPlane,
    kind: str = "gravity",
    n_M: MagnetizationDirection | None = None,
    constants: PhysicalConstants | None = None,
    dtype=np.float64,
    chunk: int = 128,
) -> ForwardMatrix:
    """Dense ``S x N`` operator for unit amplitude.

    ``gravity``: ``G dv / r``.  ``magnetic_z``: ``(mu0/4pi) (K n_M)_z dv``.
    ``gravity_gz``: vertical attraction along the outward normal of the
    plane (pointing away from the domain), ``-G dv |dz| / r^3``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown operator kind {kind!r}")
    if kind == "magnetic_z" and n_M is None:
        raise ValueError("magnetic_z operator requires a magnetization direction")
    constants = constants or PhysicalConstants()
    plane.check_disjoint(domain)
    centers = cell_centers(domain)
    sensors = sensor_positions(plane)
    dv = domain.cell_volume
    out = np.empty((len(sensors), len(centers)), dtype=dtype)
    nm = n_M.as_array() if n_M is not None else None
    for start in range(0, len(sensors), chunk):
        s = sensors[start:start + chunk]
        d = centers[None, :, :] - s[:, None, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r = np.sqrt(r2)
        _check_distance(r)
        if kind == "gravity":
            block = constants.G * dv / r
        elif kind == "gravity_gz":
            block = -constants.G * dv * np.abs(d[..., 2]) / (r2 * r)
        else:
            # (K n)_z = (3 dz (d.n) - r^2 n_z) / r^5
            dn = d @ nm
            block = constants.mag_factor * dv * (3.0 * d[..., 2] * dn - r2 * nm[2]) / (r2 * r2 * r)
        out[start:start + chunk] = block
    return ForwardMatrix(out, kind, domain, plane)


def forward_gravity(occupancy, rho: float, matrix: ForwardMatrix) -> FieldMap:
    if matrix.kind != "gravity":
        raise ValueError(f"expected a gravity operator, got {matrix.kind}")
    if not math.isfinite(rho):
        raise ValueError("rho must be finite")
    return FieldMap(rho * matrix.apply(occupancy), matrix.plane)


def forward_magnetic_z(occupancy, m: float, matrix: ForwardMatrix) -> FieldMap:
    if matrix.kind != "magnetic_z":
        raise ValueError(f"expected a magnetic_z operator, got {matrix.kind}")
    if not math.isfinite(m):
        raise ValueError("m must be finite")
    return FieldMap(m * matrix.apply(occupancy), matrix.plane)


def forward_matrix_free(
    occupancy,
    amplitude: float,
    domain: VoxelDomain,
    plane: SensorPlane,
    kind: str = "gravity",
    n_M: MagnetizationDirection | None = None,
    constants: PhysicalConstants | None = None,
) -> FieldMap:
    """Same result as the dense path, evaluating kernels only at occupied cells."""
    occ = np.asarray(occupancy, dtype=np.float64)
    if occ.shape != domain.shape:
        raise ValueError(f"occupancy shape {occ.shape} does not match domain {domain.shape}")
    constants = constants or PhysicalConstants()
    plane.check_disjoint(domain)
    flat = occ.ravel()
    idx = np.flatnonzero(flat)
    centers = cell_centers(domain)[idx]
    w = flat[idx] * domain.cell_volume
    sensors = sensor_positions(plane)
    d = centers[None, :, :] - sensors[:, None, :]
    r2 = np.einsum("ijk,ijk->ij", d, d)
    r = np.sqrt(r2)
    if r.size:
        _check_distance(r)
    if kind == "gravity":
        k = constants.G / r
    elif kind == "gravity_gz":
        k = -constants.G * np.abs(d[..., 2]) / (r2 * r)
    elif kind == "magnetic_z":
        if n_M is None:
            raise ValueError("magnetic_z operator requires a magnetization direction")
        nm = n_M.as_array()
        k = constants.mag_factor * (3.0 * d[..., 2] * (d @ nm) - r2 * nm[2]) / (r2 * r2 * r)
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    return FieldMap(amplitude * (k @ w).reshape(plane.shape), plane)


# --- vertical gravity to potential -------------------------------------------------


def _antiderivative(x, y):
    # F(x, y) with d2F/dxdy = 1/sqrt(x^2 + y^2); terms vanish on the axes
    ax, ay = np.abs(x), np.abs(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(ax > 0, x * np.arcsinh(y / np.where(ax > 0, ax, 1.0)), 0.0)
        t2 = np.where(ay > 0, y * np.arcsinh(x / np.where(ay > 0, ay, 1.0)), 0.0)
    return t1 + t2


def cell_inverse_r_integral(sensor_xy, cell) -> float:
    """Exact ``integral dx dy / sqrt((xs-x)^2 + (ys-y)^2)`` over ``cell = (x0, x1, y0, y1)``."""
    x0, x1, y0, y1 = (float(c) for c in cell)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {cell}")
    return float(_rect_integral(np.asarray(sensor_xy, float)[None], np.array([[x0, x1, y0, y1]]))[0, 0])


def _rect_integral(sensors_xy: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Matrix of rectangle integrals, shape ``(len(sensors_xy), len(cells))``."""
    xs = sensors_xy[:, 0:1]
    ys = sensors_xy[:, 1:2]
    a0 = cells[None, :, 0] - xs
    a1 = cells[None, :, 1] - xs
    b0 = cells[None, :, 2] - ys
    b1 = cells[None, :, 3] - ys
    return _antiderivative(a1, b1) - _antiderivative(a0, b1) - _antiderivative(a1, b0) + _antiderivative(a0, b0)


def potential_conversion_matrix(plane: SensorPlane) -> np.ndarray:
    """``-(1/2pi) C_k(x_s, y_s)`` for all sensor/cell pairs of the plane partition."""
    sensors = sensor_positions(plane)[:, :2]
    ix, iy = np.meshgrid(np.arange(plane.mx), np.arange(plane.my), indexing="ij")
    x0 = plane.x_min + ix.ravel() * plane.cell_dx
    y0 = plane.y_min + iy.ravel() * plane.cell_dy
    cells = np.stack([x0, x0 + plane.cell_dx, y0, y0 + plane.cell_dy], axis=1)
    return -_rect_integral(sensors, cells) / (2.0 * math.pi)


def gz_to_potential(gz: FieldMap, plane: SensorPlane | None = None) -> FieldMap:
    """Potential on the plane from the vertical field component on the same plane.

    ``gz`` is the derivative of the potential along the plane normal pointing
    away from the sources (negative above a positive mass excess).
    """
    plane = plane or gz.plane
    values = np.asarray(gz.values if isinstance(gz, FieldMap) else gz, dtype=np.float64)
    if values.shape != plane.shape:
        raise ValueError(f"g_z grid shape {values.shape} does not match plane {plane.shape}")
    phi = potential_conversion_matrix(plane) @ values.ravel()
    return FieldMap(phi.reshape(plane.shape), plane)


# --- radial non-uniqueness -----------------------------------------------------------


@dataclass
class RadialNullspaceResult:
    radius: np.ndarray
    rho: np.ndarray
    rho_perturbed: np.ndarray
    moment: float
    abs_moment: float
    phi: np.ndarray
    phi_perturbed: np.ndarray
    max_abs_diff: float
    rel_diff: float


def radial_nullspace_demo(
    a: float = 1.0,
    n_profile_points: int = 201,
    base: float = 0.6,
    slope: float = 0.4,
    n_cells: int = 24,
    n_sub: int = 4,
    sensor_distance: float = 3.0,
    n_sensors: int = 5,
) -> RadialNullspaceResult:
    """Two radial densities with identical exterior potential.

    ``rho(t) = base`` and ``rho(t) + c (t - 3a/4)`` with ``c = slope / a``;
    the perturbation has zero ``t^2``-moment on ``[0, a]``.  Both profiles are
    voxelized (cell averages from ``n_sub^3`` sub-samples) onto a cube of side
    ``2a`` and forward-modeled on a plane ``sensor_distance * a`` above the
    ball center.
    """
    if a <= 0:
        raise ValueError("radius must be positive")
    c = slope / a
    t_bar = 0.75 * a

    def profile(t, perturbed):
        inside = t <= a
        val = base + (c * (t - t_bar) if perturbed else 0.0)
        return np.where(inside, val, 0.0)

    t = np.linspace(0.0, a, n_profile_points)
    pert = c * (t - t_bar)
    # exact moments of c (t - 3a/4) t^2 on [0, a]
    moment = c * (a ** 4 / 4 - t_bar * a ** 3 / 3)
    abs_moment = float(trapezoid(np.abs(pert) * t ** 2, t))

    domain = VoxelDomain(-a, a, -a, a, -a, a, n_cells, n_cells, n_cells)
    h = 2 * a / n_cells
    sub = (np.arange(n_sub) + 0.5) / n_sub * h
    centers = cell_centers(domain)
    corner = centers - h / 2
    sx, sy, sz = np.meshgrid(sub, sub, sub, indexing="ij")
    offs = np.stack([sx.ravel(), sy.ravel(), sz.ravel()], axis=1)
    pts = corner[:, None, :] + offs[None, :, :]
    rr = np.linalg.norm(pts, axis=2)
    occ0 = profile(rr, False).mean(axis=1).reshape(domain.shape)
    occ1 = profile(rr, True).mean(axis=1).reshape(domain.shape)

    plane = SensorPlane(-a, a, -a, a, n_sensors, n_sensors, z_s=-sensor_distance * a)
    mat = assemble_forward_matrix(domain, plane, "gravity")
    phi0 = forward_gravity(occ0, 1.0, mat).values
    phi1 = forward_gravity(occ1, 1.0, mat).values
    diff = float(np.max(np.abs(phi1 - phi0)))
    return RadialNullspaceResult(
        radius=t, rho=np.full_like(t, base), rho_perturbed=base + pert,
        moment=float(moment), abs_moment=abs_moment,
        phi=phi0, phi_perturbed=phi1,
        max_abs_diff=diff, rel_diff=diff / float(np.max(np.abs(phi0))),
    )


# --- field map files ---------------------------------------------------------------

FIELDMAP_MAGIC = b"GINVFMAP"


def save_fieldmap(fm: FieldMap, path, fmt: str = "text") -> None:
    if fmt == "text":
        np.savetxt(path, fm.values, fmt="%.17g")
    elif fmt == "binary":
        with open(path, "wb") as f:
            f.write(FIELDMAP_MAGIC)
            f.write(struct.pack("<QQ", *fm.values.shape))
            f.write(fm.values.astype("<f8").tobytes())
    else:
        raise ValueError(f"unknown field map format {fmt!r}")


def load_fieldmap(path, plane: SensorPlane) -> FieldMap:
    """Read a text or binary field map; the format is detected from the magic bytes."""
    with open(path, "rb") as f:
        head = f.read(8)
        if head == FIELDMAP_MAGIC:
            hdr = f.read(16)
            if len(hdr) != 16:
                raise ValueError(f"{path}: truncated field map header")
            mx, my = struct.unpack("<QQ", hdr)
            raw = f.read()
            if len(raw) != 8 * mx * my:
                raise ValueError(f"{path}: expected {mx * my} values, file holds {len(raw) // 8}")
            values = np.frombuffer(raw, dtype="<f8").reshape(mx, my).astype(np.float64)
            return FieldMap(values, plane)
    values = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    return FieldMap(values, plane)


def resample_latlon_grid(triplets, plane: SensorPlane) -> FieldMap:
    """Bilinear resampling of a regular ``(lat, lon, value)`` grid onto the plane.

    Longitude maps linearly onto ``x`` and latitude onto ``y`` so that the
    grid's bounding box covers the plane rectangle.
    """
    from scipy.interpolate import RegularGridInterpolator

    arr = np.asarray(triplets, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("expected rows of (lat, lon, value)")
    lats = np.unique(arr[:, 0])
    lons = np.unique(arr[:, 1])
    if len(lats) * len(lons) != len(arr) or len(lats) < 2 or len(lons) < 2:
        raise ValueError("lat/lon triplets do not form a complete regular grid")
    grid = np.full((len(lons), len(lats)), np.nan)
    grid[np.searchsorted(lons, arr[:, 1]), np.searchsorted(lats, arr[:, 0])] = arr[:, 2]
    interp = RegularGridInterpolator((lons, lats), grid, method="linear")
    pos = sensor_positions(plane)
    u = (pos[:, 0] - plane.x_min) / (plane.x_max - plane.x_min)
    v = (pos[:, 1] - plane.y_min) / (plane.y_max - plane.y_min)
    q = np.stack([lons[0] + u * (lons[-1] - lons[0]), lats[0] + v * (lats[-1] - lats[0])], axis=1)
    return FieldMap(interp(q).reshape(plane.shape), plane)


def load_latlon_grid(path, plane: SensorPlane) -> FieldMap:
    return resample_latlon_grid(np.loadtxt(path, dtype=np.float64, ndmin=2), plane)
