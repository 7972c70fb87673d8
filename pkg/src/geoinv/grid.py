"""Voxel source domain, sensor plane and physical constants.

Coordinates are in meters with the z axis measuring depth (positive
downward), so a sensor plane sitting above the domain has ``z_s < z_min``.
Voxels are ordered depth-major: the flat index of cell ``(kz, kx, ky)`` is
``(kz * nx + kx) * ny + ky``, which makes ``occupancy.reshape(nz, nx, ny)[kz]``
a constant-depth slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Invalid or inconsistent geometry."""


@dataclass(frozen=True)
class VoxelDomain:
    x_min: float = 0.0
    x_max: float = 1600.0
    y_min: float = 0.0
    y_max: float = 1600.0
    z_min: float = 0.0
    z_max: float = 800.0
    nx: int = 32
    ny: int = 32
    nz: int = 16
    cubic: bool = False

    def __post_init__(self):
        for n in (self.nx, self.ny, self.nz):
            if int(n) != n or n <= 0:
                raise GeometryError(f"cell counts must be positive integers, got {(self.nx, self.ny, self.nz)}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > self.z_min):
            raise GeometryError("domain extents must be strictly increasing")
        if self.cubic:
            d = (self.cell_dx, self.cell_dy, self.cell_dz)
            if not (math.isclose(d[0], d[1], rel_tol=1e-12) and math.isclose(d[0], d[2], rel_tol=1e-12)):
                raise GeometryError(f"cubic domain requested but cell sizes are {d}")

    @property
    def cell_dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def cell_dy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    @property
    def cell_dz(self) -> float:
        return (self.z_max - self.z_min) / self.nz

    @property
    def cell_volume(self) -> float:
        return self.cell_dx * self.cell_dy * self.cell_dz

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def shape(self) -> tuple[int, int, int]:
        """Occupancy array shape ``(nz, nx, ny)``."""
        return (self.nz, self.nx, self.ny)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SensorPlane:
    x_min: float = 0.0
    x_max: float = 1600.0
    y_min: float = 0.0
    y_max: float = 1600.0
    mx: int = 32
    my: int = 32
    z_s: float = -0.1

    def __post_init__(self):
        for n in (self.mx, self.my):
            if int(n) != n or n <= 0:
                raise GeometryError(f"sensor counts must be positive integers, got {(self.mx, self.my)}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise GeometryError("plane extents must be strictly increasing")

    @property
    def cell_dx(self) -> float:
        return (self.x_max - self.x_min) / self.mx

    @property
    def cell_dy(self) -> float:
        return (self.y_max - self.y_min) / self.my

    @property
    def n_sensors(self) -> int:
        return self.mx * self.my

    @property
    def shape(self) -> tuple[int, int]:
        return (self.mx, self.my)

    def check_disjoint(self, domain: VoxelDomain) -> None:
        if domain.z_min <= self.z_s <= domain.z_max:
            raise GeometryError(
                f"sensor plane z_s={self.z_s} intersects domain depth range "
                f"[{domain.z_min}, {domain.z_max}]"
            )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PhysicalConstants:
    """Gravitational and magnetic constants.

    In ``"dimensionless"`` mode ``G = mu0 / (4 pi) = 1``.
    """

    unit_mode: str = "dimensionless"
    G: float = field(default=None)
    mu0: float = field(default=None)

    def __post_init__(self):
        if self.unit_mode == "SI":
            defaults = (6.67430e-11, 1.25663706212e-6)
        elif self.unit_mode == "dimensionless":
            defaults = (1.0, 4.0 * math.pi)
        else:
            raise ValueError(f"unknown unit_mode {self.unit_mode!r}")
        if self.G is None:
            object.__setattr__(self, "G", defaults[0])
        if self.mu0 is None:
            object.__setattr__(self, "mu0", defaults[1])
        if not (self.G > 0 and self.mu0 > 0):
            raise ValueError("G and mu0 must be positive")

    @property
    def mag_factor(self) -> float:
        """``mu0 / (4 pi)``."""
        return self.mu0 / (4.0 * math.pi)

    def to_dict(self) -> dict:
        return {"unit_mode": self.unit_mode, "G": self.G, "mu0": self.mu0}


@dataclass(frozen=True)
class MagnetizationDirection:
    n_M: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        v = tuple(float(c) for c in self.n_M)
        if len(v) != 3:
            raise ValueError("n_M must be a 3-vector")
        if abs(math.sqrt(sum(c * c for c in v)) - 1.0) > 1e-12:
            raise ValueError(f"n_M must be a unit vector, |n_M| = {math.sqrt(sum(c * c for c in v))}")
        object.__setattr__(self, "n_M", v)

    @classmethod
    def from_vector(cls, v) -> "MagnetizationDirection":
        v = np.asarray(v, dtype=float)
        return cls(tuple(v / np.linalg.norm(v)))

    def as_array(self) -> np.ndarray:
        return np.array(self.n_M)


def cell_centers(domain: VoxelDomain) -> np.ndarray:
    """Cell-center coordinates, shape ``(N, 3)``, in canonical depth-major order."""
    xs = domain.x_min + (np.arange(domain.nx) + 0.5) * domain.cell_dx
    ys = domain.y_min + (np.arange(domain.ny) + 0.5) * domain.cell_dy
    zs = domain.z_min + (np.arange(domain.nz) + 0.5) * domain.cell_dz
    z, x, y = np.meshgrid(zs, xs, ys, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def sensor_positions(plane: SensorPlane) -> np.ndarray:
    """Sensor coordinates, shape ``(S, 3)``, row-major over ``(ix, iy)``."""
    xs = plane.x_min + (np.arange(plane.mx) + 0.5) * plane.cell_dx
    ys = plane.y_min + (np.arange(plane.my) + 0.5) * plane.cell_dy
    x, y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), np.full(x.size, float(plane.z_s))], axis=1)


def voxel_index(kz: int, kx: int, ky: int, domain: VoxelDomain) -> int:
    if not (0 <= kz < domain.nz and 0 <= kx < domain.nx and 0 <= ky < domain.ny):
        raise IndexError(f"voxel ({kz}, {kx}, {ky}) outside domain of shape {domain.shape}")
    return (kz * domain.nx + kx) * domain.ny + ky


def voxel_unindex(index: int, domain: VoxelDomain) -> tuple[int, int, int]:
    if not 0 <= index < domain.n_cells:
        raise IndexError(f"flat index {index} outside [0, {domain.n_cells})")
    rest, ky = divmod(index, domain.ny)
    kz, kx = divmod(rest, domain.nx)
    return kz, kx, ky


def matching_plane(domain: VoxelDomain, height: float = 0.1) -> SensorPlane:
    """Sensor plane covering the domain footprint, one sensor per column, ``height`` above the top."""
    return SensorPlane(
        x_min=domain.x_min, x_max=domain.x_max, y_min=domain.y_min, y_max=domain.y_max,
        mx=domain.nx, my=domain.ny, z_s=domain.z_min - height,
    )
