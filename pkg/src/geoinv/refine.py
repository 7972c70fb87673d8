"""Grid-search refinement of unknown density and magnetization amplitudes.

With ``rho = nu * rho0`` and ``m = mu * m0`` the composite residual is

    Phi_joint(nu, mu) = beta1 * d(nu rho0 A_g D_g, phi) + beta2 * d(mu m0 A_m D_m, b) + alpha * d(D_g, D_m)

evaluated exhaustively on a ``(nu, mu)`` grid.  For fixed bodies the
structural term does not depend on ``(nu, mu)``; it offsets the surface
without moving its minimizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .forward import ForwardMatrix
from .loss import RESIDUALS


@dataclass
class RefineConfig:
    rho0: float = 1.0
    m0: float = 1.0
    nu_grid: np.ndarray = field(default_factory=lambda: np.linspace(-0.5, 2.0, 21))
    mu_grid: np.ndarray = field(default_factory=lambda: np.linspace(-0.5, 2.0, 21))
    kind: str = "d1"
    beta1: float = 1.0
    beta2: float = 1.0
    alpha: float = 0.0
    structural_on: str = "thresholded"  # or "continuous"
    tau: float = 0.5

    def __post_init__(self):
        self.nu_grid = np.asarray(self.nu_grid, dtype=np.float64)
        self.mu_grid = np.asarray(self.mu_grid, dtype=np.float64)
        for g in (self.nu_grid, self.mu_grid):
            if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) <= 0):
                raise ValueError("grids must be nonempty and strictly ascending")
        if min(self.beta1, self.beta2, self.alpha) < 0:
            raise ValueError("weights must be non-negative")
        if self.kind not in RESIDUALS:
            raise ValueError(f"unknown residual kind {self.kind!r}")

    @classmethod
    def survey_preset(cls, kind: str = "d2", points: int = 16) -> "RefineConfig":
        """Weights 1, 1, 0.2 on the interval -0.5 <= nu, mu <= 1."""
        g = np.linspace(-0.5, 1.0, points)
        return cls(nu_grid=g, mu_grid=g.copy(), kind=kind, beta1=1.0, beta2=1.0, alpha=0.2)

    @classmethod
    def from_interval(cls, rho0, d_rho, m0, d_m, points: int = 21, **kw) -> "RefineConfig":
        """Grids from interval constraints ``rho0 +- d_rho`` and ``m0 +- d_m``."""
        nu = np.linspace((rho0 - d_rho) / rho0, (rho0 + d_rho) / rho0, points)
        mu = np.linspace((m0 - d_m) / m0, (m0 + d_m) / m0, points)
        return cls(rho0=rho0, m0=m0, nu_grid=nu, mu_grid=mu, **kw)


@dataclass
class RefineResult:
    nu_grid: np.ndarray
    mu_grid: np.ndarray
    surface: np.ndarray  # (len(nu), len(mu))
    argmin: tuple  # (nu*, mu*)
    argmin_index: tuple
    local_minima: list = field(default_factory=list)
    hist_nu: np.ndarray | None = None
    hist_mu: np.ndarray | None = None


def _field(values):
    return np.asarray(getattr(values, "values", values), dtype=np.float64)


def phi_g(nu: float, body, data, kind: str, matrix: ForwardMatrix, rho0: float = 1.0) -> float:
    if matrix.kind != "gravity":
        raise ValueError("phi_g needs the gravity operator")
    y = _field(data)
    if y.shape != matrix.plane.shape:
        raise ValueError("data do not lie on the operator's sensor plane")
    return RESIDUALS[kind](nu * rho0 * matrix.apply(body), y)


def phi_m(mu: float, body, data, kind: str, matrix: ForwardMatrix, m0: float = 1.0) -> float:
    if matrix.kind != "magnetic_z":
        raise ValueError("phi_m needs the magnetic operator")
    y = _field(data)
    if y.shape != matrix.plane.shape:
        raise ValueError("data do not lie on the operator's sensor plane")
    return RESIDUALS[kind](mu * m0 * matrix.apply(body), y)


def structural_term(body_g, body_m, kind: str) -> float:
    return RESIDUALS[kind](np.asarray(body_g, dtype=np.float64), np.asarray(body_m, dtype=np.float64))


def phi_joint(nu, mu, bodies, data, cfg: RefineConfig, operators) -> float:
    """``beta1 Phi_g(nu) + beta2 Phi_m(mu) + alpha S``."""
    (dg, dm), (y_phi, y_b), (ag, am) = bodies, data, operators
    val = cfg.beta1 * phi_g(nu, dg, y_phi, cfg.kind, ag, cfg.rho0) + cfg.beta2 * phi_m(mu, dm, y_b, cfg.kind, am, cfg.m0)
    if cfg.alpha:
        val += cfg.alpha * structural_term(dg, dm, cfg.kind)
    return val


def profiles(bodies, data, cfg: RefineConfig, operators):
    """``(Phi_g over nu_grid, Phi_m over mu_grid, S)`` for one record."""
    (dg, dm), (y_phi, y_b), (ag, am) = bodies, data, operators
    pg = np.array([phi_g(nu, dg, y_phi, cfg.kind, ag, cfg.rho0) for nu in cfg.nu_grid])
    pm = np.array([phi_m(mu, dm, y_b, cfg.kind, am, cfg.m0) for mu in cfg.mu_grid])
    s = structural_term(dg, dm, cfg.kind) if cfg.alpha else 0.0
    return pg, pm, s


def surface(bodies, data, cfg: RefineConfig, operators) -> np.ndarray:
    pg, pm, s = profiles(bodies, data, cfg, operators)
    return cfg.beta1 * pg[:, None] + cfg.beta2 * pm[None, :] + cfg.alpha * s


def local_minima(surf: np.ndarray) -> list[tuple[int, int]]:
    """Grid points strictly below all of their (up to 8) neighbors."""
    n, m = surf.shape
    out = []
    for i in range(n):
        for j in range(m):
            v = surf[i, j]
            nb = surf[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            if np.sum(nb <= v) == 1:
                out.append((i, j))
    return out


def _argmin(surf: np.ndarray) -> tuple[int, int]:
    # first occurrence in C order is the lexicographically smallest (nu, mu) on ascending grids
    return tuple(int(k) for k in np.unravel_index(int(np.argmin(surf)), surf.shape))


def result_from_surface(surf: np.ndarray, cfg: RefineConfig) -> RefineResult:
    i, j = _argmin(surf)
    mins = [(float(cfg.nu_grid[a]), float(cfg.mu_grid[b])) for a, b in local_minima(surf)]
    return RefineResult(cfg.nu_grid, cfg.mu_grid, surf, (float(cfg.nu_grid[i]), float(cfg.mu_grid[j])), (i, j), mins)


def grid_refine(cfg: RefineConfig, bodies, data, operators) -> RefineResult:
    """Exhaustive surface; ``bodies``/``data`` may also be lists of records, averaged pointwise."""
    if isinstance(bodies, list):
        if len(bodies) != len(data) or not bodies:
            raise ValueError("need matching, nonempty lists of bodies and data")
        surf = np.mean([surface(bd, dt, cfg, operators) for bd, dt in zip(bodies, data)], axis=0)
    else:
        surf = surface(bodies, data, cfg, operators)
    return result_from_surface(surf, cfg)


def refine_trials(cfg: RefineConfig, trials, invert_g, invert_m, operators) -> RefineResult:
    """Histogram the per-trial argmin over the grid.

    ``trials`` is a sequence of ``(phi_map, b_map)``; ``invert_g``/``invert_m``
    map a field to a body (thresholded network output, or a substitute).
    The returned surface is the trial average.
    """
    hist_nu = np.zeros(len(cfg.nu_grid), dtype=np.int64)
    hist_mu = np.zeros(len(cfg.mu_grid), dtype=np.int64)
    surfs = []
    for y_phi, y_b in trials:
        bodies = (invert_g(y_phi), invert_m(y_b))
        surf = surface(bodies, (y_phi, y_b), cfg, operators)
        i, j = _argmin(surf)
        hist_nu[i] += 1
        hist_mu[j] += 1
        surfs.append(surf)
    if not surfs:
        raise ValueError("no trials")
    res = result_from_surface(np.mean(surfs, axis=0), cfg)
    res.hist_nu, res.hist_mu = hist_nu, hist_mu
    return res


def d1_closed_form(body, data, matrix: ForwardMatrix, amplitude0: float = 1.0) -> float:
    """Continuous minimizer ``<a, y> / <a, a>`` of ``|nu a - y|^2`` with ``a = amplitude0 A D``."""
    a = amplitude0 * matrix.apply(body).ravel()
    y = _field(data).ravel()
    return float(a @ y / (a @ a))


# --- outputs -----------------------------------------------------------------------


def write_surface_csv(res: RefineResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["nu", "mu", "phi", "is_argmin"])
        for i, nu in enumerate(res.nu_grid):
            for j, mu in enumerate(res.mu_grid):
                w.writerow([repr(float(nu)), repr(float(mu)), repr(float(res.surface[i, j])), int((i, j) == res.argmin_index)])


def write_histogram_csv(grid, counts, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_center", "count"])
        for c, n in zip(grid, counts):
            w.writerow([repr(float(c)), int(n)])
