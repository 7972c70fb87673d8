import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoinv.refine import (
    RefineConfig,
    d1_closed_form,
    grid_refine,
    local_minima,
    phi_g,
    phi_joint,
    phi_m,
    refine_trials,
    result_from_surface,
    surface,
    write_histogram_csv,
    write_surface_csv,
)


@pytest.fixture(scope="module")
def truth(small_ds):
    return small_ds.bodies[0], small_ds.bodies[0]


def _data(ops, body, nu=1.0, mu=1.0, rho0=1.0, m0=1.0):
    ag, am = ops
    return nu * rho0 * ag.apply(body), mu * m0 * am.apply(body)


def test_phi_g_examples(desk_ops, truth):
    ag, am = desk_ops
    body = truth[0]
    y, yb = _data(desk_ops, body, nu=0.75)
    grid = np.linspace(-0.5, 2.0, 21)
    vals = [phi_g(nu, body, y, "d1", ag) for nu in grid]
    assert grid[int(np.argmin(vals))] == 0.75
    assert d1_closed_form(body, y, ag) == pytest.approx(0.75, rel=1e-12)
    assert phi_g(0.0, body, y, "d1", ag) == pytest.approx(float(np.sum(y ** 2)), rel=1e-14)
    assert phi_g(0.75, body, y, "d2", ag) == pytest.approx(0.0, abs=1e-14)
    # magnetic mirror
    mvals = [phi_m(mu, body, yb, "d1", am) for mu in grid]
    assert grid[int(np.argmin(mvals))] == 1.0
    assert phi_m(0.0, body, yb, "d1", am) == pytest.approx(float(np.sum(yb ** 2)), rel=1e-14)
    assert phi_m(1.0, body, yb, "d2", am) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        phi_g(1.0, body, y, "d1", am)
    with pytest.raises(ValueError):
        phi_g(1.0, body, y[:4], "d1", ag)


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.4, 1.9), st.floats(0.1, 10))
def test_grid_argmin_nearest_closed_form(desk_ops, small_ds, nu_true, c):
    # an off-grid truth plus noise: the grid argmin is the grid point nearest the continuous minimizer
    ag, _ = desk_ops
    body = small_ds.bodies[3]
    clean = ag.apply(body)
    y = nu_true * clean + 0.01 * clean.max() * np.random.default_rng(0).normal(size=clean.shape)
    star = d1_closed_form(body, y, ag)
    grid = np.linspace(-0.5, 2.0, 21)
    vals = [phi_g(nu, body, y, "d1", ag) for nu in grid]
    assert grid[int(np.argmin(vals))] == grid[np.argmin(np.abs(grid - star))]
    # linearity: scaling the data scales the continuous minimizer
    assert d1_closed_form(body, c * y, ag) == pytest.approx(c * star, rel=1e-10)


def test_joint_surface_decomposition(desk_ops, small_ds, rng):
    dg, dm = small_ds.bodies[1], small_ds.bodies[2]
    data = (small_ds.phi[1] * 1.1, small_ds.b[1] * 0.9)
    cfg = RefineConfig(nu_grid=np.linspace(0, 2, 9), mu_grid=np.linspace(0, 2, 7), kind="d1", beta1=0.7, beta2=1.3, alpha=0.4)
    surf = surface((dg, dm), data, cfg, desk_ops)
    pg = np.array([phi_g(n, dg, data[0], "d1", desk_ops[0]) for n in cfg.nu_grid])
    pm = np.array([phi_m(m, dm, data[1], "d1", desk_ops[1]) for m in cfg.mu_grid])
    offset = surf - 0.7 * pg[:, None] - 1.3 * pm[None, :]
    assert np.ptp(offset) <= 1e-9 * np.abs(surf).max()
    assert offset[0, 0] > 0
    assert phi_joint(cfg.nu_grid[3], cfg.mu_grid[2], (dg, dm), data, cfg, desk_ops) == pytest.approx(surf[3, 2], rel=1e-12)
    cfg0 = RefineConfig(nu_grid=cfg.nu_grid, mu_grid=cfg.mu_grid, kind="d1", alpha=0.0)
    s0 = surface((dg, dm), data, cfg0, desk_ops)
    np.testing.assert_allclose(s0, pg[:, None] + pm[None, :], rtol=1e-13)
    # identical bodies: the structural term vanishes under either residual
    for kind in ("d1", "d2"):
        c1 = RefineConfig(nu_grid=cfg.nu_grid, mu_grid=cfg.mu_grid, kind=kind, alpha=1.0)
        c0 = RefineConfig(nu_grid=cfg.nu_grid, mu_grid=cfg.mu_grid, kind=kind, alpha=0.0)
        np.testing.assert_array_equal(surface((dg, dg), data, c1, desk_ops), surface((dg, dg), data, c0, desk_ops))


def test_grid_refine_recovers_truth(desk_ops, truth):
    data = _data(desk_ops, truth[0])
    res = grid_refine(RefineConfig(kind="d1"), truth, data, desk_ops)
    assert res.argmin == (1.0, 1.0)
    res2 = grid_refine(RefineConfig(kind="d2"), truth, data, desk_ops)
    assert res2.argmin == (1.0, 1.0)
    assert res2.surface[res2.argmin_index] == pytest.approx(0.0, abs=1e-14)
    preset = RefineConfig.survey_preset()
    assert (preset.beta1, preset.beta2, preset.alpha) == (1.0, 1.0, 0.2)
    assert preset.nu_grid[0] == -0.5 and preset.nu_grid[-1] == 1.0
    assert grid_refine(preset, truth, data, desk_ops).argmin == (1.0, 1.0)


def test_separable_argmin_and_ties():
    cfg = RefineConfig(nu_grid=[0.0, 1.0, 2.0], mu_grid=[0.0, 1.0, 2.0, 3.0])
    pg = np.array([3.0, 1.0, 2.0])
    pm = np.array([5.0, 4.0, 0.5, 7.0])
    res = result_from_surface(pg[:, None] + pm[None, :], cfg)
    assert res.argmin == (1.0, 2.0)
    assert res.local_minima == [(1.0, 2.0)]
    flat = result_from_surface(np.zeros((3, 4)), cfg)
    assert flat.argmin == (0.0, 0.0) and flat.local_minima == []


def test_local_minima_multiple():
    s = np.array([[0.0, 5.0, 5.0, 5.0], [5.0, 5.0, 5.0, 5.0], [5.0, 5.0, 5.0, 1.0]])
    assert local_minima(s) == [(0, 0), (2, 3)]


def test_mean_surface_over_records(desk_ops, small_ds):
    cfg = RefineConfig(kind="d1", nu_grid=np.linspace(0, 2, 5), mu_grid=np.linspace(0, 2, 5))
    bodies = [(small_ds.bodies[i], small_ds.bodies[i]) for i in range(3)]
    data = [(small_ds.phi[i], small_ds.b[i]) for i in range(3)]
    res = grid_refine(cfg, bodies, data, desk_ops)
    manual = np.mean([surface(b, d, cfg, desk_ops) for b, d in zip(bodies, data)], axis=0)
    np.testing.assert_array_equal(res.surface, manual)
    with pytest.raises(ValueError):
        grid_refine(cfg, bodies, data[:2], desk_ops)


def test_refine_trials_histograms(desk_ops, small_ds):
    cfg = RefineConfig(kind="d1")
    idx = list(range(6))
    trials = [(small_ds.phi[i], small_ds.b[i]) for i in idx]
    lookup_g = {id(t[0]): small_ds.bodies[i] for t, i in zip(trials, idx)}
    lookup_m = {id(t[1]): small_ds.bodies[i] for t, i in zip(trials, idx)}
    res = refine_trials(cfg, trials, lambda y: lookup_g[id(y)], lambda y: lookup_m[id(y)], desk_ops)
    assert res.hist_nu.sum() == res.hist_mu.sum() == 6
    assert res.hist_nu[np.argmin(np.abs(cfg.nu_grid - 1.0))] == 6
    one = refine_trials(cfg, trials[:1], lambda y: lookup_g[id(y)], lambda y: lookup_m[id(y)], desk_ops)
    assert one.hist_nu.sum() == 1 and one.hist_nu.max() == 1
    with pytest.raises(ValueError):
        refine_trials(cfg, [], None, None, desk_ops)


def test_config_validation_and_interval():
    with pytest.raises(ValueError):
        RefineConfig(nu_grid=[1.0, 0.0])
    with pytest.raises(ValueError):
        RefineConfig(kind="d3")
    with pytest.raises(ValueError):
        RefineConfig(alpha=-0.1)
    c = RefineConfig.from_interval(2.5, 1.25, 0.01, 0.005, points=5)
    np.testing.assert_allclose(c.nu_grid, [0.5, 0.75, 1.0, 1.25, 1.5])
    np.testing.assert_allclose(c.mu_grid, [0.5, 0.75, 1.0, 1.25, 1.5])


def test_csv_outputs(desk_ops, truth, tmp_path):
    res = grid_refine(RefineConfig(), truth, _data(desk_ops, truth[0]), desk_ops)
    write_surface_csv(res, tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 21 * 21
    flagged = [r for r in rows if r["is_argmin"] == "1"]
    assert len(flagged) == 1 and float(flagged[0]["nu"]) == 1.0 and float(flagged[0]["mu"]) == 1.0
    write_histogram_csv([0.0, 1.0], [3, 4], tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "bin_center,count\n0.0,3\n1.0,4\n"
