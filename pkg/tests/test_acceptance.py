"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run under pytest (lines are collected into the terminal summary) or directly
with ``python tests/test_acceptance.py``.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from _oracles import forward_loop, mc_cube_inverse_r, soft_dice_gradient_check
from geoinv.dataset import DatasetSpec, GeneratorConfig, build_dataset, load_dataset, make_operators, split_dataset
from geoinv.forward import (
    FieldMap,
    assemble_forward_matrix,
    forward_gravity,
    forward_magnetic_z,
    forward_matrix_free,
    load_fieldmap,
    magnetic_kernel,
    radial_nullspace_demo,
    save_fieldmap,
)
from geoinv.grid import MagnetizationDirection, PhysicalConstants, SensorPlane, VoxelDomain
from geoinv.loss import dice, loss_joint
from geoinv.model import DESK_ARCH, Architecture, init_model
from geoinv.refine import RefineConfig, d1_closed_form, grid_refine
from geoinv.train import TrainConfig, first_stop_epoch, structural_dice, train

RESULTS = []


def gate(number, title, ok, detail, elapsed=None, budget=None):
    within = budget is None or elapsed < budget
    passed = bool(ok) and within
    timing = "" if elapsed is None else f" [{elapsed:.2f} s / {budget:g} s]"
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:2d}  {title}: {detail}{timing}"
    RESULTS.append(line)
    print(line)
    assert passed, line


def test_c01_forward_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(20):
        nx, ny, nz = (int(v) for v in rng.integers(1, 5, size=3))
        mx, my = (int(v) for v in rng.integers(1, 4, size=2))
        dom = VoxelDomain(0, 30.0 * nx, 0, 30.0 * ny, 0, 30.0 * nz, nx, ny, nz)
        plane = SensorPlane(-5, 30.0 * nx + 5, -5, 30.0 * ny + 5, mx, my, z_s=-float(rng.uniform(0.1, 20)))
        occ = (rng.random(dom.shape) > 0.4).astype(float)
        occ[0, 0, 0] = 1.0
        n = rng.normal(size=3)
        n = tuple(n / np.linalg.norm(n))
        rho, m = rng.uniform(0.1, 5, size=2)
        g = forward_gravity(occ, rho, assemble_forward_matrix(dom, plane, "gravity")).values
        b = forward_magnetic_z(occ, m, assemble_forward_matrix(dom, plane, "magnetic_z", MagnetizationDirection(n))).values
        for got, ref in ((g, forward_loop(occ, rho, dom, plane, "gravity")), (b, forward_loop(occ, m, dom, plane, "magnetic_z", n))):
            worst = max(worst, float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
    gate(1, "forward matrix vs double loop", worst <= 1e-10, f"max rel err {worst:.2e} (tol 1e-10, 20 instances)",
         time.perf_counter() - t0, 5)


def test_c02_analytic_dipole():
    t0 = time.perf_counter()
    errs = []
    for unit in ("dimensionless", "SI"):
        const = PhysicalConstants(unit)
        side, m, d = 2.0, 1.7, 9.0
        dv = side ** 3
        dom = VoxelDomain(-1, 1, -1, 1, 0, 2, 1, 1, 1)
        plane = SensorPlane(-1, 1, -1, 1, 1, 1, z_s=1.0 - d)
        a = assemble_forward_matrix(dom, plane, "magnetic_z", MagnetizationDirection(), const)
        on_axis = forward_magnetic_z(np.ones(dom.shape), m, a).values[0, 0]
        expected = const.mag_factor * m * dv * 2 / d ** 3
        errs.append(abs(on_axis - expected) / abs(expected))
        eq = const.mag_factor * m * dv * (magnetic_kernel((0, 0, 0), (d, 0, 0)) @ np.array([0, 0, 1.0]))[2]
        expected_eq = -const.mag_factor * m * dv / d ** 3
        errs.append(abs(eq - expected_eq) / abs(expected_eq))
    worst = max(errs)
    gate(2, "analytic dipole (on-axis, equatorial)", worst <= 1e-12, f"max rel err {worst:.2e} (tol 1e-12)",
         time.perf_counter() - t0, 1)


def test_c03_monte_carlo():
    t0 = time.perf_counter()
    side = 50.0
    dom = VoxelDomain(0, side, 0, side, 0, side, 1, 1, 1)
    worst = 0.0
    for k, (dx, dist) in enumerate(((0.0, 4.0), (3.0, 5.0), (0.0, 8.0))):
        plane = SensorPlane(dx * side, dx * side + side, 0, side, 1, 1, z_s=side / 2 - dist * side)
        sensor = (dx * side + side / 2, side / 2, plane.z_s)
        phi = forward_gravity(np.ones(dom.shape), 1.0, assemble_forward_matrix(dom, plane, "gravity")).values[0, 0]
        mc = mc_cube_inverse_r((25, 25, 25), side, sensor, 2_000_000, seed=k)
        worst = max(worst, abs(phi - mc) / mc)
    gate(3, "single voxel vs Monte-Carlo volume integral", worst <= 0.01,
         f"max rel diff {worst:.2e} at >= 4 cell sides (tol 1e-2, 2e6 samples)", time.perf_counter() - t0, 30)


def test_c04_nonuniqueness():
    t0 = time.perf_counter()
    res = [radial_nullspace_demo(sensor_distance=s) for s in (3.0, 4.0)]
    worst = max(r.rel_diff for r in res)
    moment_ok = all(abs(r.moment) <= 1e-10 * r.abs_moment for r in res)
    gate(4, "radial non-uniqueness", worst <= 0.02 and moment_ok,
         f"max rel potential diff {worst:.2e} at >= 3a (tol 2e-2), zero second moment {moment_ok}",
         time.perf_counter() - t0, 30)


def test_c05_dice_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    checks = []
    for _ in range(200):
        a, b = rng.random((2, 40)) * (rng.random((2, 40)) > 0.3)
        d = dice(a, b)
        checks.append(d == dice(b, a) and 0.0 <= d <= 1.0)
    binary = (rng.random(64) > 0.5).astype(float)
    checks.append(dice(binary, binary) == 1.0)
    checks.append(dice([1, 0, 1, 0], [0, 1, 0, 1]) == 0.0)
    scale_err = max(abs(dice(c * binary, binary) - 2 * c / (1 + c * c)) for c in (0.25, 0.5, 1, 2, 4))
    gate(5, "Dice properties and scale law", all(checks) and scale_err <= 1e-12,
         f"{sum(checks)}/{len(checks)} property checks, scale-law err {scale_err:.1e} (tol 1e-12)",
         time.perf_counter() - t0, 1)


def test_c06_loss_joint_algebra():
    rng = np.random.default_rng(6)
    exact_reduction, worst = True, 0.0
    for _ in range(200):
        pg, tg, pm, tm = rng.random((4, 3, 4, 5, 5))
        b0 = loss_joint(pg, tg, pm, tm, 0.0)
        exact_reduction &= b0.total == 0.5 * b0.loss_grav + 0.5 * b0.loss_mag
        a = float(rng.uniform(0, 2))
        b = loss_joint(pg, tg, pm, tm, a)
        worst = max(worst, abs(b.total - (0.5 * b.loss_grav + 0.5 * b.loss_mag + a * b.structural_term)))
    gate(6, "joint loss algebra", exact_reduction and worst <= 1e-12,
         f"alpha=0 reduction exact {exact_reduction}, decomposition err {worst:.1e} (tol 1e-12)")


def test_c07_gradient_check():
    t0 = time.perf_counter()
    arch = Architecture(in_shape=(8, 8), out_depth=4, depth=1, channels=(4,), skips=(True,))
    errs = soft_dice_gradient_check(arch, n_params=120, h=1e-4, seed=7)
    gate(7, "soft-Dice backprop vs central differences", errs.max() <= 1e-5,
         f"max rel err {errs.max():.2e} over {errs.size} params (tol 1e-5)", time.perf_counter() - t0, 60)


DESK_DOMAIN = VoxelDomain(0, 400, 0, 400, 0, 200, 8, 8, 4)
DESK_PLANE = SensorPlane(0, 400, 0, 400, 8, 8)
DESK_GEN = GeneratorConfig(toy_steps=3, prism_min=2, prism_max=5)


def test_c08_training_progress():
    t0 = time.perf_counter()
    ops = make_operators(DESK_DOMAIN, DESK_PLANE)
    # stopping disabled so every run covers the full 30 epochs
    cfg = TrainConfig(learning_rate=3e-4, batch_size=64, max_epochs=30, epsilon=1e9, mode="joint")
    progress, dice_a1, dice_a0 = [], [], []
    for seed in range(3):
        ds = build_dataset(DatasetSpec(K=200, lam=1.0, class_a="TOY", generator=DESK_GEN), DESK_DOMAIN, DESK_PLANE, seed, operators=ops)
        ds = split_dataset(ds, 160, 40, seed)
        init = (init_model(DESK_ARCH, 2 * seed), init_model(DESK_ARCH, 2 * seed + 1))
        test_idx = ds.indices("test")
        for alpha, sink in ((1.0, dice_a1), (0.0, dice_a0)):
            rep = train(init, ds, replace(cfg, alpha=alpha, seed=seed))
            if alpha == 1.0:
                progress.append((rep.loss_test[0], rep.loss_test[-1]))
            sink.append(structural_dice(*rep.checkpoints, ds, test_idx))
    falls = all(end < start for start, end in progress)
    more_coherent = np.mean(dice_a1) >= np.mean(dice_a0)
    curves = ", ".join(f"{s:.3f}->{e:.3f}" for s, e in progress)
    gate(8, "desk-scale joint training", falls and more_coherent,
         f"Loss_test {curves}; structural Dice alpha=1 {np.mean(dice_a1):.3f} vs alpha=0 {np.mean(dice_a0):.3f}",
         time.perf_counter() - t0, 900)


def test_c09_early_stopping():
    rng = np.random.default_rng(9)
    ds = build_dataset(DatasetSpec(K=8, lam=1.0, generator=DESK_GEN), DESK_DOMAIN, DESK_PLANE, 0)
    ds = split_dataset(ds, 6, 2, 0)
    cfg = TrainConfig(batch_size=8, max_epochs=12, epsilon=0.02, mode="separate_g")
    ok, cases = True, 0
    for _ in range(10):
        tr = list(np.cumsum(-rng.uniform(0, 0.05, 13)) + 1.0)
        te = [v + float(d) for v, d in zip(tr, rng.uniform(-0.025, 0.025, 13))]
        rep = train(init_model(DESK_ARCH, 0), ds, cfg, evaluator=lambda e, nets, tr=tr, te=te: (tr[e], te[e]))
        expected = next((e for e in range(1, 13) if abs(tr[e] - te[e]) >= 0.02), 12)
        ok &= rep.iter_stop == expected == first_stop_epoch(tr, te, 0.02) and rep.loss_result == te[expected]
        cases += 1
    gate(9, "early stopping at first |train-test| >= 0.02", ok, f"{cases} injected curve pairs, exact match {ok}")


def test_c10_refinement_recovery():
    t0 = time.perf_counter()
    ops = make_operators(DESK_DOMAIN, DESK_PLANE)
    ds = build_dataset(DatasetSpec(K=6, lam=0.5, class_a="TOY", class_b="STOCH", generator=DESK_GEN), DESK_DOMAIN, DESK_PLANE, 10, operators=ops)
    d1_exact, d2_zero, nearest = True, True, True
    for i in range(len(ds)):
        body = ds.bodies[i]
        data = (ops[0].apply(body), ops[1].apply(body))
        r1 = grid_refine(RefineConfig(kind="d1"), (body, body), data, ops)
        d1_exact &= r1.argmin == (1.0, 1.0)
        r2 = grid_refine(RefineConfig(kind="d2"), (body, body), data, ops)
        d2_zero &= r2.surface[r2.argmin_index] == 0.0 and r2.argmin == (1.0, 1.0)
        off = (0.83 * data[0], 1.37 * data[1])
        r3 = grid_refine(RefineConfig(kind="d1"), (body, body), off, ops)
        grid = r3.nu_grid
        star = (d1_closed_form(body, off[0], ops[0]), d1_closed_form(body, off[1], ops[1]))
        nearest &= r3.argmin == (grid[np.argmin(abs(grid - star[0]))], grid[np.argmin(abs(grid - star[1]))])
    gate(10, "refinement recovery", d1_exact and d2_zero and nearest,
         f"d1 argmin (1,1) {d1_exact}, d2 zero at truth {d2_zero}, off-grid nearest {nearest} ({len(ds)} bodies)",
         time.perf_counter() - t0, 60)


def test_c11_gz_conversion(tmp_path):
    from geoinv.cli import cmd_convert_gz, resolve_config

    t0 = time.perf_counter()
    cfg = resolve_config("paper-toy")
    dom, plane = VoxelDomain(**cfg["geometry"]["domain"]), SensorPlane(**cfg["geometry"]["plane"])
    occ = np.zeros(dom.shape)
    occ[2, dom.nx // 2 - 1, dom.ny // 2 - 1] = 1.0
    gz = forward_matrix_free(occ, 1.0, dom, plane, "gravity_gz")
    save_fieldmap(gz, tmp_path / "gz.txt")
    cmd_convert_gz(cfg, tmp_path / "gz.txt", tmp_path / "phi.txt")
    conv = load_fieldmap(tmp_path / "phi.txt", plane).values
    direct = forward_matrix_free(occ, 1.0, dom, plane, "gravity").values
    qx, qy = plane.mx // 4, plane.my // 4
    sl = (slice(qx, plane.mx - qx), slice(qy, plane.my - qy))
    rms = math.sqrt(np.mean((conv[sl] - direct[sl]) ** 2) / np.mean(direct[sl] ** 2))
    gate(11, "g_z to potential vs direct potential", rms <= 0.10,
         f"relative RMS {rms:.3f} over interior 50% (tol 0.10)", time.perf_counter() - t0, 60)


def test_c12_determinism(tmp_path):
    from geoinv.cli import main

    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"K": 24, "n_train": 16, "n_test": 8}, "train": {"max_epochs": 2, "batch_size": 8}}))
    base = ["--preset", "desk", "--config", str(cfg), "--seed", "12", "--strict"]

    def pipeline(root):
        assert main(["gen", *base, "--out", str(root / "ds")]) == 0
        assert main(["train", *base, "--out", str(root / "run"), "--dataset", str(root / "ds"), "--mode", "separate_g"]) == 0
        assert main(["train", *base, "--out", str(root / "run"), "--dataset", str(root / "ds"), "--mode", "separate_m"]) == 0
        assert main(["train", *base, "--out", str(root / "run"), "--dataset", str(root / "ds"), "--mode", "joint",
                     "--ckpt-g", str(root / "run" / "nn_g.ckpt"), "--ckpt-m", str(root / "run" / "nn_m.ckpt")]) == 0
        assert main(["refine", *base, "--out", str(root / "run"), "--dataset", str(root / "ds"), "--part", "test",
                     "--ckpt-g", str(root / "run" / "joint_g.ckpt"), "--ckpt-m", str(root / "run" / "joint_m.ckpt")]) == 0
        ds = load_dataset(root / "ds")
        save_fieldmap(FieldMap(ds.phi[0], ds.plane), root / "phi.txt")
        save_fieldmap(FieldMap(ds.b[0], ds.plane), root / "b.txt")
        assert main(["invert", *base, "--out", str(root / "inv"), "--phi", str(root / "phi.txt"), "--b", str(root / "b.txt"),
                     "--ckpt-g", str(root / "run" / "nn_g.ckpt"), "--joint-m", str(root / "run" / "joint_m.ckpt")]) == 0
        assert main(["convert-gz", *base, "--grid", str(root / "phi.txt"), "--out", str(root / "conv.txt")]) == 0
        assert main(["report", str(root / "run")]) == 0
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    kinds = sorted({k.suffix for k in a})
    differing = [str(k) for k in a if a[k] != b.get(k)]
    gate(12, "strict-mode bit-identical reruns", same,
         f"{len(a)} files ({' '.join(kinds)}) identical {same}" + (f"; differing {differing}" if differing else ""))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
