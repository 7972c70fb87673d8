"""Command-line pipeline: gen, train, invert, convert-gz, refine, report.

Configuration is JSON; a preset supplies defaults and ``--config`` overrides
them key by key.  Unknown keys are rejected.  Every command writes the
resolved configuration and a provenance record into its output directory.
Errors are reported on stderr as one JSON object ``{"error": category,
"message": ...}`` with a category-specific exit code.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DatasetFormatError, DatasetSpec, GeneratorConfig, build_dataset, load_dataset, make_operators, save_dataset, split_dataset, total_records, write_tensor
from .forward import FieldMap, gz_to_potential, load_fieldmap, load_latlon_grid, save_fieldmap
from .grid import GeometryError, PhysicalConstants, SensorPlane, VoxelDomain
from .model import Architecture, CheckpointError, init_model, load_checkpoint, predict, save_checkpoint, threshold_body
from .refine import RefineConfig, grid_refine, refine_trials, write_histogram_csv, write_surface_csv
from .train import TrainConfig, set_strict, train, write_log_csv


class ConfigError(ValueError):
    pass


class LockError(RuntimeError):
    pass


EXIT_CODES = {"config": 2, "io": 3, "format": 4, "invalid": 5, "locked": 6, "internal": 1}

_BASE = {
    "seed": 0,
    "strict": True,
    "geometry": {
        "domain": VoxelDomain().to_dict(),
        "plane": SensorPlane().to_dict(),
    },
    "constants": {"unit_mode": "dimensionless"},
    "dataset": {
        "K": 11000, "lam": 1.0, "class_a": "TOY", "class_b": "STOCH", "rho0": 1.0, "m0": 1.0,
        "n_M": [0.0, 0.0, 1.0], "noise_fraction": 0.0, "sigma": 0.02,
        "n_train": 10000, "n_test": 1000,
        "generator": dict(vars(GeneratorConfig())),
    },
    "model": Architecture().to_dict(),
    "train": {
        "learning_rate": 3.0e-4, "batch_size": 64, "max_epochs": 300, "epsilon": 0.02, "alpha": 1.0,
        "weight_decay": 1e-2, "betas": [0.9, 0.999], "adam_eps": 1e-8, "reduction": "sum",
    },
    "refine": {
        "rho0": 1.0, "m0": 1.0, "nu_min": -0.5, "nu_max": 2.0, "nu_points": 21,
        "mu_min": -0.5, "mu_max": 2.0, "mu_points": 21, "kind": "d1",
        "beta1": 1.0, "beta2": 1.0, "alpha": 0.0, "tau": 0.5, "structural_on": "thresholded",
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


PRESETS = {
    "paper-toy": {},
    "paper-brazil-pipeline": {
        "dataset": {"K": 60000, "lam": 0.0, "class_a": "TOY", "class_b": "STOCH", "noise_fraction": 0.1,
                    "sigma": 0.02, "n_train": 60000, "n_test": 6000},
        "refine": {"kind": "d2", "nu_min": -0.5, "nu_max": 1.0, "nu_points": 16,
                   "mu_min": -0.5, "mu_max": 1.0, "mu_points": 16, "beta1": 1.0, "beta2": 1.0, "alpha": 0.2},
    },
    "desk": {
        "geometry": {
            "domain": {"x_max": 400.0, "y_max": 400.0, "z_max": 200.0, "nx": 8, "ny": 8, "nz": 4},
            "plane": {"x_max": 400.0, "y_max": 400.0, "mx": 8, "my": 8},
        },
        "dataset": {"K": 200, "n_train": 160, "n_test": 40,
                    "generator": {"toy_steps": 3, "prism_min": 2, "prism_max": 5}},
        "model": {"in_shape": [8, 8], "out_depth": 4, "depth": 2, "channels": [8, 16], "skips": [True, True]},
        "train": {"max_epochs": 30},
    },
}


def resolve_config(preset: str | None = None, config_path=None, seed: int | None = None, strict: bool | None = None) -> dict:
    cfg = copy.deepcopy(_BASE)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
        cfg = _merge(cfg, PRESETS[preset])
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("configuration must be a JSON object")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if strict is not None:
        cfg["strict"] = bool(strict)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        domain, plane = geometry(cfg)
        plane.check_disjoint(domain)
        PhysicalConstants(**cfg["constants"])
        Architecture.from_dict(cfg["model"])
        train_config(cfg, "joint")
        refine_config(cfg)
        dataset_spec(cfg)
    except (TypeError, GeometryError, ValueError) as e:
        raise ConfigError(str(e)) from e
    ds = cfg["dataset"]
    if ds["n_train"] + ds["n_test"] > total_records(dataset_spec(cfg)):
        raise ConfigError("n_train + n_test exceeds the dataset size")


def geometry(cfg):
    return VoxelDomain(**cfg["geometry"]["domain"]), SensorPlane(**cfg["geometry"]["plane"])


def dataset_spec(cfg) -> DatasetSpec:
    d = {k: v for k, v in cfg["dataset"].items() if k not in ("n_train", "n_test")}
    return DatasetSpec(**d)


def train_config(cfg, mode) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=cfg["seed"], mode=mode, strict=cfg["strict"])


def refine_config(cfg) -> RefineConfig:
    r = cfg["refine"]
    return RefineConfig(
        rho0=r["rho0"], m0=r["m0"],
        nu_grid=np.linspace(r["nu_min"], r["nu_max"], r["nu_points"]),
        mu_grid=np.linspace(r["mu_min"], r["mu_max"], r["mu_points"]),
        kind=r["kind"], beta1=r["beta1"], beta2=r["beta2"], alpha=r["alpha"],
        structural_on=r["structural_on"], tau=r["tau"],
    )


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def input_digest(path) -> str | None:
    """sha256 of a file, or of every file in a directory (names and bytes, sorted)."""
    if path is None:
        return None
    p = Path(path)
    h = hashlib.sha256()
    files = sorted(f for f in p.rglob("*") if f.is_file() and f.name != ".lock") if p.is_dir() else [p]
    for f in files:
        h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_provenance(out: Path, command: str, cfg: dict, inputs: dict | None = None) -> None:
    """Inputs are recorded by content hash so reruns elsewhere produce the same record."""
    _write_json(out / "config.json", cfg)
    _write_json(out / f"provenance_{command}.json", {
        "command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"],
        "strict": cfg["strict"], "code_version": __version__,
        "inputs": {k: input_digest(v) for k, v in (inputs or {}).items()},
    })


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise LockError(f"{out} is locked by another command (remove {lock} if stale)") from e
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


# --- commands ------------------------------------------------------------------------


def cmd_gen(cfg: dict, out) -> Path:
    out = Path(out)
    domain, plane = geometry(cfg)
    with run_lock(out):
        ds = build_dataset(dataset_spec(cfg), domain, plane, cfg["seed"], PhysicalConstants(**cfg["constants"]))
        ds = split_dataset(ds, cfg["dataset"]["n_train"], cfg["dataset"]["n_test"], cfg["seed"])
        save_dataset(ds, out)
        write_provenance(out, "gen", cfg)
    return out


def cmd_train(cfg: dict, dataset_path, out, mode="joint", ckpt_g=None, ckpt_m=None, cold_start=False, resume=None) -> dict:
    out = Path(out)
    arch = Architecture.from_dict(cfg["model"])
    if mode == "joint":
        if resume:
            raise ConfigError("resume a joint run by passing --ckpt-g and --ckpt-m")
        if ckpt_g and ckpt_m:
            models = (load_checkpoint(ckpt_g, arch), load_checkpoint(ckpt_m, arch))
        elif cold_start:
            models = (init_model(arch, cfg["seed"]), init_model(arch, cfg["seed"] + 1))
        else:
            raise ConfigError("--mode joint requires --ckpt-g and --ckpt-m, or --cold-start")
    else:
        models = (load_checkpoint(resume, arch),) if resume else (init_model(arch, cfg["seed"]),)
    ds = load_dataset(dataset_path)
    tcfg = train_config(cfg, mode)
    with run_lock(out):
        rep = train(models, ds, tcfg)
        names = {"separate_g": ["nn_g"], "separate_m": ["nn_m"], "joint": ["joint_g", "joint_m"]}[mode]
        for name, ck in zip(names, rep.checkpoints):
            save_checkpoint(ck, out / f"{name}.ckpt")
        write_log_csv(rep, out / f"train_log_{mode}.csv", tcfg.learning_rate, strict=cfg["strict"])
        summary = {"mode": mode, "iter_stop": rep.iter_stop, "loss_result": rep.loss_result,
                   "first_epoch": rep.first_epoch, "checkpoints": [f"{n}.ckpt" for n in names],
                   "alpha": tcfg.alpha}
        if not cfg["strict"]:
            summary["wall_time"] = rep.wall_time
        _write_json(out / f"report_{mode}.json", summary)
        write_provenance(out, f"train_{mode}", cfg, {"dataset": dataset_path, "ckpt_g": ckpt_g, "ckpt_m": ckpt_m, "resume": resume})
    return summary


def _read_map(path, plane):
    return load_fieldmap(path, plane)


def cmd_invert(cfg: dict, phi_path, b_path, out, ckpt_g=None, ckpt_m=None, joint_g=None, joint_m=None) -> dict:
    out = Path(out)
    arch = Architecture.from_dict(cfg["model"])
    _, plane = geometry(cfg)
    tau = cfg["refine"]["tau"]
    fields = {"g": _read_map(phi_path, plane), "m": _read_map(b_path, plane)}
    jobs = [("separate_g", ckpt_g, "g"), ("separate_m", ckpt_m, "m"), ("joint_g", joint_g, "g"), ("joint_m", joint_m, "m")]
    if not any(j[1] for j in jobs):
        raise ConfigError("invert needs at least one checkpoint")
    written = {}
    with run_lock(out):
        for name, path, f in jobs:
            if not path:
                continue
            pred = predict(load_checkpoint(path, arch), fields[f])
            write_tensor(out / f"{name}_continuous.bin", pred.astype(np.float32))
            write_tensor(out / f"{name}_body.bin", threshold_body(pred, tau))
            written[name] = list(pred.shape)
        write_provenance(out, "invert", cfg, {"phi": phi_path, "b": b_path, "ckpt_g": ckpt_g, "ckpt_m": ckpt_m, "joint_g": joint_g, "joint_m": joint_m})
    return written


def cmd_convert_gz(cfg: dict, grid_path, out, latlon=False, fmt="text") -> FieldMap:
    _, plane = geometry(cfg)
    gz = load_latlon_grid(grid_path, plane) if latlon else load_fieldmap(grid_path, plane)
    phi = gz_to_potential(gz, plane)
    save_fieldmap(phi, out, fmt)
    return phi


def cmd_refine(cfg: dict, out, ckpt_g=None, ckpt_m=None, dataset=None, part="valid", phi_path=None, b_path=None, exact_bodies=False) -> dict:
    out = Path(out)
    rcfg = refine_config(cfg)
    arch = Architecture.from_dict(cfg["model"])
    if dataset:
        ds = load_dataset(dataset)
        domain, plane, constants = ds.domain, ds.plane, ds.constants
        idx = ds.indices(part) if part != "all" else np.arange(len(ds))
        if idx.size == 0:
            raise ConfigError(f"dataset part '{part}' is empty")
        trials = [(ds.phi[i], ds.b[i]) for i in idx]
        truth = {id(t[0]): ds.bodies[i] for t, i in zip(trials, idx)}
    else:
        if not (phi_path and b_path):
            raise ConfigError("refine needs --dataset or both --phi and --b")
        domain, plane = geometry(cfg)
        constants = PhysicalConstants(**cfg["constants"])
        trials = [(_read_map(phi_path, plane).values, _read_map(b_path, plane).values)]
        truth = {}
    operators = make_operators(domain, plane, cfg["dataset"]["n_M"], constants)

    if exact_bodies:
        if not truth:
            raise ConfigError("--exact-bodies needs a dataset with stored bodies")
        by_g = {id(t[0]): truth[id(t[0])] for t in trials}
        by_m = {id(t[1]): truth[id(t[0])] for t in trials}
        inv_g, inv_m = (lambda y: by_g[id(y)]), (lambda y: by_m[id(y)])
    else:
        if not (ckpt_g and ckpt_m):
            raise ConfigError("refine needs --ckpt-g and --ckpt-m (or --exact-bodies)")
        cg, cm = load_checkpoint(ckpt_g, arch), load_checkpoint(ckpt_m, arch)
        inv_g = lambda y: threshold_body(predict(cg, y), rcfg.tau)  # noqa: E731
        inv_m = lambda y: threshold_body(predict(cm, y), rcfg.tau)  # noqa: E731

    with run_lock(out):
        res = refine_trials(rcfg, trials, inv_g, inv_m, operators)
        write_surface_csv(res, out / "surface.csv")
        write_histogram_csv(res.nu_grid, res.hist_nu, out / "hist_nu.csv")
        write_histogram_csv(res.mu_grid, res.hist_mu, out / "hist_mu.csv")
        if len(trials) == 1:
            write_tensor(out / "body_g.bin", np.asarray(inv_g(trials[0][0]), dtype=np.float32))
            write_tensor(out / "body_m.bin", np.asarray(inv_m(trials[0][1]), dtype=np.float32))
        summary = {"argmin": list(res.argmin), "local_minima": [list(m) for m in res.local_minima],
                   "n_trials": len(trials), "kind": rcfg.kind,
                   "weights": [rcfg.beta1, rcfg.beta2, rcfg.alpha]}
        _write_json(out / "refine.json", summary)
        write_provenance(out, "refine", cfg, {"dataset": dataset, "phi": phi_path, "b": b_path, "ckpt_g": ckpt_g, "ckpt_m": ckpt_m})
    return summary


def cmd_report(run_dir) -> str:
    run = Path(run_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    lines = [f"run: {run.name}"]
    for rep in sorted(run.glob("report_*.json")):
        r = json.loads(rep.read_text())
        lines.append(f"train[{r['mode']}]: iter_stop={r['iter_stop']} loss_result={r['loss_result']!r} alpha={r['alpha']}")
    ref = run / "refine.json"
    if ref.exists():
        r = json.loads(ref.read_text())
        lines.append(f"refine[{r['kind']}]: argmin nu={r['argmin'][0]!r} mu={r['argmin'][1]!r} trials={r['n_trials']}")
    manifest = run / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        lines.append(f"dataset: {m['count']} records, split " + ", ".join(f"{k}={len(v)}" for k, v in sorted(m["split"].items())))
    csvs = sorted(p.name for p in run.glob("*.csv"))
    lines.append("csv: " + (", ".join(csvs) if csvs else "(none)"))
    text = "\n".join(lines) + "\n"
    (run / "summary.txt").write_text(text)
    return text


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--strict", action="store_true", default=None, help="bit-reproducible single-threaded mode")
    common.add_argument("--out", metavar="DIR", required=True)

    p = argparse.ArgumentParser(prog="geoinv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train networks on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--mode", choices=("separate_g", "separate_m", "joint"), default="joint")
    t.add_argument("--ckpt-g")
    t.add_argument("--ckpt-m")
    t.add_argument("--cold-start", action="store_true")
    t.add_argument("--resume", help="continue a separate run from this checkpoint")

    i = sub.add_parser("invert", parents=[common], help="predict bodies from field maps")
    i.add_argument("--phi", required=True)
    i.add_argument("--b", required=True)
    i.add_argument("--ckpt-g")
    i.add_argument("--ckpt-m")
    i.add_argument("--joint-g")
    i.add_argument("--joint-m")

    c = sub.add_parser("convert-gz", parents=[common], help="vertical gravity grid to potential")
    c.add_argument("--grid", required=True)
    c.add_argument("--latlon", action="store_true", help="grid holds lat lon value triplets")
    c.add_argument("--format", choices=("text", "binary"), default="text")

    r = sub.add_parser("refine", parents=[common], help="grid-search density/magnetization factors")
    r.add_argument("--ckpt-g")
    r.add_argument("--ckpt-m")
    r.add_argument("--dataset")
    r.add_argument("--part", default="valid", choices=("train", "test", "valid", "all"))
    r.add_argument("--phi")
    r.add_argument("--b")
    r.add_argument("--exact-bodies", action="store_true")

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("run_dir")
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, LockError):
        return "locked"
    if isinstance(exc, (DatasetFormatError, CheckpointError)):
        return "format"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "invalid"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            sys.stdout.write(cmd_report(args.run_dir))
            return 0
        cfg = resolve_config(args.preset, args.config, args.seed, args.strict)
        threads = os.environ.get("GEOINV_THREADS")
        set_strict(cfg["strict"], int(threads) if threads else None)
        if args.command == "gen":
            cmd_gen(cfg, args.out)
        elif args.command == "train":
            print(json.dumps(cmd_train(cfg, args.dataset, args.out, args.mode, args.ckpt_g, args.ckpt_m, args.cold_start, args.resume)))
        elif args.command == "invert":
            print(json.dumps(cmd_invert(cfg, args.phi, args.b, args.out, args.ckpt_g, args.ckpt_m, args.joint_g, args.joint_m)))
        elif args.command == "convert-gz":
            cmd_convert_gz(cfg, args.grid, args.out, args.latlon, args.format)
        elif args.command == "refine":
            print(json.dumps(cmd_refine(cfg, args.out, args.ckpt_g, args.ckpt_m, args.dataset, args.part, args.phi, args.b, args.exact_bodies)))
    except Exception as exc:  # noqa: BLE001
        cat = _category(exc)
        sys.stderr.write(json.dumps({"error": cat, "type": type(exc).__name__, "message": str(exc)}) + "\n")
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
