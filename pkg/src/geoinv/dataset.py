"""Synthetic body classes, field synthesis and the on-disk dataset container.

Bodies are ``(nz, nx, ny)`` occupancy arrays in ``[0, 1]``.  Three
generators are provided:

* ``TOY``   random-walk trails of 2x2x2 cube clusters around one or two centers,
* ``SYN``   one or two separated prisms, each optionally turned into a step,
* ``STOCH`` a union of 2-4 SYN primitives with overlaps allowed.

``STOCH_NS`` records carry a STOCH body with noise-perturbed fields.

Every record is generated from its own Philox stream keyed by
``(master_seed, record_index)``; generation order never changes the output.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .forward import FieldMap, ForwardMatrix, assemble_forward_matrix
from .grid import MagnetizationDirection, PhysicalConstants, SensorPlane, VoxelDomain

CLASSES = ("TOY", "SYN", "STOCH", "STOCH_NS", "REAL")
FORMAT_VERSION = 1
TENSOR_MAGIC = b"GINV"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class DatasetFormatError(ValueError):
    """Malformed or incompatible dataset files."""


def record_rng(master_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream for one record; ``stream`` separates bodies from noise."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), int(index), int(stream)])))


def check_occupancy(values, domain: VoxelDomain | None = None, binary: bool = False) -> np.ndarray:
    v = np.asarray(values)
    if domain is not None and v.shape != domain.shape:
        raise ValueError(f"occupancy shape {v.shape} does not match domain {domain.shape}")
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise ValueError("occupancy values must lie in [0, 1]")
    if binary and not np.all((v == 0) | (v == 1)):
        raise ValueError("binary occupancy must hold only 0 and 1")
    return v


# --- generators -----------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    toy_steps: int = 40
    toy_step_cells: int = 2
    toy_max_centers: int = 2
    prism_min: int = 4
    prism_max: int = 12
    stoch_min_parts: int = 2
    stoch_max_parts: int = 4


def _toy_component(shape, rng, cfg: GeneratorConfig) -> np.ndarray:
    nz, nx, ny = shape
    hi = np.array([nz - 2, nx - 2, ny - 2])
    occ = np.zeros(shape, dtype=bool)
    center = np.array([rng.integers(0, h + 1) for h in hi])
    # a seed cube plus three face-adjacent cubes keeps the cluster 6-connected
    cubes = [center.copy()]
    for _ in range(3):
        off = np.zeros(3, dtype=int)
        off[rng.integers(0, 3)] = 2 * rng.choice([-1, 1])
        cubes.append(np.clip(center + off, 0, hi))
    dirs = np.concatenate([np.eye(3, dtype=int), -np.eye(3, dtype=int)])
    for pos in cubes:
        p = pos.copy()
        occ[p[0]:p[0] + 2, p[1]:p[1] + 2, p[2]:p[2] + 2] = True
        for _ in range(cfg.toy_steps):
            step = dirs[rng.integers(0, 6)] * cfg.toy_step_cells
            p = np.clip(p + step, 0, hi)
            occ[p[0]:p[0] + 2, p[1]:p[1] + 2, p[2]:p[2] + 2] = True
    return occ


def toy_components(domain: VoxelDomain, seed, cfg: GeneratorConfig = GeneratorConfig()) -> list[np.ndarray]:
    """Per-center cell sets of a TOY body (their union is the body)."""
    if min(domain.shape) < 2:
        raise ValueError("TOY bodies need at least 2 cells per axis")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_centers = int(rng.integers(1, cfg.toy_max_centers + 1))
    return [_toy_component(domain.shape, rng, cfg) for _ in range(n_centers)]


def gen_toy(domain: VoxelDomain, seed, cfg: GeneratorConfig = GeneratorConfig()) -> np.ndarray:
    comps = toy_components(domain, seed, cfg)
    return np.logical_or.reduce(comps).astype(np.float32)


def _random_box(shape, rng, cfg: GeneratorConfig):
    lo_hi = []
    for n in shape:
        size = int(rng.integers(min(cfg.prism_min, n), min(cfg.prism_max, n) + 1))
        start = int(rng.integers(0, n - size + 1))
        lo_hi.append((start, start + size))
    return lo_hi


def _primitive_boxes(shape, rng, cfg: GeneratorConfig) -> list[list[tuple[int, int]]]:
    """A prism, or a step made of two z-stacked boxes with a lateral offset."""
    box = _random_box(shape, rng, cfg)
    (z0, z1), (x0, x1), (y0, y1) = box
    if rng.random() < 0.5 or z1 - z0 < 2:
        return [box]
    split = int(rng.integers(z0 + 1, z1))
    width = x1 - x0
    shift = int(rng.integers(1, width)) if width > 1 else 0
    shift *= 1 if rng.random() < 0.5 else -1
    ux0 = int(np.clip(x0 + shift, 0, shape[1] - width))
    upper = [(z0, split), (ux0, ux0 + width), (y0, y1)]
    lower = [(split, z1), (x0, x1), (y0, y1)]
    return [upper, lower]


def _paint(shape, boxes) -> np.ndarray:
    occ = np.zeros(shape, dtype=bool)
    for (z0, z1), (x0, x1), (y0, y1) in boxes:
        occ[z0:z1, x0:x1, y0:y1] = True
    return occ


def _dilate(occ: np.ndarray) -> np.ndarray:
    out = occ.copy()
    for ax in range(3):
        out |= np.roll(occ, 1, axis=ax) & _edge_mask(occ.shape, ax, 1)
        out |= np.roll(occ, -1, axis=ax) & _edge_mask(occ.shape, ax, -1)
    return out


def _edge_mask(shape, ax, shift):
    m = np.ones(shape, dtype=bool)
    idx = [slice(None)] * 3
    idx[ax] = 0 if shift > 0 else -1
    m[tuple(idx)] = False
    return m


def gen_syn(domain: VoxelDomain, seed, cfg: GeneratorConfig = GeneratorConfig(), max_tries: int = 20) -> np.ndarray:
    """One or two prisms/steps, kept apart so they never merge into one component."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = domain.shape
    occ = _paint(shape, _primitive_boxes(shape, rng, cfg))
    if rng.random() < 0.5:
        halo = _dilate(occ)
        for _ in range(max_tries):
            cand = _paint(shape, _primitive_boxes(shape, rng, cfg))
            if not np.any(cand & halo):
                occ |= cand
                break
    return occ.astype(np.float32)


def gen_stoch(domain: VoxelDomain, seed, cfg: GeneratorConfig = GeneratorConfig()) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = domain.shape
    n_parts = int(rng.integers(cfg.stoch_min_parts, cfg.stoch_max_parts + 1))
    occ = np.zeros(shape, dtype=bool)
    for _ in range(n_parts):
        occ |= _paint(shape, _primitive_boxes(shape, rng, cfg))
    return occ.astype(np.float32)


GENERATORS = {"TOY": gen_toy, "SYN": gen_syn, "STOCH": gen_stoch, "STOCH_NS": gen_stoch}


def add_field_noise(fm, sigma_rel: float, seed) -> FieldMap | np.ndarray:
    """Zero-mean Gaussian noise with std ``sigma_rel * RMS(map)``."""
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be non-negative")
    values = fm.values if isinstance(fm, FieldMap) else np.asarray(fm, dtype=np.float64)
    if sigma_rel == 0:
        return fm
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rms = math.sqrt(float(np.mean(values ** 2)))
    noisy = values + rng.normal(0.0, sigma_rel * rms, size=values.shape)
    return FieldMap(noisy, fm.plane) if isinstance(fm, FieldMap) else noisy


# --- normalization ----------------------------------------------------------------


def field_scale(values) -> np.ndarray:
    """Per-map max-abs scale, shape ``(K,)`` for a ``(K, mx, my)`` stack."""
    v = np.asarray(values, dtype=np.float64)
    s = np.abs(v.reshape(len(v), -1)).max(axis=1)
    return np.where(s > 0, s, 1.0)


def normalize(values, scale) -> np.ndarray:
    return np.asarray(values) / np.asarray(scale).reshape((-1,) + (1,) * (np.ndim(values) - 1))


def denormalize(values, scale) -> np.ndarray:
    return np.asarray(values) * np.asarray(scale).reshape((-1,) + (1,) * (np.ndim(values) - 1))


# --- datasets ---------------------------------------------------------------------


@dataclass
class DatasetRecord:
    body: np.ndarray
    phi: FieldMap
    b: FieldMap
    meta: dict


@dataclass
class DatasetSpec:
    K: int = 11000
    lam: float = 1.0
    class_a: str = "TOY"
    class_b: str = "STOCH"
    rho0: float = 1.0
    m0: float = 1.0
    n_M: tuple = (0.0, 0.0, 1.0)
    noise_fraction: float = 0.0
    sigma: float = 0.02
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        self.n_M = tuple(float(c) for c in self.n_M)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "generator"}
        d["n_M"] = list(self.n_M)
        d["generator"] = dict(vars(self.generator))
        return d


@dataclass
class Dataset:
    """Stacked records: ``bodies (K, nz, nx, ny)``, ``phi``/``b`` ``(K, mx, my)``."""

    domain: VoxelDomain
    plane: SensorPlane
    constants: PhysicalConstants
    bodies: np.ndarray
    phi: np.ndarray
    b: np.ndarray
    meta: list
    split: dict = field(default_factory=lambda: {"train": [], "test": [], "valid": []})
    spec: dict = field(default_factory=dict)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.bodies)

    def record(self, i: int) -> DatasetRecord:
        return DatasetRecord(self.bodies[i], FieldMap(self.phi[i], self.plane), FieldMap(self.b[i], self.plane), self.meta[i])

    @property
    def records(self) -> list[DatasetRecord]:
        return [self.record(i) for i in range(len(self))]

    def indices(self, part: str) -> np.ndarray:
        return np.asarray(self.split.get(part, []), dtype=np.int64)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, bodies=self.bodies[idx], phi=self.phi[idx], b=self.b[idx],
                       meta=[self.meta[i] for i in idx], split={"train": [], "test": [], "valid": []})

    def class_indices(self, cls: str, part: str | None = None) -> np.ndarray:
        pool = self.indices(part) if part else np.arange(len(self))
        return np.array([i for i in pool if self.meta[i]["class"] == cls], dtype=np.int64)


def make_operators(domain, plane, n_M=(0.0, 0.0, 1.0), constants=None, dtype=np.float64):
    """Gravity and magnetic operators for a geometry, reused across records."""
    constants = constants or PhysicalConstants()
    g = assemble_forward_matrix(domain, plane, "gravity", constants=constants, dtype=dtype)
    m = assemble_forward_matrix(domain, plane, "magnetic_z", MagnetizationDirection(tuple(n_M)), constants, dtype=dtype)
    return g, m


def _class_counts(spec: DatasetSpec) -> tuple[int, int]:
    n_a = int(math.floor(spec.lam * spec.K))
    return n_a, spec.K - n_a


def total_records(spec: DatasetSpec) -> int:
    """Base records plus the noised duplicates."""
    return spec.K + int(round(spec.noise_fraction * spec.K))


def build_dataset(
    spec: DatasetSpec,
    domain: VoxelDomain,
    plane: SensorPlane,
    seed: int,
    constants: PhysicalConstants | None = None,
    operators: tuple[ForwardMatrix, ForwardMatrix] | None = None,
) -> Dataset:
    """``floor(lam K)`` class-A bodies, the rest class B, fields by the forward operators.

    A ``noise_fraction`` subset of the base records is appended again with
    noise-perturbed fields (same bodies).
    """
    if not 0.0 <= spec.lam <= 1.0:
        raise ValueError(f"mixture proportion must be in [0, 1], got {spec.lam}")
    if not 0.0 <= spec.noise_fraction <= 1.0:
        raise ValueError(f"noise fraction must be in [0, 1], got {spec.noise_fraction}")
    if spec.K < 1:
        raise ValueError("K must be at least 1")
    for c in (spec.class_a, spec.class_b):
        if c not in GENERATORS:
            raise ValueError(f"unknown body class {c!r}")
    constants = constants or PhysicalConstants()
    ag, am = operators or make_operators(domain, plane, spec.n_M, constants)
    n_a, _ = _class_counts(spec)

    classes = [spec.class_a if i < n_a else spec.class_b for i in range(spec.K)]
    bodies = np.empty((spec.K,) + domain.shape, dtype=np.float32)
    for i, cls in enumerate(classes):
        body = GENERATORS[cls](domain, record_rng(seed, i), spec.generator)
        if not body.any():
            raise RuntimeError(f"generator {cls} produced an empty body for record {i}")
        bodies[i] = body
    phi = spec.rho0 * ag.apply_batch(bodies)
    b = spec.m0 * am.apply_batch(bodies)

    base_meta = {"rho0": spec.rho0, "m0": spec.m0, "n_M": list(spec.n_M)}
    meta = []
    for i, cls in enumerate(classes):
        sigma = spec.sigma if cls == "STOCH_NS" else 0.0
        meta.append({"class": cls, "seed": [int(seed), i], "noise_sigma": sigma, **base_meta})
        if sigma > 0:
            rng = record_rng(seed, i, stream=1)
            phi[i] = add_field_noise(phi[i], sigma, rng)
            b[i] = add_field_noise(b[i], sigma, rng)

    n_noisy = total_records(spec) - spec.K
    if n_noisy:
        pick = np.sort(np.random.default_rng([int(seed), 0x4E5]).choice(spec.K, n_noisy, replace=False))
        extra_phi = np.empty((n_noisy,) + plane.shape)
        extra_b = np.empty_like(extra_phi)
        for j, i in enumerate(pick):
            idx = spec.K + j
            rng = record_rng(seed, idx, stream=1)
            extra_phi[j] = add_field_noise(phi[i], spec.sigma, rng)
            extra_b[j] = add_field_noise(b[i], spec.sigma, rng)
            cls = "STOCH_NS" if classes[i] in ("STOCH", "STOCH_NS") else classes[i]
            meta.append({"class": cls, "seed": [int(seed), idx], "noise_sigma": spec.sigma,
                         "source": int(i), **base_meta})
        bodies = np.concatenate([bodies, bodies[pick]])
        phi = np.concatenate([phi, extra_phi])
        b = np.concatenate([b, extra_b])

    for m, sp, sb in zip(meta, field_scale(phi), field_scale(b)):
        m["phi_scale"], m["b_scale"] = float(sp), float(sb)
    return Dataset(domain, plane, constants, bodies, phi, b, meta, spec=spec.to_dict(), seed=int(seed))


def split_dataset(ds: Dataset, n_train: int, n_test: int, seed: int) -> Dataset:
    """Random disjoint train/test split; the remainder becomes the validation part."""
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ds):
        raise ValueError(f"cannot split {len(ds)} records into {n_train} train + {n_test} test")
    perm = np.random.default_rng([int(seed), 0x5B1]).permutation(len(ds))
    split = {
        "train": sorted(int(i) for i in perm[:n_train]),
        "test": sorted(int(i) for i in perm[n_train:n_train + n_test]),
        "valid": sorted(int(i) for i in perm[n_train + n_test:]),
    }
    return replace(ds, split=split)


def recompute_fields(ds: Dataset, i: int, operators=None) -> tuple[np.ndarray, np.ndarray]:
    m = ds.meta[i]
    ag, am = operators or make_operators(ds.domain, ds.plane, m["n_M"], ds.constants)
    return m["rho0"] * ag.apply(ds.bodies[i]), m["m0"] * am.apply(ds.bodies[i])


# --- serialization ----------------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(_DTYPES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != TENSOR_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise DatasetFormatError(f"{path}: truncated header")
    version, code, rank = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: tensor format version {version}, expected {FORMAT_VERSION}")
    if code not in _DTYPES:
        raise DatasetFormatError(f"{path}: unknown dtype code {code}")
    off = 16 + 8 * rank
    if len(data) < off:
        raise DatasetFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", data, 16)
    dt = _DTYPES[code]
    n = int(np.prod(shape)) if rank else 1
    if len(data) - off != n * dt.itemsize:
        raise DatasetFormatError(f"{path}: payload holds {len(data) - off} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(data, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tensor(path / "bodies.bin", ds.bodies.astype(np.float32))
    write_tensor(path / "phi.bin", ds.phi.astype(np.float64))
    write_tensor(path / "b.bin", ds.b.astype(np.float64))
    manifest = {
        "format": "geoinv-dataset",
        "version": FORMAT_VERSION,
        "domain": ds.domain.to_dict(),
        "plane": ds.plane.to_dict(),
        "constants": ds.constants.to_dict(),
        "spec": ds.spec,
        "seed": ds.seed,
        "count": len(ds),
        "split": {k: [int(i) for i in v] for k, v in ds.split.items()},
        "records": ds.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DatasetFormatError(f"{path}: no manifest") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: malformed manifest: {e}") from e
    if manifest.get("format") != "geoinv-dataset":
        raise DatasetFormatError(f"{path}: not a dataset manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: dataset version {manifest.get('version')}, expected {FORMAT_VERSION}")
    domain = VoxelDomain(**manifest["domain"])
    plane = SensorPlane(**manifest["plane"])
    constants = PhysicalConstants(**manifest["constants"])
    bodies = read_tensor(path / "bodies.bin")
    phi = read_tensor(path / "phi.bin")
    b = read_tensor(path / "b.bin")
    k = manifest["count"]
    if bodies.shape != (k,) + domain.shape or phi.shape != (k,) + plane.shape or b.shape != phi.shape:
        raise DatasetFormatError(f"{path}: tensor shapes disagree with the manifest")
    return Dataset(domain, plane, constants, bodies, phi, b, manifest["records"],
                   split={k_: list(v) for k_, v in manifest["split"].items()},
                   spec=manifest["spec"], seed=manifest["seed"])
