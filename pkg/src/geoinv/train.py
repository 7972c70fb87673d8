"""Lower-level (separate) and upper-level (joint) training of the inversion networks.

Epoch-level ``loss_train``/``loss_test`` are per-record averages over the
full split, so the two curves are comparable regardless of split sizes and
the stopping rule ``|loss_train - loss_test| >= epsilon`` is meaningful.
Batch losses used for the gradient steps are sums over the batch unless
``reduction="mean"``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .dataset import Dataset, DatasetSpec, GeneratorConfig, build_dataset, split_dataset
from .loss import batch_dice, loss_joint_t, loss_separate_t
from .model import Architecture, ModelCheckpoint, from_network, init_model, predict, prepare_input, to_network

MODES = ("separate_g", "separate_m", "joint")
LOG_COLUMNS = ("epoch", "loss_train", "loss_test", "loss_grav", "loss_mag", "structural", "lr", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3.0e-4
    batch_size: int = 64
    max_epochs: int = 300
    epsilon: float = 0.02
    alpha: float = 1.0
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "joint"
    reduction: str = "sum"
    strict: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate, batch_size, max_epochs and epsilon must be positive")
        if self.alpha < 0 or self.weight_decay < 0:
            raise ValueError("alpha and weight_decay must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")


@dataclass
class TrainReport:
    loss_train: list = field(default_factory=list)  # index = epoch, entry 0 before training
    loss_test: list = field(default_factory=list)
    components: list = field(default_factory=list)  # (grav, mag, structural) on the train split
    iter_stop: int = 0
    loss_result: float = math.nan
    wall_time: float = 0.0
    checkpoints: tuple = ()
    epoch_seconds: list = field(default_factory=list)
    first_epoch: int = 0

    def rows(self, lr: float, strict: bool = True) -> list[dict]:
        out = []
        for k in range(len(self.loss_train)):
            g, m, s = self.components[k]
            out.append({
                "epoch": self.first_epoch + k, "loss_train": self.loss_train[k], "loss_test": self.loss_test[k],
                "loss_grav": g, "loss_mag": m, "structural": s, "lr": lr,
                "seconds": 0.0 if strict else self.epoch_seconds[k],
            })
        return out


def write_log_csv(report: TrainReport, path, lr: float, strict: bool = True) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in report.rows(lr, strict):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def set_strict(strict: bool = True, threads: int | None = None) -> None:
    if strict:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif threads:
        torch.set_num_threads(threads)


# --- optimizer -------------------------------------------------------------------


def adamw_step(params, grads, state: dict, cfg: TrainConfig) -> dict:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``state`` holds ``t`` and the first/second moment tensors; pass ``{}``
    on the first call.
    """
    b1, b2 = cfg.betas
    lr, wd, eps = cfg.learning_rate, cfg.weight_decay, cfg.adam_eps
    if not state:
        state.update(t=0, m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params])
    if len(grads) != len(params):
        raise ValueError("parameter and gradient lists differ in length")
    for g in grads:
        if not torch.all(torch.isfinite(g)):
            raise TrainingError("non-finite gradient")
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.mul_(1.0 - lr * wd)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)
    return state


def optimizer_step(params, grads, state: dict, cfg: TrainConfig):
    return adamw_step(params, grads, state, cfg)


# --- stopping rule ------------------------------------------------------------------


def first_stop_epoch(loss_train, loss_test, epsilon: float, max_epochs: int | None = None) -> int:
    """First epoch ``>= 1`` with ``|train - test| >= epsilon``; the last epoch otherwise.

    Curves are indexed by epoch with entry 0 holding the pre-training values.
    """
    last = len(loss_train) - 1 if max_epochs is None else min(max_epochs, len(loss_train) - 1)
    for e in range(1, last + 1):
        if abs(loss_train[e] - loss_test[e]) >= epsilon:
            return e
    return last


# --- training -----------------------------------------------------------------------


def _field_tensors(ds: Dataset):
    phi = torch.from_numpy(prepare_input(ds.phi).astype(np.float32))
    b = torch.from_numpy(prepare_input(ds.b).astype(np.float32))
    bodies = torch.from_numpy(np.asarray(ds.bodies, dtype=np.float32))
    return phi, b, bodies


class _Job:
    """Networks, inputs and the loss for one training mode."""

    def __init__(self, ckpts, ds: Dataset, cfg: TrainConfig):
        self.cfg = cfg
        self.ckpts = list(ckpts)
        self.nets = [to_network(c) for c in self.ckpts]
        phi, b, self.bodies = _field_tensors(ds)
        if cfg.mode == "separate_g":
            self.inputs = [phi]
        elif cfg.mode == "separate_m":
            self.inputs = [b]
        else:
            self.inputs = [phi, b]
        if len(self.nets) != len(self.inputs):
            raise ValueError(f"mode {cfg.mode} needs {len(self.inputs)} network(s), got {len(self.nets)}")
        for c in self.ckpts:
            if c.arch.out_shape != tuple(ds.bodies.shape[1:]) or c.arch.in_shape != tuple(ds.phi.shape[1:]):
                raise ValueError("network shapes do not match the dataset geometry")

    def params(self):
        return [p for n in self.nets for p in n.parameters()]

    def loss(self, idx, alpha, reduction):
        t = self.bodies[idx]
        preds = [net(x[idx]) for net, x in zip(self.nets, self.inputs)]
        if self.cfg.mode == "joint":
            return loss_joint_t(preds[0], t, preds[1], t, alpha, reduction)
        lsep = loss_separate_t(preds[0], t, reduction)
        zero = torch.zeros(())
        comps = (lsep, zero, zero) if self.cfg.mode == "separate_g" else (zero, lsep, zero)
        return lsep, comps

    def evaluate(self, idx, chunk=256):
        """Per-record mean loss and components over ``idx``."""
        if len(idx) == 0:
            return math.nan, (math.nan, math.nan, math.nan)
        tot = np.zeros(4)
        with torch.no_grad():
            for s in range(0, len(idx), chunk):
                part = idx[s:s + chunk]
                total, comps = self.loss(part, self.cfg.alpha, "sum")
                tot += [float(total)] + [float(c) for c in comps]
        tot /= len(idx)
        return float(tot[0]), tuple(float(c) for c in tot[1:])


def train(models, ds: Dataset, cfg: TrainConfig, evaluator=None, progress=None) -> TrainReport:
    """Train one network (separate modes) or a pair (joint mode) with AdamW and early stopping.

    ``evaluator(epoch, nets) -> (loss_train, loss_test)`` replaces the
    per-epoch evaluation; it exists so stopping behavior can be driven by
    prescribed curves.
    """
    set_strict(cfg.strict)
    ckpts = [models] if isinstance(models, ModelCheckpoint) else list(models)
    train_idx = ds.indices("train")
    test_idx = ds.indices("test")
    if len(train_idx) == 0:
        raise ValueError("dataset has no training split")
    job = _Job(ckpts, ds, cfg)
    params = job.params()
    state: dict = {}
    start_epoch = ckpts[0].epoch
    step = ckpts[0].step
    report = TrainReport(first_epoch=start_epoch)
    t0 = time.perf_counter()

    def record(epoch, t_start):
        if evaluator is not None:
            ltr, lte = evaluator(epoch, job.nets)
            comps = (math.nan, math.nan, math.nan)
        else:
            ltr, comps = job.evaluate(train_idx)
            lte, _ = job.evaluate(test_idx)
        report.loss_train.append(float(ltr))
        report.loss_test.append(float(lte))
        report.components.append(comps)
        report.epoch_seconds.append(time.perf_counter() - t_start)

    record(start_epoch, t0)
    stop = 0
    for k in range(1, cfg.max_epochs + 1):
        epoch = start_epoch + k
        t_ep = time.perf_counter()
        order = np.random.default_rng([int(cfg.seed), int(epoch)]).permutation(train_idx)
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = torch.from_numpy(order[s:s + cfg.batch_size])
            total, _ = job.loss(idx, cfg.alpha, cfg.reduction)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = torch.autograd.grad(total, params)
            adamw_step(params, list(grads), state, cfg)
            step += 1
        record(epoch, t_ep)
        if progress:
            progress(epoch, report.loss_train[-1], report.loss_test[-1])
        stop = k
        if abs(report.loss_train[k] - report.loss_test[k]) >= cfg.epsilon:
            break

    report.iter_stop = start_epoch + stop
    report.loss_result = report.loss_test[stop]
    report.wall_time = time.perf_counter() - t0
    report.checkpoints = tuple(
        from_network(net, c, step=step, epoch=start_epoch + stop) for net, c in zip(job.nets, ckpts)
    )
    return report


# --- evaluation helpers -------------------------------------------------------------


def validate(ckpt: ModelCheckpoint | None, ds: Dataset, indices, field: str = "phi", predictor=None) -> float:
    """``sum over indices of (1 - dice(prediction, truth))`` with unthresholded predictions."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("validation set is empty")
    data = getattr(ds, field)[idx]
    preds = predictor(data) if predictor is not None else predict(ckpt, data)
    return float(np.sum(1.0 - batch_dice(preds, ds.bodies[idx])))


def structural_dice(ckpt_g: ModelCheckpoint, ckpt_m: ModelCheckpoint, ds: Dataset, indices) -> float:
    """Mean Dice between the gravity- and magnetic-network bodies over ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    pg = predict(ckpt_g, ds.phi[idx])
    pm = predict(ckpt_m, ds.b[idx])
    return float(np.mean(batch_dice(pg, pm)))


# --- experiment drivers ---------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list  # (alpha, loss_result, iter_stop)
    best_alpha: float
    reports: list


def alpha_sweep(ds: Dataset, cfg: TrainConfig, alphas, init: tuple[ModelCheckpoint, ModelCheckpoint]) -> SweepResult:
    """Joint training per alpha, each run starting from the same initial pair."""
    alphas = [float(a) for a in alphas]
    if len(alphas) < 1:
        raise ValueError("alpha grid is empty")
    rows, reports = [], []
    for a in alphas:
        rep = train(init, ds, replace(cfg, alpha=a, mode="joint"))
        rows.append((a, rep.loss_result, rep.iter_stop))
        reports.append(rep)
    best = min(rows, key=lambda r: (r[1], r[0]))[0]
    return SweepResult(rows, best, reports)


def write_table_csv(rows, header, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


@dataclass
class MixtureResult:
    lambdas: list
    valid_classes: list
    table: np.ndarray  # (len(lambdas), len(valid_classes) + 1), last column = 50/50 mix
    reports: list

    def rows(self):
        return [[lam] + [float(v) for v in row] for lam, row in zip(self.lambdas, self.table)]

    @property
    def header(self):
        return ["lambda"] + list(self.valid_classes) + ["MIX"]


def mixture_experiment(
    class_a: str,
    class_b: str,
    lambdas,
    cfg: TrainConfig,
    domain,
    plane,
    arch: Architecture,
    K: int = 200,
    valid_classes=("STOCH", "TOY", "SYN"),
    n_valid: int = 20,
    test_fraction: float = 0.1,
    gen: GeneratorConfig = GeneratorConfig(),
    sigma: float = 0.02,
    seed: int = 0,
    operators=None,
) -> MixtureResult:
    """Train on ``lam K`` class-A plus ``(1 - lam) K`` class-B records and validate per class.

    Validation sets are drawn once (independent seed) and shared by all
    lambdas; the last column validates on a 50/50 mix of the two training
    classes.
    """
    mode = cfg.mode if cfg.mode != "joint" else "separate_g"
    field_name = "b" if mode == "separate_m" else "phi"
    valid = {}
    for j, cls in enumerate(valid_classes):
        spec = DatasetSpec(K=n_valid, lam=1.0, class_a=cls, class_b=cls, generator=gen, sigma=sigma)
        valid[cls] = build_dataset(spec, domain, plane, seed=10_000 + 97 * seed + j, operators=operators)
    mix_spec = DatasetSpec(K=n_valid, lam=0.5, class_a=class_a, class_b=class_b, generator=gen, sigma=sigma)
    valid["MIX"] = build_dataset(mix_spec, domain, plane, seed=20_000 + seed, operators=operators)

    init = init_model(arch, cfg.seed)
    table = np.zeros((len(lambdas), len(valid_classes) + 1))
    reports = []
    for i, lam in enumerate(lambdas):
        spec = DatasetSpec(K=K, lam=float(lam), class_a=class_a, class_b=class_b, generator=gen, sigma=sigma)
        ds = build_dataset(spec, domain, plane, seed=seed, operators=operators)
        n_test = max(1, int(round(test_fraction * K)))
        ds = split_dataset(ds, K - n_test, n_test, seed)
        rep = train(init, ds, replace(cfg, mode=mode))
        reports.append(rep)
        for j, cls in enumerate(list(valid_classes) + ["MIX"]):
            v = valid[cls]
            table[i, j] = validate(rep.checkpoints[0], v, np.arange(len(v)), field_name)
    return MixtureResult([float(x) for x in lambdas], list(valid_classes), table, reports)
