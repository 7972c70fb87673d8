"""Encoder-decoder network mapping a ``1 x mx x my`` field map to ``nz x nx x ny`` occupancy.

The depth axis of the output is produced as the channel axis of the last
layer, so output channel ``k`` is the constant-depth slice ``k``.
Smooth activations and average pooling keep the network differentiable
everywhere, which the finite-difference gradient checks rely on.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = b"GINVCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


class NonFiniteError(FloatingPointError):
    """A layer produced NaN or infinity."""


@dataclass(frozen=True)
class Architecture:
    in_shape: tuple = (32, 32)
    out_depth: int = 16
    depth: int = 3
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    skips: tuple = (True, True, True)

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "skips", tuple(bool(v) for v in self.skips))
        if len(self.channels) != self.depth or len(self.skips) != self.depth:
            raise ValueError(f"need {self.depth} channel counts and skip flags")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        f = 2 ** self.depth
        if any(n % f for n in self.in_shape):
            raise ValueError(f"spatial dims {self.in_shape} not divisible by 2^depth = {f}")

    @property
    def out_shape(self) -> tuple:
        return (self.out_depth,) + self.in_shape

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DESK_ARCH = Architecture(in_shape=(8, 8), out_depth=4, depth=2, channels=(8, 16), skips=(True, True))
FULL_ARCH = Architecture()


def _block(c_in, c_out, k):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, padding=k // 2), nn.SiLU(),
        nn.Conv2d(c_out, c_out, k, padding=k // 2), nn.SiLU(),
    )


class UNet(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        k = arch.kernel
        ch = arch.channels
        self.down = nn.ModuleList()
        c_prev = 1
        for c in ch:
            self.down.append(_block(c_prev, c, k))
            c_prev = c
        self.pool = nn.AvgPool2d(2)
        self.bottleneck = _block(ch[-1], 2 * ch[-1], k)
        c_prev = 2 * ch[-1]
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c, skip in zip(reversed(ch), reversed(arch.skips)):
            self.up.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c_prev, c, k, padding=k // 2)))
            self.dec.append(_block(2 * c if skip else c, c, k))
            c_prev = c
        self.head = nn.Conv2d(ch[0], arch.out_depth, 1)

    def forward(self, x):
        skips = []
        for blk in self.down:
            x = blk(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip, use in zip(self.up, self.dec, reversed(skips), reversed(self.arch.skips)):
            x = up(x)
            if use:
                x = torch.cat([x, skip], dim=1)
            x = dec(x)
        return torch.sigmoid(self.head(x))


@dataclass
class ModelCheckpoint:
    arch: Architecture
    params: np.ndarray  # float32, flat
    seed: int = 0
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float32)
        n = param_count(self.arch)
        if self.params.shape != (n,):
            raise ValueError(f"parameter vector has {self.params.size} entries, architecture needs {n}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("checkpoint parameters are not finite")


def param_count(arch: Architecture) -> int:
    return sum(p.numel() for p in UNet(arch).parameters())


def init_model(arch: Architecture, seed: int) -> ModelCheckpoint:
    """Fan-in scaled normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    net = UNet(arch)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x4D4F44])))
    chunks = []
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            chunks.append(np.zeros(p.numel()))
        else:
            fan_in = p[0].numel()
            chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=p.numel()))
    return ModelCheckpoint(arch, np.concatenate(chunks).astype(np.float32), seed=int(seed))


def to_network(ckpt: ModelCheckpoint, dtype=torch.float32) -> UNet:
    net = UNet(ckpt.arch).to(dtype)
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(torch.from_numpy(ckpt.params.astype(np.float64)).to(dtype), net.parameters())
    return net


def from_network(net: UNet, ckpt: ModelCheckpoint, **changes) -> ModelCheckpoint:
    vec = torch.nn.utils.parameters_to_vector(net.parameters()).detach().to(torch.float32).numpy()
    return replace(ckpt, params=vec.copy(), **changes)


def prepare_input(values) -> np.ndarray:
    """Stack of field maps scaled by their per-map max-abs value, shape ``(B, 1, mx, my)``."""
    v = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    scale = np.abs(v.reshape(len(v), -1)).max(axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    return (v / scale[:, None, None])[:, None]


def predict(ckpt: ModelCheckpoint, inputs, normalize: bool = True, net: UNet | None = None) -> np.ndarray:
    """Continuous occupancy in (0, 1); ``(nz, nx, ny)`` for one map, ``(B, nz, nx, ny)`` for a stack."""
    v = np.asarray(getattr(inputs, "values", inputs), dtype=np.float64)
    single = v.ndim == 2
    if v.shape[-2:] != ckpt.arch.in_shape:
        raise ValueError(f"input shape {v.shape[-2:]} does not match architecture {ckpt.arch.in_shape}")
    x = prepare_input(v) if normalize else (v[None] if single else v)[:, None]
    net = net or to_network(ckpt)
    net.eval()
    with torch.no_grad():
        out = net(torch.from_numpy(x).to(next(net.parameters()).dtype)).numpy().astype(np.float64)
    return out[0] if single else out


def _finite_hooks(net: nn.Module):
    handles = []
    for name, mod in net.named_modules():
        if name and not list(mod.children()):
            def hook(m, inp, out, name=name):
                if not torch.all(torch.isfinite(out)):
                    raise NonFiniteError(f"non-finite output in layer {name} ({m.__class__.__name__})")
            handles.append(mod.register_forward_hook(hook))
    return handles


def backward(ckpt: ModelCheckpoint, inputs, grad_outputs, dtype=torch.float64, normalize: bool = True) -> np.ndarray:
    """Vector-Jacobian product: gradient w.r.t. the flat parameters of ``sum(out * grad_outputs)``."""
    v = np.asarray(inputs, dtype=np.float64)
    x = prepare_input(v) if normalize else v[:, None]
    g = np.asarray(grad_outputs, dtype=np.float64)
    if g.shape != (len(x),) + ckpt.arch.out_shape:
        raise ValueError(f"output gradient shape {g.shape} does not match {(len(x),) + ckpt.arch.out_shape}")
    net = to_network(ckpt, dtype)
    handles = _finite_hooks(net)
    try:
        out = net(torch.from_numpy(x).to(dtype))
    finally:
        for h in handles:
            h.remove()
    grads = torch.autograd.grad(out, list(net.parameters()), grad_outputs=torch.from_numpy(g).to(dtype))
    return torch.cat([gr.reshape(-1) for gr in grads]).detach().numpy().astype(np.float64)


def threshold_body(pred, tau: float = 0.5) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(pred) >= tau).astype(np.float32)


# --- checkpoint files ---------------------------------------------------------------


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    desc = {
        "arch": ckpt.arch.to_dict(),
        "arch_hash": ckpt.arch.hash(),
        "seed": int(ckpt.seed),
        "step": int(ckpt.step),
        "epoch": int(ckpt.epoch),
        "n_params": int(ckpt.params.size),
    }
    blob = json.dumps(desc, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(ckpt.params.astype("<f4").tobytes())


def load_checkpoint(path, expected_arch: Architecture | None = None) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if len(data) < 16 + n:
        raise CheckpointError(f"{path}: truncated descriptor")
    try:
        desc = json.loads(data[16:16 + n])
        arch = Architecture.from_dict(desc["arch"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad architecture descriptor: {e}") from e
    if arch.hash() != desc.get("arch_hash"):
        raise CheckpointError(f"{path}: architecture hash mismatch")
    if expected_arch is not None and expected_arch.hash() != arch.hash():
        raise CheckpointError(f"{path}: checkpoint architecture differs from the requested one")
    payload = data[16 + n:]
    if len(payload) != 4 * desc["n_params"]:
        raise CheckpointError(f"{path}: parameter payload has {len(payload)} bytes, expected {4 * desc['n_params']}")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return ModelCheckpoint(arch, params, seed=desc["seed"], step=desc["step"], epoch=desc["epoch"])
