"""Dice similarity, the separate/joint training losses and data-space residuals.

``dice(a, b) = 2 sum(a b) / sum(a^2 + b^2)`` with ``dice(0, 0) = 1``.
The numpy functions are used for reporting and refinement; the ``*_t``
variants operate on torch tensors and are what training differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def dice(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dice inputs differ in length: {a.size} vs {b.size}")
    den = float(a @ a + b @ b)
    if den == 0.0:
        return 1.0
    return 2.0 * float(a @ b) / den


def batch_dice(pred, truth) -> np.ndarray:
    """Per-record Dice over the leading batch axis."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    p = p.reshape(len(p), -1)
    t = t.reshape(len(t), -1)
    num = 2.0 * np.einsum("ij,ij->i", p, t)
    den = np.einsum("ij,ij->i", p, p) + np.einsum("ij,ij->i", t, t)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 1.0)


def loss_separate(pred, truth, reduction: str = "sum") -> float:
    terms = 1.0 - batch_dice(pred, truth)
    return float(terms.sum() if reduction == "sum" else terms.mean())


@dataclass
class LossBreakdown:
    loss_grav: float
    loss_mag: float
    structural_term: float
    total: float
    alpha: float
    batch: tuple = ()


def loss_joint(pred_g, truth_g, pred_m, truth_m, alpha: float, reduction: str = "sum", batch=()) -> LossBreakdown:
    """``sum_k [ (1-D(pg,tg))/2 + (1-D(pm,tm))/2 + alpha (1-D(pg,pm)) ]``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    lg = loss_separate(pred_g, truth_g, reduction)
    lm = loss_separate(pred_m, truth_m, reduction)
    s = loss_separate(pred_g, pred_m, reduction)
    return LossBreakdown(lg, lm, s, 0.5 * lg + 0.5 * lm + alpha * s, float(alpha), tuple(batch))


def _shift_nonneg(x: np.ndarray, y: np.ndarray):
    lo = min(float(x.min()), float(y.min()))
    if lo < 0:
        return x - lo, y - lo
    return x, y


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def residual_d1(x, y) -> float:
    """Squared Euclidean distance."""
    a, b = _values(x), _values(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    return float(d @ d)


def residual_d2(x, y) -> float:
    """``1 - dice`` after shifting both maps by their joint minimum when it is negative."""
    a, b = _values(x), _values(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a, b = _shift_nonneg(a, b)
    return 1.0 - dice(a, b)


RESIDUALS = {"d1": residual_d1, "d2": residual_d2}


# --- differentiable versions -------------------------------------------------------


def dice_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Soft Dice per record for ``(B, ...)`` tensors."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    num = 2.0 * (a * b).sum(dim=1)
    den = (a * a).sum(dim=1) + (b * b).sum(dim=1)
    empty = den == 0
    return torch.where(empty, torch.ones_like(den), num / torch.where(empty, torch.ones_like(den), den))


def _reduce(t: torch.Tensor, reduction: str) -> torch.Tensor:
    return t.sum() if reduction == "sum" else t.mean()


def loss_separate_t(pred, truth, reduction: str = "sum") -> torch.Tensor:
    return _reduce(1.0 - dice_t(pred, truth), reduction)


def loss_joint_t(pred_g, truth_g, pred_m, truth_m, alpha: float, reduction: str = "sum"):
    """Differentiable joint loss; returns ``(total, (grav, mag, structural))``."""
    lg = loss_separate_t(pred_g, truth_g, reduction)
    lm = loss_separate_t(pred_m, truth_m, reduction)
    s = loss_separate_t(pred_g, pred_m, reduction)
    return 0.5 * lg + 0.5 * lm + alpha * s, (lg, lm, s)
