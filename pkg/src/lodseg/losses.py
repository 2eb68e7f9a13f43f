"""Training objective (soft Dice / cross-entropy mixture) and the hard Dice metric.

All soft losses take a one-hot target ``y`` and per-voxel probabilities ``F``
with the class axis first, ``(C, ...)``, or second for batched input,
``(B, C, ...)``. Batched input pools every voxel of the batch into one voxel
set. NumPy inputs return Python floats, torch inputs return scalar tensors so
they can be back-propagated.

The minimized quantity is

    lam * CE + (1 - lam) * (1 - soft_dice)

with ``CE = -sum(y * log F)`` (voxel-averaged by default). This is the usual
minimization form; with ``lam = 0`` it is plain Dice loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0
    epsilon: float = 1e-7
    voxel_average: bool = True
    include_background: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _prepare(y, F):
    is_numpy = not (torch.is_tensor(y) or torch.is_tensor(F))
    if is_numpy:
        y = torch.as_tensor(np.asarray(y, dtype=np.float64))
        F = torch.as_tensor(np.asarray(F, dtype=np.float64))
    else:
        F = torch.as_tensor(F)
        y = torch.as_tensor(y, dtype=F.dtype, device=F.device)
    if y.shape != F.shape:
        raise ValueError(f"shape mismatch: y {tuple(y.shape)} vs F {tuple(F.shape)}")
    if y.ndim >= 5:
        # (B, C, ...) -> (C, B, ...)
        y = y.transpose(0, 1)
        F = F.transpose(0, 1)
    C = y.shape[0]
    return y.reshape(C, -1), F.reshape(C, -1), is_numpy


def _out(value, is_numpy):
    return float(value) if is_numpy else value


def _cross_entropy(y, F, cfg: LossConfig):
    logF = torch.log(torch.clamp(F, min=cfg.epsilon, max=1.0))
    total = -(y * logF).sum()
    return total / y.shape[1] if cfg.voxel_average else total


def _dice_loss(y, F, cfg: LossConfig):
    if not cfg.include_background:
        y, F = y[1:], F[1:]
    C = y.shape[0]
    inter = (y * F).sum(dim=1)
    denom = (y * y + F * F).sum(dim=1) + cfg.epsilon
    return 1.0 - (2.0 / C) * (inter / denom).sum()


def cross_entropy(y, F, cfg: LossConfig = LossConfig()):
    y, F, is_numpy = _prepare(y, F)
    return _out(_cross_entropy(y, F, cfg), is_numpy)


def dice_loss(y, F, cfg: LossConfig = LossConfig()):
    y, F, is_numpy = _prepare(y, F)
    return _out(_dice_loss(y, F, cfg), is_numpy)


def mixed_loss(y, F, cfg: LossConfig = LossConfig()):
    y, F, is_numpy = _prepare(y, F)
    # Skip the unused term so lam=0 / lam=1 reproduce the components exactly.
    if cfg.lam == 0.0:
        value = _dice_loss(y, F, cfg)
    elif cfg.lam == 1.0:
        value = _cross_entropy(y, F, cfg)
    else:
        value = cfg.lam * _cross_entropy(y, F, cfg) + (1.0 - cfg.lam) * _dice_loss(y, F, cfg)
    return _out(value, is_numpy)


def mixed_loss_grad(y, F, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Closed-form d(mixed_loss)/dF for NumPy inputs of shape (C, ...).

    Written out by hand (not autograd) so gradient checks compare two
    independent routes.
    """
    y = np.asarray(y, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if y.shape != F.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs F {F.shape}")
    shape = F.shape
    C = shape[0]
    y2 = y.reshape(C, -1)
    F2 = F.reshape(C, -1)
    nvox = y2.shape[1]

    inside = (F2 > cfg.epsilon) & (F2 < 1.0)
    g_ce = np.where(inside, -y2 / np.where(inside, F2, 1.0), 0.0)
    if cfg.voxel_average:
        g_ce /= nvox

    g_dice = np.zeros_like(F2)
    first = 1 if not cfg.include_background else 0
    n_used = C - first
    ys, Fs = y2[first:], F2[first:]
    inter = (ys * Fs).sum(axis=1, keepdims=True)
    denom = (ys * ys + Fs * Fs).sum(axis=1, keepdims=True) + cfg.epsilon
    g_dice[first:] = -(2.0 / n_used) * (ys / denom - 2.0 * Fs * inter / denom**2)

    grad = cfg.lam * g_ce + (1.0 - cfg.lam) * g_dice
    return grad.reshape(shape)


def dice_metric(pred, gt, class_index: int) -> float:
    """Hard Dice of the class masks; 1.0 when both masks are empty."""
    pred = np.asarray(getattr(pred, "data", pred))
    gt = np.asarray(getattr(gt, "data", gt))
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    a = pred == class_index
    b = gt == class_index
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def dice_per_class(pred, gt, num_classes: int) -> np.ndarray:
    """Hard Dice for every class in one pass over the grids."""
    pred = np.asarray(getattr(pred, "data", pred)).ravel().astype(np.int64)
    gt = np.asarray(getattr(gt, "data", gt)).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    n_pred = np.bincount(pred, minlength=num_classes)[:num_classes]
    n_gt = np.bincount(gt, minlength=num_classes)[:num_classes]
    n_both = np.bincount(gt[pred == gt], minlength=num_classes)[:num_classes]
    size = n_pred + n_gt
    out = np.ones(num_classes)
    nz = size > 0
    out[nz] = 2.0 * n_both[nz] / size[nz]
    return out
