"""Focal loss, dual cycle loss and the weighted training objective."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import EmbeddingBundle


@dataclass
class FocalConfig:
    gamma: float = 2.0
    n_classes: int = 2
    reduction: str = "mean"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.n_classes not in (2, 3):
            raise ValueError("n_classes must be 2 or 3")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass
class ObjectiveWeights:
    lambda1: float = 10.0
    lambda2: float = 1e-3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("objective weights must be >= 0")


@dataclass
class LossBreakdown:
    focal_main: object
    focal_aux: object
    l_fw: object
    l_bw: object
    l_dual: object
    total: object

    KEYS = ("focal_main", "focal_aux", "l_fw", "l_bw", "l_dual", "total")

    def as_floats(self) -> dict[str, float]:
        return {k: float(_detach(getattr(self, k))) for k in self.KEYS}

    def to_json_line(self, step: int) -> str:
        return json.dumps({"step": int(step), **self.as_floats()})

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_floats().values())


def _detach(v):
    return v.detach() if torch.is_tensor(v) else v


def _check_onehot(target: torch.Tensor, class_dim: int) -> None:
    if ((target != 0) & (target != 1)).any() or not torch.all(target.sum(class_dim) == 1):
        raise ValueError("focal target must be one-hot along the class axis")


def focal_loss(logits: torch.Tensor, target: torch.Tensor, cfg: FocalConfig | None = None,
               per_pixel: bool = False) -> torch.Tensor:
    """``-(1 - p_t)^gamma * log(p_t)`` with ``p_t`` the softmax probability of
    the target class.

    ``logits`` and ``target`` are ``(N, H, W)`` or ``(B, N, H, W)``; the class
    axis is third from last. ``mean`` reduction averages over every pixel of
    every batch item.
    """
    cfg = cfg or FocalConfig(n_classes=logits.shape[-3])
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    if logits.shape[-3] != cfg.n_classes:
        raise ValueError(f"expected {cfg.n_classes} classes, got {logits.shape[-3]}")
    if torch.isnan(logits).any():
        raise ValueError("NaN in logits")
    class_dim = logits.dim() - 3
    _check_onehot(target, class_dim)
    log_p = torch.log_softmax(logits, dim=class_dim)
    log_pt = (log_p * target.to(log_p.dtype)).sum(class_dim)
    pt = log_pt.exp()
    loss = -((1.0 - pt) ** cfg.gamma) * log_pt
    if per_pixel:
        return loss
    return loss.mean() if cfg.reduction == "mean" else loss.sum()


def focal_loss_grad(logits: np.ndarray, target: np.ndarray, gamma: float = 2.0,
                    reduction: str = "mean") -> np.ndarray:
    """Closed-form gradient of :func:`focal_loss` w.r.t. the logits, for
    ``(N, H, W)`` numpy arrays. Kept independent of autograd on purpose."""
    z = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    pt = (p * target).sum(axis=0)
    log_pt = np.log(pt)
    # dL/dp_t for L = -(1-p_t)^g log p_t
    if gamma == 0:
        dl_dpt = -1.0 / pt
    else:
        dl_dpt = gamma * (1 - pt) ** (gamma - 1) * log_pt - (1 - pt) ** gamma / pt
    # dp_t/dz_j = p_t (delta_tj - p_j)
    grad = dl_dpt[None] * pt[None] * (target - p)
    if reduction == "mean":
        grad = grad / pt.size
    return grad


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, per_pixel: bool = False) -> torch.Tensor:
    class_dim = logits.dim() - 3
    loss = -(torch.log_softmax(logits, dim=class_dim) * target).sum(class_dim)
    return loss if per_pixel else loss.mean()


def l1_sum(a: torch.Tensor, b: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """``sum``: element sum per sample, averaged over the leading batch axis.
    ``mean``: mean over all elements."""
    diff = (a - b).abs()
    if reduction == "mean":
        return diff.mean()
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return diff.sum() / diff.shape[0]


def dual_cycle_loss(bundle: EmbeddingBundle, reduction: str = "sum"):
    """Returns ``(l_fw, l_bw, l_dual)`` with ``l_fw = |X'' - X|_1`` and
    ``l_bw = |X_bar'' - X_bar|_1``."""
    if not bundle.has_top:
        raise ValueError("cycle loss requires a training-mode bundle (X_bar missing)")
    l_fw = l1_sum(bundle.X_dprime, bundle.X, reduction)
    l_bw = l1_sum(bundle.X_bar_dprime, bundle.X_bar, reduction)
    return l_fw, l_bw, l_fw + l_bw


def objective(focal_main, focal_aux, l_fw, l_bw, weights: ObjectiveWeights) -> LossBreakdown:
    if weights.lambda1 < 0 or weights.lambda2 < 0:
        raise ValueError("objective weights must be >= 0")
    for name, v in (("focal_main", focal_main), ("focal_aux", focal_aux), ("l_fw", l_fw), ("l_bw", l_bw)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise ValueError(f"{name} is not finite")
    l_dual = l_fw + l_bw
    total = weights.lambda1 * (focal_main + focal_aux) + weights.lambda2 * l_dual
    return LossBreakdown(focal_main, focal_aux, l_fw, l_bw, l_dual, total)


def onehot_target(class_ids: torch.Tensor, n_classes: int) -> torch.Tensor:
    """``(B, H, W)`` integer ids -> ``(B, N, H, W)`` float one-hot."""
    return torch.nn.functional.one_hot(class_ids.long(), n_classes).permute(0, 3, 1, 2).float()


def compute_losses(output, class_ids: torch.Tensor, focal: FocalConfig, weights: ObjectiveWeights,
                   cycle_reduction: str = "sum") -> LossBreakdown:
    target = onehot_target(class_ids, focal.n_classes).to(output.main_logits.dtype)
    f_main = focal_loss(output.main_logits, target, focal)
    f_aux = focal_loss(output.aux_logits, target, focal)
    l_fw, l_bw, _ = dual_cycle_loss(output.bundle, cycle_reduction)
    return objective(f_main, f_aux, l_fw, l_bw, weights)
