"""Numerical self-checks behind ``dctbev gradcheck``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .losses import FocalConfig, dual_cycle_loss, focal_loss, focal_loss_grad
from .model import CrossViewAttention, EmbeddingBundle, ViewProjection


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error <= self.tolerance


def _ce_oracle(logits: np.ndarray, target: int) -> float:
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return lse - logits[target]


def check_focal_oracle(focal_fn) -> CheckResult:
    logits = torch.zeros(2, 1, 1, dtype=torch.float64)
    target = torch.tensor([1.0, 0.0], dtype=torch.float64).view(2, 1, 1)
    got = float(focal_fn(logits, target, FocalConfig(2.0, 2), per_pixel=True)[0, 0])
    return CheckResult("focal_oracle", abs(got - 0.25 * math.log(2)), 1e-9)


def check_focal_vs_ce(focal_fn, n_instances=100, seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        logits = rng.normal(0, 2, size=(3, 4, 4))
        ids = rng.integers(0, 3, size=(4, 4))
        target = np.eye(3)[ids].transpose(2, 0, 1)
        got = focal_fn(torch.from_numpy(logits), torch.from_numpy(target), FocalConfig(0.0, 3),
                       per_pixel=True).numpy()
        for i in range(4):
            for j in range(4):
                worst = max(worst, abs(got[i, j] - _ce_oracle(list(logits[:, i, j]), ids[i, j])))
    return CheckResult("focal_gamma0_equals_ce", worst, 1e-10)


def focal_fd_gradient(focal_fn, logits: np.ndarray, target: np.ndarray, gamma=2.0, h=1e-6) -> np.ndarray:
    cfg = FocalConfig(gamma, logits.shape[0])
    t = torch.from_numpy(target)
    grad = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        fu = float(focal_fn(torch.from_numpy(up), t, cfg))
        fd = float(focal_fn(torch.from_numpy(dn), t, cfg))
        grad[idx] = (fu - fd) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def check_focal_gradient(focal_fn, n_instances=5, seed=1) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    closed, auto = 0.0, 0.0
    for _ in range(n_instances):
        logits = rng.normal(0, 1.5, size=(3, 4, 4))
        target = np.eye(3)[rng.integers(0, 3, size=(4, 4))].transpose(2, 0, 1)
        fd = focal_fd_gradient(focal_fn, logits, target)
        closed = max(closed, relative_error(focal_loss_grad(logits, target, 2.0), fd))
        x = torch.from_numpy(logits).requires_grad_(True)
        focal_fn(x, torch.from_numpy(target), FocalConfig(2.0, 3)).backward()
        auto = max(auto, relative_error(x.grad.numpy(), fd))
    return [CheckResult("focal_grad_closed_form_vs_fd", closed, 1e-4),
            CheckResult("focal_grad_autograd_vs_fd", auto, 1e-4)]


def check_dual_cycle() -> list[CheckResult]:
    shape = (1, 2, 1, 1)
    g, f = ViewProjection(shape[1:], 4).double(), ViewProjection(shape[1:], 4).double()
    g.set_linear_map(torch.eye(2, dtype=torch.float64))
    f.set_linear_map(torch.eye(2, dtype=torch.float64))
    x = torch.tensor([1.0, -2.0], dtype=torch.float64).view(shape)
    x_bar = torch.tensor([3.0, 1.0], dtype=torch.float64).view(shape)
    with torch.no_grad():
        bundle = EmbeddingBundle(x, g(x), f(g(x)), x_bar, g(f(x_bar)))
    identity = float(dual_cycle_loss(bundle)[2])
    toy = EmbeddingBundle(x.view(1, 2), 0.8 * x.view(1, 2), 0.8 * x.view(1, 2), x_bar.view(1, 2),
                          0.8 * x_bar.view(1, 2))
    l_fw, l_bw, l_dual = (float(v) for v in dual_cycle_loss(toy))
    toy_err = max(abs(l_fw - 0.6), abs(l_bw - 0.8), abs(l_dual - 1.4))
    return [CheckResult("dual_cycle_identity_zero", abs(identity), 0.0),
            CheckResult("dual_cycle_toy_values", toy_err, 1e-9)]


def check_attention_rows(seed=0) -> CheckResult:
    torch.manual_seed(seed)
    attn = CrossViewAttention(16, 4, 9)
    xp, x = torch.randn(2, 16, 3, 3) * 3, torch.randn(2, 16, 3, 3) * 3
    with torch.no_grad():
        _, w = attn(xp, x, return_weights=True)
    err = float((w.sum(-1) - 1).abs().max())
    if (w < 0).any():
        err = float("inf")
    return CheckResult("attention_rows_sum_to_one", err, 1e-5)


def run_checks(focal_fn: Callable = focal_loss) -> list[CheckResult]:
    results = [check_focal_oracle(focal_fn), check_focal_vs_ce(focal_fn)]
    results += check_focal_gradient(focal_fn)
    results += check_dual_cycle()
    results.append(check_attention_rows())
    return results
