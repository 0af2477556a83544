"""Tversky + cross-entropy objective.

All functions take class probabilities (``K x H x W`` or ``B x K x H x W``)
and an integer target (``H x W`` or ``B x H x W``). Counts are soft so the
Tversky term is differentiable; pixels equal to ``ignore_index`` are dropped
from every sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.7   # weight on false positives
    beta: float = 0.3    # weight on false negatives
    lambda_combined: float = 0.7
    ignore_index: int = 255
    smooth: float = 1e-6

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_combined"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")


def _flatten(probs, target, ignore_index):
    if probs.ndim == 3:
        probs = probs.unsqueeze(0)
        target = target.unsqueeze(0)
    if probs.ndim != 4 or target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"probs {tuple(probs.shape)} and target {tuple(target.shape)} do not align")
    K = probs.shape[1]
    p = probs.permute(0, 2, 3, 1).reshape(-1, K)
    t = target.reshape(-1).long()
    keep = t != ignore_index
    p, t = p[keep], t[keep]
    if t.numel() and (t.min() < 0 or t.max() >= K):
        raise ValueError(f"target values outside [0, {K}) besides ignore_index")
    return p, t, K


def soft_counts(probs, target, config: LossConfig = LossConfig()):
    """Per-class soft TP, FP, FN (each a length-K tensor)."""
    p, t, K = _flatten(probs, target, config.ignore_index)
    y = F.one_hot(t, K).to(p.dtype)
    tp = (p * y).sum(0)
    fp = (p * (1 - y)).sum(0)
    fn = ((1 - p) * y).sum(0)
    return tp, fp, fn


def tversky_from_counts(tp, fp, fn, alpha, beta, smooth=1e-6):
    return (tp + smooth) / (tp + alpha * fp + beta * fn + smooth)


def tversky_index(probs, target, k: int, config: LossConfig = LossConfig()) -> torch.Tensor:
    tp, fp, fn = soft_counts(probs, target, config)
    return tversky_from_counts(tp[k], fp[k], fn[k], config.alpha, config.beta, config.smooth)


def tversky_loss(probs, target, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Macro average of (1 - Tversky index) over classes present in the
    target or in the argmax prediction; zero when nothing is scored."""
    p, t, K = _flatten(probs, target, config.ignore_index)
    if t.numel() == 0:
        return probs.sum() * 0
    y = F.one_hot(t, K).to(p.dtype)
    tp = (p * y).sum(0)
    fp = (p * (1 - y)).sum(0)
    fn = ((1 - p) * y).sum(0)
    ti = tversky_from_counts(tp, fp, fn, config.alpha, config.beta, config.smooth)
    present = torch.zeros(K, dtype=torch.bool, device=p.device)
    present[t.unique()] = True
    present[p.argmax(1).unique()] = True
    return (1 - ti)[present].mean()


def cross_entropy_loss(probs, target, config: LossConfig = LossConfig()) -> torch.Tensor:
    p, t, _ = _flatten(probs, target, config.ignore_index)
    if t.numel() == 0:
        return probs.sum() * 0
    picked = p.gather(1, t.unsqueeze(1)).squeeze(1)
    return -picked.clamp_min(PROB_FLOOR).log().mean()


def combined_loss(probs, target, config: LossConfig = LossConfig()) -> torch.Tensor:
    lam = config.lambda_combined
    # skip the unused term so lambda in {0, 1} reproduces the single loss exactly
    if lam == 1.0:
        return tversky_loss(probs, target, config)
    if lam == 0.0:
        return cross_entropy_loss(probs, target, config)
    return lam * tversky_loss(probs, target, config) + (1 - lam) * cross_entropy_loss(probs, target, config)
