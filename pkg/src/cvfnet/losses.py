"""Classification, regression and direction losses with fused gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, TrainingDivergenceError
from .tensor import Tensor, apply_op, sigmoid_np


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    beta: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.focal_alpha, self.focal_gamma) <= 0:
            raise ConfigurationError("loss weights and focal parameters must be positive")


def _softplus(a):
    return np.logaddexp(0.0, a)


def focal_loss(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None,
               alpha: float = 0.25, gamma: float = 2.0, normalizer: Optional[float] = None) -> Tensor:
    """Sigmoid focal loss ``-a_t (1 - p_t)^gamma log p_t`` summed over entries.

    ``targets`` holds 0/1 per logit. ``weights`` (broadcastable over the
    leading axes) masks out ignored anchors. Divided by the number of
    positive entries (at least 1) unless ``normalizer`` is given.
    """
    x = logits.data.astype(np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise DimensionError(f"focal_loss: targets {t.shape} vs logits {x.shape}")
    wt = np.ones_like(x) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=np.float64).reshape(np.shape(weights) + (1,) * (x.ndim - np.ndim(weights))),
        x.shape)
    if normalizer is None:
        normalizer = float((t * (wt > 0)).sum())
    norm = max(normalizer, 1.0)
    sign = np.where(t > 0, 1.0, -1.0)
    z = sign * x
    a_t = np.where(t > 0, alpha, 1.0 - alpha)
    q = sigmoid_np(-z)  # 1 - p_t
    sp_neg = _softplus(-z)  # -log p_t
    qg = q ** gamma
    val = float((wt * a_t * qg * sp_neg).sum()) / norm

    def bw(g):
        dz = -gamma * qg * (1.0 - q) * sp_neg - qg * q
        return ((g * wt * a_t * dz * sign / norm).astype(logits.dtype),)

    return apply_op(np.asarray(val, dtype=logits.dtype), (logits,), bw, "focal_loss")


def smooth_l1(pred: Tensor, target: np.ndarray, normalizer: Optional[float] = None) -> Tensor:
    """Huber (beta = 1) summed over components, averaged over rows."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"smooth_l1: target {t.shape} vs prediction {pred.shape}")
    diff = pred.data - t
    ad = np.abs(diff)
    n = pred.shape[0] if normalizer is None else normalizer
    norm = max(float(n), 1.0)
    val = float(np.where(ad < 1.0, 0.5 * diff * diff, ad - 0.5).sum()) / norm

    def bw(g):
        return (g * np.where(ad < 1.0, diff, np.sign(diff)) / norm,)

    return apply_op(np.asarray(val, dtype=pred.dtype), (pred,), bw, "smooth_l1")


def smooth_l1_value(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def _value(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def loss_total(cls, reg, direction, cfg: LossConfig = LossConfig()):
    """``cls + alpha * reg + beta * dir``; returns (total, breakdown)."""
    parts = {"cls": _value(cls), "reg": _value(reg), "dir": _value(direction)}
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDivergenceError(f"non-finite loss component(s): {', '.join(bad)}")
    if all(isinstance(v, Tensor) for v in (cls, reg, direction)):
        total = T.add(T.add(cls, T.mul_scalar(reg, cfg.alpha)), T.mul_scalar(direction, cfg.beta))
        parts["total"] = total.item()
        return total, parts
    total = parts["cls"] + cfg.alpha * parts["reg"] + cfg.beta * parts["dir"]
    parts["total"] = total
    return total, parts
