"""Boundary-weighted binary cross-entropy plus soft Dice.

The training objective is ``mean(w * bce) + (1 - soft_dice)`` where the
per-pixel weight ``w`` grows near the ground-truth head boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from . import tensor as T
from .metrics import boundary_mask
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    omega0: float = 30.0
    sigma: float = 10.0
    clamp_eps: float = 1e-7
    smooth_eps: float = 1.0
    # "gaussian": 1 + w0*exp(-d^2 / 2 sigma^2); "literal": 1 + w0*exp(d / 2 sigma^2)
    exponent_form: str = "gaussian"

    def __post_init__(self):
        if self.omega0 < 0:
            raise ValueError("omega0 must be >= 0")
        if self.sigma <= 0 or self.clamp_eps <= 0 or self.smooth_eps <= 0:
            raise ValueError("sigma and epsilons must be positive")
        if self.exponent_form not in ("gaussian", "literal"):
            raise ValueError(f"unknown exponent form {self.exponent_form!r}")


def distance_map(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance (pixels) from every pixel to the nearest boundary pixel of ``mask``."""
    edge = boundary_mask(mask)
    if not edge.any():
        raise ValueError("mask has no boundary pixels; weight map is undefined")
    return ndimage.distance_transform_edt(~edge)


def weight_map(mask: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    d = distance_map(mask)
    if cfg.exponent_form == "gaussian":
        return 1.0 + cfg.omega0 * np.exp(-(d**2) / (2.0 * cfg.sigma**2))
    return 1.0 + cfg.omega0 * np.exp(d / (2.0 * cfg.sigma**2))


def weight_maps(gt: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Weight maps for a batch of masks shaped ``(n, 1, h, w)`` (or any ``(..., h, w)``)."""
    gt = np.asarray(gt)
    flat = gt.reshape((-1,) + gt.shape[-2:])
    return np.stack([weight_map(m, cfg) for m in flat]).reshape(gt.shape)


def _const(arr, like: Tensor) -> Tensor:
    arr = np.asarray(arr, dtype=like.dtype)
    if arr.shape != like.shape:
        raise ShapeError(f"shape mismatch: prediction {like.shape} vs target {arr.shape}")
    return Tensor(arr)


def soft_dice(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """``(2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)`` over all elements."""
    g = _const(gt, pred)
    inter = T.sum(pred * g)
    num = inter * 2.0 + cfg.smooth_eps
    den = T.sum(pred) + (float(g.data.sum()) + cfg.smooth_eps)
    return num / den


def bce(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-pixel binary cross-entropy with the prediction clamped to ``[eps, 1 - eps]``."""
    g = _const(gt, pred)
    eps = cfg.clamp_eps
    p = T.clamp(pred, eps, 1.0 - eps)
    pos = g * T.log(p, eps)
    neg = (1.0 - g) * T.log(1.0 - p, eps)
    return -(pos + neg)


def bce_mean(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    return T.mean(bce(pred, gt, cfg))


def l_ln(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig(), weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted BCE (mean over pixels) plus ``1 - soft_dice``.

    ``weights`` may be passed precomputed (same shape as ``gt``); otherwise
    they are derived from ``gt`` with :func:`weight_maps`.
    """
    if weights is None:
        weights = weight_maps(gt, cfg)
    w = _const(weights, pred)
    weighted = T.mean(w * bce(pred, gt, cfg))
    return weighted + (1.0 - soft_dice(pred, gt, cfg))
