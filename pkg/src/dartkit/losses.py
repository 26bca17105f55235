"""Training objectives: per-head MSE composite, tiered weighted MSE, AdvancedLoss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np

from .tensorcore import ops
from .tensorcore.tensor import Tensor, as_tensor, tabs

ArrayLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class CompositeWeights:
    alpha: float = 0.5  # continuity head
    beta: float = 1.5   # extreme head
    delta: float = 0.4  # fused output

    def __post_init__(self):
        if min(self.alpha, self.beta, self.delta) < 0:
            raise ValueError("composite weights must be non-negative")


@dataclass(frozen=True)
class TierSpec:
    """Pixel weights keyed to ground-truth temperature; coldest tier wins."""

    tiers: Tuple[Tuple[float, float], ...] = ((210.0, 25.0), (220.0, 10.0))
    base_weight: float = 1.0

    def __post_init__(self):
        th = [t for t, _ in self.tiers]
        ws = [w for _, w in self.tiers]
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("tier thresholds must be strictly increasing")
        if any(b >= a for a, b in zip(ws, ws[1:])):
            raise ValueError("tier weights must be strictly decreasing")
        if ws and self.base_weight > min(ws):
            raise ValueError("base weight must not exceed the smallest tier weight")

    def weights(self, t_gt: np.ndarray) -> np.ndarray:
        t_gt = np.asarray(t_gt)
        w = np.full(t_gt.shape, self.base_weight, dtype=np.float64)
        # warmest tier first so colder tiers overwrite it
        for thr, wt in reversed(self.tiers):
            w[t_gt <= thr] = wt
        return w


def _check_same(pred: Tensor, target: Tensor, what: str = "") -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{what}shape mismatch: pred {pred.shape} vs target {target.shape}")


def mse(pred: Tensor, target: ArrayLike) -> Tensor:
    target = as_tensor(target, pred.dtype)
    _check_same(pred, target, "mse: ")
    d = pred - target
    return (d * d).mean()


def tiered_weighted_mse(pred: Tensor, target: ArrayLike, t_gt: np.ndarray,
                        tiers: TierSpec = TierSpec(), normalize: str = "weights") -> Tensor:
    """Weighted squared error with weights from ``tiers.weights(t_gt)``.

    ``normalize="weights"`` divides by the weight sum; ``"pixels"`` divides by
    the pixel count.
    """
    target = as_tensor(target, pred.dtype)
    _check_same(pred, target, "tiered_weighted_mse: ")
    t_gt = t_gt.data if isinstance(t_gt, Tensor) else np.asarray(t_gt)
    if t_gt.shape != pred.shape:
        raise ValueError(f"tiered_weighted_mse: t_gt shape {t_gt.shape} != pred shape {pred.shape}")
    w = tiers.weights(t_gt)
    if normalize == "weights":
        w = w / w.sum()
    elif normalize == "pixels":
        w = w / w.size
    else:
        raise ValueError(f"unknown normalize mode {normalize!r}")
    d = pred - target
    return (d * d * w.astype(pred.dtype)).sum()


def composite_dart_loss(outputs, t_gt: np.ndarray, t_bg: ArrayLike, t_res: ArrayLike,
                        target_final: ArrayLike = None, weights: CompositeWeights = CompositeWeights(),
                        regime: str = "conservative", tiers: TierSpec = TierSpec(),
                        tier_normalize: str = "weights") -> Tuple[Tensor, Dict[str, float]]:
    """alpha*MSE(cont, T_BG) + beta*L_ext(ext, T_RES) + delta*MSE(final, T_GT).

    ``t_gt`` is always in kelvin (it keys the tier weights); the three targets
    may be in any consistent scaling, in which case pass the scaled ground
    truth as ``target_final``. ``L_ext`` is MSE for ``"conservative"`` and the
    tiered weighted MSE for ``"aggressive"``.
    """
    t_gt_arr = t_gt.data if isinstance(t_gt, Tensor) else np.asarray(t_gt)
    if target_final is None:
        target_final = t_gt_arr
    term_cont = mse(outputs.continuity, t_bg)
    if regime == "conservative":
        term_ext = mse(outputs.extreme, t_res)
    elif regime == "aggressive":
        term_ext = tiered_weighted_mse(outputs.extreme, t_res, t_gt_arr, tiers, tier_normalize)
    else:
        raise ValueError(f"regime must be 'conservative' or 'aggressive', got {regime!r}")
    term_final = mse(outputs.final, target_final)
    total = term_cont * weights.alpha + term_ext * weights.beta + term_final * weights.delta
    breakdown = {
        "total": float(total.data),
        "term_cont": weights.alpha * float(term_cont.data),
        "term_ext": weights.beta * float(term_ext.data),
        "term_final": weights.delta * float(term_final.data),
    }
    return total, breakdown


def _as_nchw(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x.reshape((1, 1) + x.shape)
    if x.ndim == 3:
        return x.reshape((x.shape[0], 1) + x.shape[1:])
    return x


def _box_filter(x: Tensor, window: int) -> Tensor:
    k = np.full((1, 1, window, window), 1.0 / (window * window), dtype=x.dtype)
    return ops.conv2d(x, Tensor(k))


def ssim(pred: ArrayLike, target: ArrayLike, window: int = 11, data_range: float = 200.0) -> Tensor:
    """Mean local SSIM over all valid ``window``×``window`` uniform windows."""
    pred = as_tensor(pred)
    target = as_tensor(target, pred.dtype)
    _check_same(pred, target, "ssim: ")
    if min(pred.shape[-2:]) < window:
        raise ValueError(f"ssim: field {pred.shape[-2:]} smaller than the {window}×{window} window")
    x, y = _as_nchw(pred), _as_nchw(target)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _box_filter(x, window), _box_filter(y, window)
    sxx = _box_filter(x * x, window) - mx * mx
    syy = _box_filter(y * y, window) - my * my
    sxy = _box_filter(x * y, window) - mx * my
    num = (mx * my * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).mean()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def sobel(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Horizontal and vertical Sobel responses with replicate padding."""
    x = _as_nchw(x)
    if min(x.shape[-2:]) < 3:
        raise ValueError(f"sobel: field {x.shape[-2:]} smaller than 3×3")
    xp = ops.pad_replicate(x, 1)
    gx = ops.conv2d(xp, Tensor(SOBEL_X.astype(x.dtype)[None, None]))
    gy = ops.conv2d(xp, Tensor(SOBEL_Y.astype(x.dtype)[None, None]))
    return gx, gy


def sobel_gradient_l1(pred: ArrayLike, target: ArrayLike) -> Tensor:
    pred = as_tensor(pred)
    target = as_tensor(target, pred.dtype)
    _check_same(pred, target, "sobel_gradient_l1: ")
    px, py = sobel(pred)
    tx, ty = sobel(target)
    return (tabs(px - tx) + tabs(py - ty)).mean()


def advanced_loss(pred: Tensor, target: ArrayLike, w_mse: float = 1.0, w_ssim: float = 0.2,
                  w_grad: float = 0.1, data_range: float = 200.0) -> Tuple[Tensor, Dict[str, float]]:
    """MSE + (1 - SSIM) + Sobel-gradient L1, returned with its term breakdown."""
    target = as_tensor(target, pred.dtype)
    t_mse = mse(pred, target)
    t_ssim = 1.0 - ssim(pred, target, data_range=data_range)
    t_grad = sobel_gradient_l1(pred, target)
    total = t_mse * w_mse + t_ssim * w_ssim + t_grad * w_grad
    return total, {
        "total": float(total.data),
        "mse": w_mse * float(t_mse.data),
        "ssim": w_ssim * float(t_ssim.data),
        "grad": w_grad * float(t_grad.data),
    }
