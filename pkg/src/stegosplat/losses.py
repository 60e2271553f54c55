"""Training objectives on tape tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    alpha: float = 0.2  # SSIM share of the photometric term
    beta: float = 0.01  # volume regularization
    lam: float = 10.0  # hidden-stream trade-off (0.1 for single-image hiding)
    bit_weight: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


def _check_pair(a: ad.Tensor, b: ad.Tensor) -> None:
    if a.shape != b.shape:
        raise ad.ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1_loss(a, b) -> ad.Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    _check_pair(a, b)
    return ad.mean(ad.abs_(ad.sub(a, b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


def _blur(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # zero-padded 'same' separable filter over the two spatial axes of [H,W,C]
    y = correlate1d(x, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, w, axis=1, mode="constant", cval=0.0)


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    w = gaussian_window()
    mx, my = _blur(x, w), _blur(y, w)
    sxx = _blur(x * x, w) - mx * mx
    syy = _blur(y * y, w) - my * my
    sxy = _blur(x * y, w) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_map(np.asarray(a, float), np.asarray(b, float)).mean())


def ssim_loss(a, b) -> ad.Tensor:
    """``1 - mean SSIM`` (11x11 Gaussian window, sigma 1.5, zero padding)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    _check_pair(a, b)
    if a.value.ndim == 2:
        return ssim_loss(ad.reshape(a, a.shape + (1,)), ad.reshape(b, b.shape + (1,)))
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ad.ShapeError(f"image {H}x{W} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x, y = a.value, b.value
    w = gaussian_window()
    mx, my = _blur(x, w), _blur(y, w)
    sxx = _blur(x * x, w) - mx * mx
    syy = _blur(y * y, w) - my * my
    sxy = _blur(x * y, w) - mx * my
    A1, A2 = 2 * mx * my + SSIM_C1, 2 * sxy + SSIM_C2
    B1, B2 = mx * mx + my * my + SSIM_C1, sxx + syy + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    n = smap.size

    def back(g):
        gs = -float(g) / n
        # partials of the SSIM map wrt the five local statistics
        d_mx = gs * (2 * my * A2 / (B1 * B2) - 2 * mx * smap / B1)
        d_my = gs * (2 * mx * A2 / (B1 * B2) - 2 * my * smap / B1)
        d_sxy = gs * (2 * A1 / (B1 * B2))
        d_sxx = gs * (-smap / B2)
        d_syy = d_sxx
        # sxx = E[x^2] - mx^2 etc.; the symmetric zero-padded filter is self-adjoint
        e_mx = _blur(d_mx - 2 * mx * d_sxx - my * d_sxy, w)
        e_my = _blur(d_my - 2 * my * d_syy - mx * d_sxy, w)
        e_xx, e_yy, e_xy = _blur(d_sxx, w), _blur(d_syy, w), _blur(d_sxy, w)
        gx = e_mx + 2 * x * e_xx + y * e_xy
        gy = e_my + 2 * y * e_yy + x * e_xy
        return gx, gy

    return ad.record(np.asarray(1.0 - smap.mean()), (a, b), back)


def vol_reg(scales: ad.Tensor) -> ad.Tensor:
    """Mean over Gaussians of the product of their three scales."""
    if scales.shape[0] == 0:
        return ad.constant(0.0)
    return ad.mean(ad.prod_rows(scales))


def photometric(render: ad.Tensor, target, scales: ad.Tensor, w: LossWeights) -> ad.Tensor:
    target = ad.as_tensor(target)
    terms = ad.add(ad.scale(l1_loss(render, target), 1.0 - w.alpha),
                   ad.scale(ssim_loss(render, target), w.alpha))
    return ad.add(terms, ad.scale(vol_reg(scales), w.beta))


def total_loss(I_ori, I_ori_gt, I_hid, I_hid_gt, s_ori, s_hid, w: LossWeights,
               lam: float | None = None) -> tuple[ad.Tensor, dict[str, float]]:
    """``l_ori + lam * l_hid``; pass ``I_hid=None`` to drop the hidden stream."""
    lam = w.lam if lam is None else lam
    l_ori = photometric(I_ori, I_ori_gt, s_ori, w)
    parts = {"l_ori": float(l_ori.value)}
    if I_hid is None:
        parts["l_hid"] = float("nan")
        return l_ori, parts
    l_hid = photometric(I_hid, I_hid_gt, s_hid, w)
    parts["l_hid"] = float(l_hid.value)
    total = ad.add(l_ori, ad.scale(l_hid, lam))
    parts["total"] = float(total.value)
    return total, parts


def bce_with_logits(logits: ad.Tensor, target) -> ad.Tensor:
    """Mean binary cross-entropy; ``target`` broadcasts over rows."""
    z = logits.value
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), z.shape)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return ad.record(np.asarray(loss.mean()), (logits,), lambda g: (float(g) * (p - t) / n,))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)
