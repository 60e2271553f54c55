"""Differentiable depth-sorted alpha blending of neural Gaussians.

Every splat touches the pixels inside a square of half-width
``cutoff_sigma * sqrt(lambda_max)`` around its mean.  (splat, pixel) pairs are
generated in global front-to-back order, regrouped per pixel with a stable
sort, and blended on a padded ``[pixels, depth-slots]`` grid so the
transmittance is an exact cumulative product.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import (SINGULAR_DET, Camera, conic, conic_vjp_to_cov, covariance3d_batch,
                       project_cov, project_means)


@dataclass
class RasterSettings:
    sigma_max: float = 0.99
    t_min: float = 1e-4
    cutoff_sigma: float = 6.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class Gaussians:
    """Batch of renderable Gaussians; every field is a tape tensor."""

    means: ad.Tensor  # [N,3]
    colors: ad.Tensor  # [N,3]
    opacity: ad.Tensor  # [N]
    quats: ad.Tensor  # [N,4]
    scales: ad.Tensor  # [N,3]

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_arrays(cls, means, colors, opacity, quats, scales, requires_grad=False) -> "Gaussians":
        mk = ad.parameter if requires_grad else ad.constant
        return cls(mk(means), mk(colors), mk(np.asarray(opacity).reshape(-1)), mk(quats), mk(scales))


@dataclass
class RenderOutput:
    image: np.ndarray  # [H,W,3]
    image_t: ad.Tensor
    means2d: ad.Tensor
    visible: np.ndarray  # bool [N]: splat touched at least one pixel
    skipped: int  # singular covariances
    ndc_scale: tuple[float, float]
    tape: ad.Tape | None = field(default=None, repr=False)


class BackwardNotRun(RuntimeError):
    pass


def render(gaussians: Gaussians, cam: Camera, settings: RasterSettings | None = None) -> RenderOutput:
    settings = settings or RasterSettings()
    q = ad.normalize_rows(gaussians.quats)
    cov3 = covariance3d_batch(q, gaussians.scales)
    m2, depth, valid = project_means(gaussians.means, cam)
    cov2 = project_cov(gaussians.means, cov3, cam)
    img, visible, skipped = rasterize(m2, cov2, gaussians.opacity, gaussians.colors, depth, valid,
                                      cam.width, cam.height, settings)
    return RenderOutput(image=img.value, image_t=img, means2d=m2, visible=visible, skipped=skipped,
                        ndc_scale=(0.5 * cam.width, 0.5 * cam.height), tape=ad.active_tape())


def screen_gradients(out: RenderOutput, ndc: bool = False) -> np.ndarray:
    """Per-Gaussian norm of the loss gradient wrt its 2D mean.

    With ``ndc=True`` the gradient is expressed in normalized device
    coordinates (pixel gradient times half the image size), the scale the
    densification thresholds are calibrated in.
    """
    if out.tape is None or not out.tape.backward_done:
        raise BackwardNotRun("screen gradients requested before a backward pass")
    g = out.means2d.grad
    if g is None:
        g = np.zeros(out.means2d.shape)
    if ndc:
        g = g * np.asarray(out.ndc_scale)[None, :]
    return np.sqrt((g * g).sum(axis=1)) * out.visible


def _pairs(m2, A, B, C, lam_max, order, W, H, cutoff):
    r = cutoff * np.sqrt(lam_max[order])
    mx, my = m2[order, 0], m2[order, 1]
    x0 = np.maximum(np.ceil(mx - r), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mx + r), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(my - r), 0).astype(np.int64)
    y1 = np.minimum(np.floor(my + r), H - 1).astype(np.int64)
    wx = np.maximum(x1 - x0 + 1, 0)
    wy = np.maximum(y1 - y0 + 1, 0)
    counts = wx * wy
    total = int(counts.sum())
    slot = np.repeat(np.arange(len(order)), counts)
    start = np.cumsum(counts) - counts
    local = np.arange(total) - start[slot]
    px = x0[slot] + local % np.maximum(wx[slot], 1)
    py = y0[slot] + local // np.maximum(wx[slot], 1)
    return order[slot], px, py


def rasterize(m2: ad.Tensor, cov2: ad.Tensor, opacity: ad.Tensor, color: ad.Tensor,
              depth: np.ndarray, valid: np.ndarray, W: int, H: int,
              settings: RasterSettings) -> tuple[ad.Tensor, np.ndarray, int]:
    m2v, opv, colv = m2.value, opacity.value, color.value
    bg = np.asarray(settings.background, dtype=np.float64)
    N = len(m2v)
    A, B, C, det = conic(cov2.value)
    live = valid & (opv > 0) & np.all(np.isfinite(m2v), axis=1)
    singular = live & (np.abs(det) < SINGULAR_DET)
    live &= ~singular
    a, c = cov2.value[:, 0, 0], cov2.value[:, 1, 1]
    b = 0.5 * (cov2.value[:, 0, 1] + cov2.value[:, 1, 0])
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))

    idx = np.flatnonzero(live)
    order = idx[np.argsort(depth[idx], kind="stable")]
    g_id, px, py = _pairs(m2v, A, B, C, lam_max, order, W, H, settings.cutoff_sigma)
    pix = py * W + px
    perm = np.argsort(pix, kind="stable")
    g_id, px, py, pix = g_id[perm], px[perm], py[perm], pix[perm]

    img = np.empty((H * W, 3))
    img[:] = bg
    visible = np.zeros(N, dtype=bool)
    if len(pix) == 0:
        out = ad.record(img.reshape(H, W, 3), (m2, cov2, opacity, color),
                        lambda g: (None, None, None, None))
        return out, visible, int(singular.sum())

    dx = px - m2v[g_id, 0]
    dy = py - m2v[g_id, 1]
    Ag, Bg, Cg = A[g_id], B[g_id], C[g_id]
    G = np.exp(-0.5 * (Ag * dx * dx + 2 * Bg * dx * dy + Cg * dy * dy))
    op_g = opv[g_id]
    raw = op_g * G
    sig = np.minimum(raw, settings.sigma_max)

    active, row, counts = np.unique(pix, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    pos = np.arange(len(pix)) - starts[row]
    P, L = len(active), int(counts.max())
    D_sig = np.zeros((P, L))
    D_sig[row, pos] = sig
    D_keep = 1.0 - D_sig
    T_excl = np.ones((P, L))
    if L > 1:
        T_excl[:, 1:] = np.cumprod(D_keep[:, :-1], axis=1)
    inc = T_excl >= settings.t_min
    T_after = np.where(inc, T_excl * D_keep, 1.0)
    T_final = T_after.min(axis=1)

    w = (D_sig * T_excl * inc)[row, pos]
    col_g = colv[g_id]
    pix_rgb = np.zeros((P, 3))
    for ch in range(3):
        pix_rgb[:, ch] = np.bincount(row, weights=w * col_g[:, ch], minlength=P)
    img[active] = pix_rgb + T_final[:, None] * bg[None, :]
    used = w > 0
    visible[np.unique(g_id[used])] = True

    inc_pair = inc[row, pos]
    T_pair = T_excl[row, pos]

    def back(gimg):
        gpix = gimg.reshape(H * W, 3)[active]
        cg = (col_g * gpix[row]).sum(axis=1)
        D_contrib = np.zeros((P, L))
        D_contrib[row, pos] = w * cg
        # exclusive suffix sum of later contributions plus background term
        suffix = np.cumsum(D_contrib[:, ::-1], axis=1)[:, ::-1]
        suffix = suffix - D_contrib + (T_final * (gpix @ bg))[:, None]
        S = suffix[row, pos]
        dsig = inc_pair * (T_pair * cg - S / (1.0 - sig))
        draw = dsig * (raw < settings.sigma_max)
        gcol = np.zeros((N, 3))
        for ch in range(3):
            gcol[:, ch] = np.bincount(g_id, weights=w * gpix[row, ch], minlength=N)
        gop = np.bincount(g_id, weights=draw * G, minlength=N)
        gpow = draw * op_g * G
        gm = np.stack([
            np.bincount(g_id, weights=(Ag * dx + Bg * dy) * gpow, minlength=N),
            np.bincount(g_id, weights=(Bg * dx + Cg * dy) * gpow, minlength=N),
        ], axis=1)
        gA = np.bincount(g_id, weights=-0.5 * dx * dx * gpow, minlength=N)
        gB = np.bincount(g_id, weights=-dx * dy * gpow, minlength=N)
        gC = np.bincount(g_id, weights=-0.5 * dy * dy * gpow, minlength=N)
        gcov = conic_vjp_to_cov(A, B, C, gA, gB, gC)
        return gm, gcov, gop, gcol

    out = ad.record(img.reshape(H, W, 3), (m2, cov2, opacity, color), back)
    return out, visible, int(singular.sum())
