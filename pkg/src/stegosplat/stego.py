"""Hiding modes, the joint training loop and the private decode paths."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .densify import DensifyConfig, DensifyState, GradientLedger, rdo_step
from .geometry import Camera
from .losses import LossWeights, bce_with_logits, psnr, total_loss
from .optim import Adam, LRSchedule
from .rasterizer import RasterSettings, render, screen_gradients
from .scene import (AnchorCloud, AnchorTensors, DecoderSet, KeyBundle, MissingKeyError, decode_all,
                    derive_hidden, derive_original, view_inputs)

log = logging.getLogger(__name__)

MODES = ("object-3d", "image-single-view", "bits")
MAX_BITS = 48


class DivergenceError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class HidingTask:
    mode: str = "object-3d"
    hidden_images: list[np.ndarray] | None = None  # object mode: one per camera
    hidden_image: np.ndarray | None = None  # image mode
    designated_view: int | None = None  # image mode
    bits: np.ndarray | None = None  # bit mode
    max_bits: int = MAX_BITS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown hiding mode {self.mode!r}")
        if self.mode == "image-single-view":
            if self.hidden_image is None or self.designated_view is None:
                raise ValueError("image mode needs exactly one hidden image and its view id")
        if self.mode == "bits":
            if self.bits is None:
                raise ValueError("bit mode needs a bit vector")
            self.bits = np.asarray(self.bits, dtype=np.int64).reshape(-1)
            if len(self.bits) < 1 or len(self.bits) > self.max_bits:
                raise ValueError(f"bit length must be in [1, {self.max_bits}]")
            if not np.all((self.bits == 0) | (self.bits == 1)):
                raise ValueError("bits must be 0/1")
        if self.mode == "object-3d" and self.hidden_images is None:
            raise ValueError("object mode needs one hidden image per camera")

    @property
    def n_bits(self) -> int:
        return len(self.bits) if self.mode == "bits" else 0

    def hidden_target(self, view: int) -> np.ndarray | None:
        if self.mode == "object-3d":
            return self.hidden_images[view]
        if self.mode == "image-single-view" and view == self.designated_view:
            return self.hidden_image
        return None


@dataclass
class BitMessage:
    bits: np.ndarray
    confidence: float
    means: np.ndarray


@dataclass
class TrainConfig:
    iterations: int = 3000
    seed: int = 0
    k: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hidden_background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cutoff_sigma: float = 3.0
    scene_extent: float = 1.0
    lr_position: float = 1.6e-4  # times scene extent
    lr_feature: float = 2.5e-3
    lr_offset: float = 1e-2
    lr_scaling: float = 7e-3
    lr_mlp: float = 2e-3
    lr_private: float = 2e-3
    lr_decay: float = 0.01  # final/initial ratio
    log_every: int = 100

    def raster(self, hidden: bool = False) -> RasterSettings:
        bg = self.hidden_background if hidden else self.background
        return RasterSettings(background=tuple(bg), cutoff_sigma=self.cutoff_sigma)


@dataclass
class TrainResult:
    cloud: AnchorCloud
    decoders: DecoderSet
    key: KeyBundle
    metrics: list[dict]
    history: list[dict]
    bbox: object = None


# ----------------------------------------------------------------- bits

def embed_bits_head(features, key: KeyBundle) -> ad.Tensor:
    """Per-anchor bit logits from the private bit decoder."""
    if key.F_b is None:
        raise MissingKeyError("key bundle carries no bit decoder")
    return key.F_b(ad.as_tensor(features))


def decode_bits(cloud: AnchorCloud, key: KeyBundle) -> BitMessage:
    """Average the per-anchor bit probabilities, then threshold at 0.5.

    A mean of exactly 0.5 decodes to 0.  Confidence is the smallest
    distance of any bit's mean from 0.5, rescaled to [0, 1].
    """
    if key is None:
        raise MissingKeyError("bit decoding requires a key bundle")
    if key.F_b is None:
        raise MissingKeyError("key bundle carries no bit decoder")
    if len(cloud) == 0:
        raise ValueError("cannot decode bits from an empty scene")
    key.validate()
    logits = key.F_b.forward_numpy(cloud.features)
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    means = probs.mean(axis=0)
    bits = (means > 0.5).astype(np.int64)
    conf = float(np.min(np.abs(means - 0.5)) * 2.0)
    return BitMessage(bits, conf, means)


def decode_hidden_view(cloud: AnchorCloud, dec: DecoderSet, key: KeyBundle | None, cam: Camera,
                       settings: RasterSettings | None = None) -> np.ndarray:
    if key is None:
        raise MissingKeyError("hidden views can only be decoded with the private key")
    _, hid = decode_all(cloud, cam, dec, key)
    return render(hid, cam, settings or RasterSettings()).image


def render_original(cloud: AnchorCloud, dec: DecoderSet, cam: Camera,
                    settings: RasterSettings | None = None) -> np.ndarray:
    ori, _ = decode_all(cloud, cam, dec, None)
    return render(ori, cam, settings or RasterSettings()).image


# -------------------------------------------------------------- training

_ANCHOR_FIELDS = ("positions", "features", "raw_scaling", "offsets")


class Trainer:
    """Joint optimisation of the public scene and the private key."""

    def __init__(self, cloud: AnchorCloud, cameras: list[Camera], originals: list[np.ndarray],
                 task: HidingTask, cfg: TrainConfig, decoders: DecoderSet | None = None,
                 key: KeyBundle | None = None):
        if len(cameras) != len(originals):
            raise ValueError("camera count and original image count differ")
        if task.mode == "object-3d" and len(task.hidden_images) != len(cameras):
            raise ValueError("object mode needs one hidden image per camera")
        self.cloud = cloud.copy()
        self.cameras = cameras
        self.originals = originals
        self.task = task
        self.cfg = cfg
        self.dec = decoders or DecoderSet.create(k=cfg.k, seed=cfg.seed)
        self.key = key or KeyBundle.create(k=cfg.k, n_bits=task.n_bits, seed=cfg.seed + 1)
        self.opt = Adam()
        self.ledger = GradientLedger(len(self.cloud), cfg.k, step=cfg.densify.effective_hid_step)
        self.state = DensifyState()
        self.rng = np.random.default_rng(cfg.seed)
        self.metrics: list[dict] = []
        self._stack: list[int] = []
        n = cfg.iterations
        d = cfg.lr_decay
        self.sched = {
            "positions": LRSchedule(cfg.lr_position * cfg.scene_extent, cfg.lr_position * cfg.scene_extent * d, n),
            "features": LRSchedule(cfg.lr_feature, cfg.lr_feature * d, n),
            "raw_scaling": LRSchedule(cfg.lr_scaling, cfg.lr_scaling * d, n),
            "offsets": LRSchedule(cfg.lr_offset, cfg.lr_offset * d, n),
            "public": LRSchedule(cfg.lr_mlp, cfg.lr_mlp * d, n),
            "private": LRSchedule(cfg.lr_private, cfg.lr_private * d, n),
        }

    @property
    def uses_hidden_render(self) -> bool:
        return self.task.mode in ("object-3d", "image-single-view") and self.lam > 0

    @property
    def lam(self) -> float:
        return self.cfg.weights.lam

    def _next_view(self) -> int:
        if not self._stack:
            self._stack = list(self.rng.permutation(len(self.cameras)))
        return int(self._stack.pop())

    def step(self, it: int) -> dict:
        cfg, task = self.cfg, self.task
        view = self._next_view()
        cam = self.cameras[view]
        # image mode supervises its one designated view on every iteration
        hid_view = task.designated_view if task.mode == "image-single-view" else view
        hid_cam = self.cameras[hid_view]
        hid_target = task.hidden_target(hid_view) if self.uses_hidden_render else None
        anchors = AnchorTensors.bind(self.cloud)
        pub = {n: m for n, m in self.dec.mlps().items()}
        priv = {n: m for n, m in self.key.mlps().items()}
        for m in list(pub.values()) + list(priv.values()):
            m.bind()
        with ad.Tape() as tape:
            v = view_inputs(anchors, cam, self.dec.F_w)
            g_ori = derive_original(anchors, cam, self.dec, v)
            out_o = render(g_ori, cam, cfg.raster())
            out_h = g_hid = None
            if hid_target is not None:
                v_h = v if hid_view == view else view_inputs(anchors, hid_cam, self.dec.F_w)
                g_hid = derive_hidden(anchors, hid_cam, self.dec, self.key, v_h)
                out_h = render(g_hid, hid_cam, cfg.raster(hidden=True))
                loss, parts = total_loss(out_o.image_t, self.originals[view], out_h.image_t, hid_target,
                                         g_ori.scales, g_hid.scales, cfg.weights)
            else:
                loss, parts = total_loss(out_o.image_t, self.originals[view], None, None,
                                         g_ori.scales, None, cfg.weights)
            if task.mode == "bits":
                bit_loss = bce_with_logits(embed_bits_head(anchors.features, self.key), task.bits[None, :])
                loss = ad.add(loss, ad.scale(bit_loss, cfg.weights.bit_weight))
                parts["l_bit"] = float(bit_loss.value)
            if not math.isfinite(float(loss.value)):
                raise DivergenceError(f"non-finite loss at iteration {it}",
                                      {"iteration": it, "view": view, **parts,
                                       "anchors": len(self.cloud)})
            tape.backward(loss)

        # densification statistics
        k, A = cfg.k, len(self.cloud)
        self.ledger.accumulate("ori", screen_gradients(out_o, ndc=True), it, visible=out_o.visible)
        op = np.maximum(g_ori.opacity.value, 0.0)
        vis = out_o.visible.copy()
        if out_h is not None:
            self.ledger.accumulate("hid", screen_gradients(out_h, ndc=True), it, visible=out_h.visible,
                                   positions=g_hid.means.value)
            op = op + np.maximum(g_hid.opacity.value, 0.0)
            vis |= out_h.visible
        self.ledger.add_opacity(op, vis.reshape(A, k).any(axis=1))

        # parameter updates
        for name in _ANCHOR_FIELDS:
            self.opt.step(f"anchor.{name}", getattr(self.cloud, name), getattr(anchors, name).grad,
                          self.sched[name](it))
        for group, mlps in (("public", pub), ("private", priv)):
            lr = self.sched[group](it)
            for name, m in mlps.items():
                for pname, g in m.grads().items():
                    self.opt.step(f"{group}.{name}.{pname}", m.params[pname], g, lr)
                m.unbind()

        rec = {"iteration": it, "view": view, "hidden_view": hid_view if hid_target is not None else None,
               "l_ori": parts["l_ori"],
               "l_hid": parts["l_hid"] if hid_target is not None else None,
               "psnr_o": psnr(out_o.image, self.originals[view]),
               "psnr_h": psnr(out_h.image, hid_target) if hid_target is not None else None}
        if "l_bit" in parts:
            rec["l_bit"] = parts["l_bit"]

        res = rdo_step(self.cloud, self.ledger, cfg.densify, it, self.state)
        if res.cloud is not self.cloud:
            for name in _ANCHOR_FIELDS:
                self.opt.remap_rows(f"anchor.{name}", res.kept, res.n_new)
            self.cloud = res.cloud
            log.info("it %d: +%d ori, +%d hid, -%d pruned -> %d anchors", it, res.grown_ori,
                     res.grown_hid, res.pruned, len(self.cloud))
        counts = self.cloud.counts()
        rec["anchors_ori"], rec["anchors_hid"] = counts["ori"], counts["hid"]
        self.metrics.append(rec)
        return rec

    def run(self, callback=None) -> TrainResult:
        for it in range(self.cfg.iterations):
            rec = self.step(it)
            if callback is not None:
                callback(rec)
            if self.cfg.log_every and it % self.cfg.log_every == 0:
                log.info("it %d l_ori %.4f psnr_o %.2f psnr_h %s anchors %d/%d", it, rec["l_ori"],
                         rec["psnr_o"], rec["psnr_h"], rec["anchors_ori"], rec["anchors_hid"])
        return TrainResult(self.cloud, self.dec, self.key, self.metrics, self.state.history, self.state.bbox)


def train(cloud: AnchorCloud, cameras: list[Camera], originals: list[np.ndarray], task: HidingTask,
          cfg: TrainConfig | None = None, callback=None, **kw) -> TrainResult:
    return Trainer(cloud, cameras, originals, task, cfg or TrainConfig(), **kw).run(callback)


def evaluate(result: TrainResult, cameras: list[Camera], originals: list[np.ndarray],
             hiddens: list[np.ndarray] | None, cfg: TrainConfig, cloud: AnchorCloud | None = None) -> dict:
    """Mean PSNR over views for both streams (hidden only where targets exist)."""
    cloud = result.cloud if cloud is None else cloud
    po, ph = [], []
    for i, cam in enumerate(cameras):
        ori, hid = decode_all(cloud, cam, result.decoders, result.key if hiddens is not None else None)
        po.append(psnr(render(ori, cam, cfg.raster()).image, originals[i]))
        if hiddens is not None and hiddens[i] is not None:
            ph.append(psnr(render(hid, cam, cfg.raster(hidden=True)).image, hiddens[i]))
    return {"psnr_o": float(np.mean(po)), "psnr_h": float(np.mean(ph)) if ph else None,
            "psnr_o_views": po, "psnr_h_views": ph}
