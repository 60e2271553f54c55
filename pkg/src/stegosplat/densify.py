"""Region-aware density control: asynchronous gradient ledgers, a DBSCAN
bounding box around hidden-stream anchors, threshold-adaptive growing and
opacity pruning.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .scene import AnchorCloud, Origin

STREAMS = ("ori", "hid")
NOISE = -1


@dataclass
class DensifyConfig:
    tau_fix: float = 0.0002
    r_down: float = 4.0
    hid_step: int = 4
    warmup: int = 500
    refine_interval: int = 100
    bbox_interval: int = 500
    prune_threshold: float = 0.005
    dbscan_eps: float | None = None  # None -> 2x median nearest-neighbour distance
    dbscan_min_pts: int = 5
    bbox_padding: float | None = None  # None -> one voxel
    voxel_size: float = 0.1
    trigger: str = "max"  # anchor-level gate over slot statistics: "max" or "mean"
    seed_exempt_until: int | None = None  # None -> warmup + refine_interval
    rdo: bool = True  # False: shared cadence, no bounding box (ablation)

    def __post_init__(self):
        for name in ("tau_fix", "r_down", "hid_step", "refine_interval", "bbox_interval",
                     "voxel_size", "dbscan_min_pts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"densify config {name} must be positive")
        if self.warmup < 0 or self.prune_threshold < 0:
            raise ValueError("warmup and prune_threshold must be non-negative")
        if self.trigger not in ("max", "mean"):
            raise ValueError(f"unknown trigger mode {self.trigger!r}")

    @property
    def padding(self) -> float:
        return self.voxel_size if self.bbox_padding is None else self.bbox_padding

    @property
    def exempt_until(self) -> int:
        return self.warmup + self.refine_interval if self.seed_exempt_until is None else self.seed_exempt_until

    @property
    def effective_hid_step(self) -> int:
        return self.hid_step if self.rdo else 1


@dataclass
class BoundingBox:
    lo: np.ndarray
    hi: np.ndarray
    padding: float = 0.0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.lo > self.hi):
            raise ValueError("bounding box min exceeds max")

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


# ------------------------------------------------------------------- ledger

@dataclass
class GradientLedger:
    """Per-slot screen-gradient accumulators for both streams.

    Slots are indexed ``anchor * k + offset``.  Opacity statistics are per
    anchor and feed pruning.
    """

    n_anchors: int
    k: int
    step: int = 4
    sums: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # views per slot
    pos_count: dict = field(default_factory=dict)  # accumulation events per slot
    pos_sum: np.ndarray = None  # hidden-Gaussian positions summed over hid events
    opacity_sum: np.ndarray = None
    opacity_views: np.ndarray = None
    events: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sums:
            self.reset(self.n_anchors)

    def reset(self, n_anchors: int | None = None) -> None:
        if n_anchors is not None:
            self.n_anchors = n_anchors
        n = self.n_anchors * self.k
        self.sums = {s: np.zeros(n) for s in STREAMS}
        self.counts = {s: np.zeros(n) for s in STREAMS}
        self.pos_count = {s: np.zeros(n) for s in STREAMS}
        self.pos_sum = np.zeros((n, 3))
        self.opacity_sum = np.zeros(self.n_anchors)
        self.opacity_views = np.zeros(self.n_anchors)
        self.events = {s: 0 for s in STREAMS}

    def due(self, stream: str, iteration: int) -> bool:
        if stream not in STREAMS:
            raise ValueError(f"unknown stream {stream!r}")
        return stream == "ori" or iteration % self.step == 0

    def accumulate(self, stream: str, norms, iteration: int, visible=None, positions=None) -> bool:
        """Record one rendered view of ``stream``; returns whether its norms were added.

        View counts advance on every call.  Norms (and hidden positions) are
        only added on the stream's cadence, so a stream sampled every
        ``step`` iterations accumulates about ``1/step`` of the gradient mass
        over the same views.
        """
        if stream not in STREAMS:
            raise ValueError(f"unknown stream {stream!r}")
        norms = np.asarray(norms, dtype=np.float64).reshape(-1)
        if norms.shape[0] != self.n_anchors * self.k:
            raise ValueError(f"expected {self.n_anchors * self.k} slot norms, got {norms.shape[0]}")
        vis = np.ones_like(norms, dtype=bool) if visible is None else np.asarray(visible, bool).reshape(-1)
        self.counts[stream] += vis
        if not self.due(stream, iteration):
            return False
        self.sums[stream] += np.where(vis, norms, 0.0)
        self.pos_count[stream] += vis
        if stream == "hid" and positions is not None:
            self.pos_sum += np.where(vis[:, None], positions, 0.0)
        self.events[stream] += 1
        return True

    def add_opacity(self, opacity, visible_anchor=None) -> None:
        """Record one view: per anchor, the sum of its positive slot opacities."""
        op = np.maximum(np.asarray(opacity, dtype=np.float64).reshape(self.n_anchors, self.k), 0.0)
        vis = np.ones(self.n_anchors, bool) if visible_anchor is None else np.asarray(visible_anchor, bool)
        self.opacity_sum += np.where(vis, op.sum(axis=1), 0.0)
        self.opacity_views += vis

    def statistic(self, stream: str) -> np.ndarray:
        """Accumulated norm over view count, per slot."""
        c = self.counts[stream]
        return np.divide(self.sums[stream], c, out=np.zeros_like(c), where=c > 0)

    def hidden_positions(self) -> np.ndarray:
        c = self.pos_count["hid"][:, None]
        return np.divide(self.pos_sum, c, out=np.zeros_like(self.pos_sum), where=c > 0)

    def mean_opacity(self) -> np.ndarray:
        """Mean per-view opacity statistic; NaN for anchors never seen."""
        v = self.opacity_views
        return np.divide(self.opacity_sum, v, out=np.full_like(v, np.nan), where=v > 0)


def accumulate(ledger: GradientLedger, stream: str, norms, iteration: int, **kw) -> GradientLedger:
    ledger.accumulate(stream, norms, iteration, **kw)
    return ledger


# ------------------------------------------------------------------- DBSCAN

def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; labels ``0..n-1`` in discovery order, ``-1`` noise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps``.  Seeds are visited in input order, so border
    points belong to the first cluster that reaches them.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("dbscan needs eps > 0 and min_pts >= 1")
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = cKDTree(points).query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        frontier = [i]
        while frontier:
            p = frontier.pop()
            if not core[p]:
                continue
            for q in neighbours[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    frontier.append(q)
        cluster += 1
    return labels


def median_nn_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def hidden_bbox(cloud: AnchorCloud, cfg: DensifyConfig) -> BoundingBox | None:
    """Padded hull of the largest DBSCAN cluster among hidden-stream anchors."""
    pts = cloud.positions[cloud.origin == Origin.HID]
    if len(pts) == 0:
        return None
    eps = cfg.dbscan_eps if cfg.dbscan_eps is not None else 2.0 * median_nn_distance(pts)
    if eps <= 0:
        return None
    labels = dbscan(pts, eps, cfg.dbscan_min_pts)
    if np.all(labels == NOISE):
        return None
    sizes = np.bincount(labels[labels >= 0])
    best = int(np.argmax(sizes))  # ties -> first discovered
    member = pts[labels == best]
    pad = cfg.padding
    return BoundingBox(member.min(axis=0) - pad, member.max(axis=0) + pad, pad)


def adaptive_threshold(position, bbox: BoundingBox | None, cfg: DensifyConfig):
    """Growth threshold per position: lowered by ``r_down`` inside the box."""
    pos = np.atleast_2d(np.asarray(position, dtype=np.float64))
    tau = np.full(len(pos), cfg.tau_fix)
    if bbox is not None:
        tau[bbox.contains(pos)] = cfg.tau_fix / cfg.r_down
    return float(tau[0]) if np.ndim(position) == 1 else tau


# ---------------------------------------------------------- growing/pruning

def _voxel(p: np.ndarray, size: float) -> np.ndarray:
    return np.round(p / size).astype(np.int64)


def original_positions(cloud: AnchorCloud) -> np.ndarray:
    """Neural-Gaussian means of the public stream, ``[A*k, 3]`` (view independent)."""
    return (cloud.positions[:, None, :] + cloud.offsets * cloud.scaling[:, None, :]).reshape(-1, 3)


def grow(cloud: AnchorCloud, ledger: GradientLedger, bbox: BoundingBox | None, cfg: DensifyConfig,
         stream: str, candidates: np.ndarray | None = None) -> AnchorCloud:
    """New anchors (not yet appended) spawned from one stream's statistics.

    ``ori`` slots compare against the adaptive threshold at their anchor's
    position; ``hid`` slots always use ``tau_fix``.
    """
    if stream not in STREAMS:
        raise ValueError(f"unknown stream {stream!r}")
    A, k = len(cloud), cloud.k
    if A == 0:
        return AnchorCloud.empty(k)
    stat = ledger.statistic(stream).reshape(A, k)
    if stream == "ori" and cfg.rdo:
        tau = adaptive_threshold(cloud.positions, bbox, cfg)
    else:
        tau = np.full(A, cfg.tau_fix)
    gate = stat.max(axis=1) if cfg.trigger == "max" else stat.mean(axis=1)
    fire = (stat > tau[:, None]) & (gate > tau)[:, None]
    if candidates is None:
        candidates = original_positions(cloud) if stream == "ori" else ledger.hidden_positions()
    slots = np.flatnonzero(fire.reshape(-1))
    if len(slots) == 0:
        return AnchorCloud.empty(k)
    cells = _voxel(candidates[slots], cfg.voxel_size)
    occupied = {tuple(c) for c in _voxel(cloud.positions, cfg.voxel_size)}
    keep_slots, new_cells, seen = [], [], set()
    for s, c in zip(slots, map(tuple, cells)):
        if c in occupied or c in seen:
            continue
        seen.add(c)
        keep_slots.append(s)
        new_cells.append(c)
    if not keep_slots:
        return AnchorCloud.empty(k)
    parents = np.asarray(keep_slots) // k
    n = len(parents)
    origin = Origin.ORI if stream == "ori" else Origin.HID
    return AnchorCloud(np.asarray(new_cells, dtype=np.float64) * cfg.voxel_size,
                       cloud.features[parents].copy(),
                       np.full((n, 3), np.log(cfg.voxel_size)),
                       np.zeros((n, k, 3)),
                       np.full(n, origin, dtype=np.int8),
                       np.zeros(n, dtype=bool))


def prune_mask(cloud: AnchorCloud, ledger: GradientLedger, cfg: DensifyConfig, iteration: int) -> np.ndarray:
    """Anchors to remove: observed mean opacity strictly below the threshold."""
    mean_op = ledger.mean_opacity()
    low = np.zeros(len(cloud), dtype=bool)
    seen = ~np.isnan(mean_op)
    low[seen] = mean_op[seen] < cfg.prune_threshold
    if iteration < cfg.exempt_until:
        low &= ~cloud.seed
    return low


def prune(cloud: AnchorCloud, ledger: GradientLedger, cfg: DensifyConfig, iteration: int) -> AnchorCloud:
    return cloud.subset(~prune_mask(cloud, ledger, cfg, iteration))


@dataclass
class DensifyState:
    bbox: BoundingBox | None = None
    history: list = field(default_factory=list)


@dataclass
class RefineResult:
    cloud: AnchorCloud
    kept: np.ndarray  # indices of surviving old anchors, in new order
    n_new: int
    grown_ori: int
    grown_hid: int
    pruned: int
    bbox: BoundingBox | None


def is_refinement(iteration: int, cfg: DensifyConfig) -> bool:
    return iteration >= cfg.warmup and iteration > 0 and iteration % cfg.refine_interval == 0


def is_bbox_iteration(iteration: int, cfg: DensifyConfig) -> bool:
    return cfg.rdo and iteration > 0 and iteration % cfg.bbox_interval == 0


def rdo_step(cloud: AnchorCloud, ledger: GradientLedger, cfg: DensifyConfig, iteration: int,
             state: DensifyState | None = None) -> RefineResult:
    """One refinement event: bbox refresh, two-stream growth, pruning, ledger reset.

    New anchors are appended after the survivors.  Off-cadence iterations
    return the cloud untouched.
    """
    state = state if state is not None else DensifyState()
    A = len(cloud)
    if not is_refinement(iteration, cfg):
        return RefineResult(cloud, np.arange(A), 0, 0, 0, 0, state.bbox)
    if is_bbox_iteration(iteration, cfg):
        state.bbox = hidden_bbox(cloud, cfg)
    bbox = state.bbox if cfg.rdo else None
    new_ori = grow(cloud, ledger, bbox, cfg, "ori")
    new_hid = grow(cloud, ledger, bbox, cfg, "hid")
    # a hidden candidate may land in a voxel the original stream just claimed
    if len(new_ori) and len(new_hid):
        taken = {tuple(c) for c in _voxel(new_ori.positions, cfg.voxel_size)}
        free = np.array([tuple(c) not in taken for c in _voxel(new_hid.positions, cfg.voxel_size)])
        new_hid = new_hid.subset(free)
    drop = prune_mask(cloud, ledger, cfg, iteration)
    kept = np.flatnonzero(~drop)
    out = cloud.subset(kept).append(new_ori).append(new_hid)
    ledger.reset(len(out))
    state.history.append({"iteration": iteration, "grown_ori": len(new_ori), "grown_hid": len(new_hid),
                          "pruned": int(drop.sum()), "anchors": len(out)})
    return RefineResult(out, kept, len(new_ori) + len(new_hid), len(new_ori), len(new_hid),
                        int(drop.sum()), bbox)
