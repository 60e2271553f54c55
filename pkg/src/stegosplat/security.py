"""Defender-side audits of a published container and the robustness attacks."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .densify import NOISE, BoundingBox, dbscan, median_nn_distance
from .io import ContainerError, container_properties, parse_header
from .scene import AnchorCloud


# -------------------------------------------------------------------- format

@dataclass
class FormatReport:
    passed: bool
    parse_error: str | None = None
    extra: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    reordered: list[str] = field(default_factory=list)
    type_mismatch: list[str] = field(default_factory=list)
    format: str | None = None

    @property
    def outcome(self) -> str:
        if self.parse_error is not None:
            return "parse-error"
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "passed": self.passed, "parse_error": self.parse_error,
                "extra": self.extra, "missing": self.missing, "reordered": self.reordered,
                "type_mismatch": self.type_mismatch, "format": self.format}

    def lines(self) -> list[str]:
        if self.parse_error is not None:
            return [f"format: PARSE ERROR ({self.parse_error})"]
        out = [f"format: {'PASS' if self.passed else 'FAIL'} ({self.format})"]
        for label, names in (("extra", self.extra), ("missing", self.missing),
                             ("reordered", self.reordered), ("type mismatch", self.type_mismatch)):
            if names:
                out.append(f"  {label}: {', '.join(names)}")
        return out


def compare_properties(found: list[tuple[str, str]], baseline: list[tuple[str, str]]) -> FormatReport:
    names_f = [n for _, n in found]
    names_b = [n for _, n in baseline]
    extra = [n for n in names_f if n not in names_b]
    missing = [n for n in names_b if n not in names_f]
    common_f = [n for n in names_f if n in names_b]
    common_b = [n for n in names_b if n in names_f]
    reordered = [a for a, b in zip(common_f, common_b) if a != b]
    types_b = {n: t for t, n in baseline}
    mismatch = [n for t, n in found if n in types_b and types_b[n] != t]
    ok = not (extra or missing or reordered or mismatch)
    return FormatReport(ok, extra=extra, missing=missing, reordered=reordered, type_mismatch=mismatch)


def audit_format(path, baseline: list[tuple[str, str]] | None = None, k: int = 10) -> FormatReport:
    """Compare a container header against the baseline anchor schema.

    Without an explicit baseline the schema for ``k`` offsets is used.
    """
    baseline = container_properties(k) if baseline is None else [tuple(p) for p in baseline]
    try:
        data = Path(path).read_bytes()
        header, _ = parse_header(data)
    except (OSError, ContainerError, UnicodeDecodeError, ValueError) as exc:
        return FormatReport(False, parse_error=str(exc))
    vertex = [e for e in header["elements"] if e["name"] == "vertex"]
    if len(vertex) != 1:
        return FormatReport(False, parse_error="expected exactly one vertex element")
    rep = compare_properties(vertex[0]["properties"], baseline)
    rep.format = header["format"]
    others = [e["name"] for e in header["elements"] if e["name"] != "vertex"]
    if others:
        rep.extra += [f"element:{n}" for n in others]
        rep.passed = False
    if header["format"] != "binary_little_endian":
        rep.passed = False
    return rep


# ------------------------------------------------------------------ geometry

@dataclass
class GeometryAuditConfig:
    suspicion: float = 3.0
    neighbours: int = 16  # local density from the distance to the k-th neighbour
    link_factor: float = 2.5  # dense anchors closer than this many median NN distances share a region
    dense_factor: float = 2.0  # anchors this much denser than the median seed candidate regions
    eps_factor: float = 2.0  # inventory DBSCAN eps in median NN distances
    min_pts: int = 5
    bins: int = 30


@dataclass
class Region:
    box: BoundingBox
    n_inside: int
    density_inside: float
    density_outside: float
    ratio: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"lo": self.box.lo.tolist(), "hi": self.box.hi.tolist(), "n_inside": self.n_inside,
                "density_inside": self.density_inside, "density_outside": self.density_outside,
                "ratio": self.ratio, "flagged": self.flagged}


@dataclass
class GeometryReport:
    n_anchors: int
    median_nn: float
    clusters: list[dict]
    n_noise: int
    regions: list[Region]
    nn_hist: np.ndarray
    nn_edges: np.ndarray
    local_density: np.ndarray = field(repr=False)
    suspicion: float = 3.0

    @property
    def flagged(self) -> list[Region]:
        return [r for r in self.regions if r.flagged]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def to_dict(self) -> dict:
        return {"passed": self.passed, "n_anchors": self.n_anchors, "median_nn": self.median_nn,
                "suspicion": self.suspicion, "clusters": self.clusters, "n_noise": self.n_noise,
                "regions": [r.to_dict() for r in self.regions], "n_flagged": len(self.flagged),
                "nn_hist": self.nn_hist.tolist(), "nn_edges": self.nn_edges.tolist()}

    def lines(self) -> list[str]:
        out = [f"geometry: {'PASS' if self.passed else 'FAIL'} ({self.n_anchors} anchors, "
               f"median NN {self.median_nn:.4g}, {len(self.clusters)} clusters, {self.n_noise} noise)"]
        for i, r in enumerate(self.regions):
            out.append(f"  region {i}: {r.n_inside} anchors, density ratio {r.ratio:.2f}"
                       + ("  FLAGGED" if r.flagged else ""))
        return out


def local_density(points: np.ndarray, neighbours: int = 16) -> np.ndarray:
    """Points per unit volume in the ball reaching each point's k-th neighbour."""
    n = len(points)
    if n < 2:
        return np.zeros(n)
    k = min(neighbours, n - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    r = np.maximum(d[:, -1], 1e-12)
    return k / (4.0 / 3.0 * np.pi * r**3)


def _region_stats(points, density, box: BoundingBox, suspicion: float) -> Region:
    inside = box.contains(points)
    n_in = int(inside.sum())
    d_in = float(density[inside].mean()) if n_in else 0.0
    d_out = float(density[~inside].mean()) if n_in < len(points) else 0.0
    ratio = d_in / d_out if d_out > 0 else (np.inf if d_in > 0 else 0.0)
    return Region(box, n_in, d_in, d_out, float(ratio), bool(ratio > suspicion))


def audit_geometry(positions, region: BoundingBox | None = None,
                   cfg: GeometryAuditConfig | None = None) -> GeometryReport:
    """Cluster inventory, local-density anomalies and NN-distance histogram.

    Candidate regions are the given suspected box, or otherwise the hulls of
    DBSCAN clusters formed by unusually dense anchors.  A region is
    flagged when the mean local density of its anchors exceeds that of the
    remaining anchors by more than the suspicion factor.
    """
    cfg = cfg or GeometryAuditConfig()
    pts = np.asarray(positions.positions if isinstance(positions, AnchorCloud) else positions,
                     dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    med = median_nn_distance(pts)
    if n < 2 or med <= 0:
        empty = np.zeros(cfg.bins)
        return GeometryReport(n, med, [], n, [], empty, np.linspace(0, 1, cfg.bins + 1),
                              np.zeros(n), cfg.suspicion)
    nn, _ = cKDTree(pts).query(pts, k=2)
    hist, edges = np.histogram(nn[:, 1], bins=cfg.bins)

    labels = dbscan(pts, cfg.eps_factor * med, cfg.min_pts)
    clusters = []
    for c in range(labels.max() + 1):
        m = pts[labels == c]
        clusters.append({"label": c, "size": len(m), "lo": m.min(0).tolist(), "hi": m.max(0).tolist()})

    dens = local_density(pts, cfg.neighbours)
    if region is not None:
        boxes = [region]
    else:
        boxes = []
        dense = np.flatnonzero(dens > cfg.dense_factor * np.median(dens))
        if len(dense) >= cfg.min_pts:
            sub = dbscan(pts[dense], cfg.link_factor * med, cfg.min_pts)
            for c in range(sub.max() + 1):
                m = pts[dense[sub == c]]
                boxes.append(BoundingBox(m.min(0), m.max(0)))
    regions = [_region_stats(pts, dens, b, cfg.suspicion) for b in boxes]
    return GeometryReport(n, med, clusters, int((labels == NOISE).sum()), regions, hist, edges,
                          dens, cfg.suspicion)


def box_density_ratio(positions, box: BoundingBox) -> float:
    """Anchor count density inside ``box`` over the density of the whole cloud's hull."""
    pts = np.asarray(positions.positions if isinstance(positions, AnchorCloud) else positions, dtype=np.float64)
    lo, hi = pts.min(0), pts.max(0)
    vol = float(np.prod(np.maximum(hi - lo, 1e-12)))
    n_in = int(box.contains(pts).sum())
    return (n_in / box.volume) / (len(pts) / vol)


# ------------------------------------------------------------------- attacks

def perturb(cloud: AnchorCloud, attack: str, amount: float, seed: int = 0) -> AnchorCloud:
    """``prune``: drop ``floor(n*p/100)`` uniformly chosen anchors (p = amount).
    ``noise``: add iid N(0, amount^2) to every anchor position."""
    rng = np.random.default_rng(seed)
    if attack == "prune":
        if not 0 <= amount < 100:
            raise ValueError("prune percentage must be in [0, 100)")
        n = len(cloud)
        drop = int(np.floor(n * amount / 100.0))
        keep = np.sort(rng.permutation(n)[drop:])
        return cloud.subset(keep)
    if attack == "noise":
        if amount < 0:
            raise ValueError("noise sigma must be non-negative")
        out = cloud.copy()
        if amount > 0:
            out.positions = out.positions + rng.normal(0.0, amount, out.positions.shape)
        return out
    raise ValueError(f"unknown attack {attack!r}")
