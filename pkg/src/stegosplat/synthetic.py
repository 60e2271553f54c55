"""Procedural desk-scale scenes rendered from hand-built Gaussian sets.

The original scene is a soft-textured ground patch with a few coloured box
clusters; the hidden object is a small two-tone capsule resting on the ground
so that it overlaps the original point cloud.  Ground-truth images come from
the reference renderer, so the hidden region is known exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, look_at
from .rasterizer import Gaussians, RasterSettings, render
from .scene import AnchorCloud


@dataclass
class SyntheticSpec:
    seed: int = 0
    extent: float = 1.0  # ground half-width (world units)
    voxel_size: float = 0.16
    n_cameras: int = 8
    orbit_radius: float = 2.6
    orbit_height: float = 1.6
    fov_deg: float = 50.0
    resolution: int = 64
    k: int = 10
    hidden_center: tuple[float, float, float] = (0.25, -0.15, 0.18)
    hidden_extent: float = 0.5
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hidden_background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene_level: bool = False  # hidden target composited over the original view

    def __post_init__(self):
        if self.resolution < 16:
            raise ValueError("resolution must be at least 16")
        if self.n_cameras < 1:
            raise ValueError("need at least one camera")
        c = np.asarray(self.hidden_center)
        if np.any(np.abs(c[:2]) > self.extent) or c[2] < 0 or c[2] > self.extent:
            raise ValueError("hidden object must sit inside the scene extent")


@dataclass
class ReferenceSet:
    means: np.ndarray
    colors: np.ndarray
    opacity: np.ndarray
    quats: np.ndarray
    scales: np.ndarray

    def gaussians(self) -> Gaussians:
        return Gaussians.from_arrays(self.means, self.colors, self.opacity, self.quats, self.scales)

    def __len__(self) -> int:
        return len(self.means)

    @staticmethod
    def concat(a: "ReferenceSet", b: "ReferenceSet") -> "ReferenceSet":
        return ReferenceSet(*(np.concatenate([getattr(a, f), getattr(b, f)])
                              for f in ("means", "colors", "opacity", "quats", "scales")))


@dataclass
class SyntheticScene:
    spec: SyntheticSpec
    anchors: AnchorCloud
    cameras: list[Camera]
    original_images: list[np.ndarray]
    hidden_images: list[np.ndarray]
    original_ref: ReferenceSet = field(repr=False)
    hidden_ref: ReferenceSet = field(repr=False)

    @property
    def hidden_box(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.hidden_ref.means
        pad = 2.0 * self.hidden_ref.scales.max()
        return m.min(axis=0) - pad, m.max(axis=0) + pad


def _identity_quats(n: int) -> np.ndarray:
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def _ground(spec: SyntheticSpec, rng: np.random.Generator) -> ReferenceSet:
    step = spec.voxel_size / 2.0
    ax = np.arange(-spec.extent, spec.extent + 1e-9, step)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    n = len(xy)
    u = (xy[:, 0] + spec.extent) / (2 * spec.extent)
    v = (xy[:, 1] + spec.extent) / (2 * spec.extent)
    colors = np.stack([
        0.35 + 0.25 * np.sin(2.0 * np.pi * u),
        0.45 + 0.2 * np.cos(1.5 * np.pi * v),
        0.3 + 0.2 * u * v,
    ], axis=1)
    means = np.concatenate([xy, np.zeros((n, 1))], axis=1)
    scales = np.column_stack([np.full(n, 0.6 * step), np.full(n, 0.6 * step), np.full(n, 0.01)])
    return ReferenceSet(means, np.clip(colors, 0, 1), np.full(n, 0.9), _identity_quats(n), scales)


def _box(center, size, color, step) -> ReferenceSet:
    center, size = np.asarray(center, float), np.asarray(size, float)
    axes = [np.arange(-s / 2, s / 2 + 1e-9, step) for s in size]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    # surface samples only
    on_face = np.any(np.isclose(np.abs(g), size / 2, atol=step / 2), axis=1)
    g = g[on_face] + center
    n = len(g)
    shade = 0.85 + 0.15 * (g[:, 2] - g[:, 2].min()) / max(size[2], 1e-9)
    colors = np.clip(np.asarray(color)[None, :] * shade[:, None], 0, 1)
    return ReferenceSet(g, colors, np.full(n, 0.95), _identity_quats(n), np.full((n, 3), 0.55 * step))


def _hidden_object(spec: SyntheticSpec) -> ReferenceSet:
    c = np.asarray(spec.hidden_center, float)
    L = spec.hidden_extent
    t = np.linspace(-0.5, 0.5, 9)
    # capsule along x: a bun (two rows) and a sausage on top
    bun = np.concatenate([np.stack([t * L, np.full_like(t, s * 0.18 * L), np.full_like(t, -0.12 * L)], 1)
                          for s in (-1, 1)])
    sausage = np.stack([t * 1.15 * L, np.zeros_like(t), np.full_like(t, 0.08 * L)], 1)
    means = np.concatenate([bun, sausage]) + c
    colors = np.concatenate([np.tile([0.95, 0.75, 0.35], (len(bun), 1)),
                             np.tile([0.8, 0.2, 0.15], (len(sausage), 1))])
    n = len(means)
    scales = np.tile([0.09 * L, 0.1 * L, 0.08 * L], (n, 1))
    return ReferenceSet(means, colors, np.full(n, 0.95), _identity_quats(n), scales)


def make_cameras(spec: SyntheticSpec) -> list[Camera]:
    cams = []
    for i in range(spec.n_cameras):
        a = 2.0 * np.pi * i / spec.n_cameras + 0.3
        eye = (spec.orbit_radius * np.cos(a), spec.orbit_radius * np.sin(a), spec.orbit_height)
        cams.append(look_at(eye, (0.0, 0.0, 0.15), width=spec.resolution, height=spec.resolution,
                            fov_deg=spec.fov_deg, name=f"view_{i:03d}"))
    return cams


def reference_scene(spec: SyntheticSpec) -> tuple[ReferenceSet, ReferenceSet]:
    rng = np.random.default_rng(spec.seed)
    step = spec.voxel_size / 2.0
    parts = [_ground(spec, rng)]
    e = spec.extent
    boxes = [((-0.55 * e, 0.45 * e, 0.2), (0.3, 0.3, 0.4), (0.2, 0.45, 0.85)),
             ((0.5 * e, 0.5 * e, 0.15), (0.35, 0.25, 0.3), (0.85, 0.3, 0.3)),
             ((-0.4 * e, -0.55 * e, 0.12), (0.25, 0.35, 0.24), (0.3, 0.75, 0.35))]
    for center, size, color in boxes:
        parts.append(_box(center, size, color, step))
    ori = parts[0]
    for p in parts[1:]:
        ori = ReferenceSet.concat(ori, p)
    return ori, _hidden_object(spec)


def make_scene(spec: SyntheticSpec) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    ori, hid = reference_scene(spec)
    cams = make_cameras(spec)
    s_ori = RasterSettings(background=spec.background)
    s_hid = RasterSettings(background=spec.hidden_background)
    both = ReferenceSet.concat(ori, hid)
    originals = [render(ori.gaussians(), c, s_ori).image for c in cams]
    if spec.scene_level:
        hiddens = [render(both.gaussians(), c, s_ori).image for c in cams]
    else:
        hiddens = [render(hid.gaussians(), c, s_hid).image for c in cams]
    # sparse "structure-from-motion" points: jittered samples of the original surfaces only
    pts = ori.means + rng.normal(0.0, 0.1 * spec.voxel_size, ori.means.shape)
    anchors = AnchorCloud.init_from_points(pts, spec.voxel_size, k=spec.k, rng=rng)
    return SyntheticScene(spec, anchors, cams, originals, hiddens, ori, hid)


# ------------------------------------------------------------------ on disk

def secret_image(scene: SyntheticScene, view: int) -> np.ndarray:
    """Full-frame stand-in for a copyrighted picture shown at one view.

    The opposite orbit view is used; a sparse object on black would let every
    hidden splat fade out under the small image-mode weight.
    """
    n = len(scene.original_images)
    return scene.original_images[(view + n // 2) % n]


def write_ppm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def save_dataset(scene: SyntheticScene, root) -> Path:
    """Images as PPM grids plus exact float arrays, cameras and spec in a manifest."""
    root = Path(root)
    (root / "original").mkdir(parents=True, exist_ok=True)
    (root / "hidden").mkdir(parents=True, exist_ok=True)
    views = []
    for i, cam in enumerate(scene.cameras):
        o = root / "original" / f"{cam.name}.ppm"
        h = root / "hidden" / f"{cam.name}.ppm"
        write_ppm(o, scene.original_images[i])
        write_ppm(h, scene.hidden_images[i])
        views.append({"camera": cam.to_dict(), "original": str(o.relative_to(root)),
                      "hidden": str(h.relative_to(root))})
    np.savez(root / "arrays.npz", original=np.stack(scene.original_images),
             hidden=np.stack(scene.hidden_images), anchors_positions=scene.anchors.positions,
             anchors_offsets=scene.anchors.offsets, hidden_means=scene.hidden_ref.means,
             hidden_scales=scene.hidden_ref.scales)
    lo, hi = scene.hidden_box
    manifest = {"spec": asdict(scene.spec), "views": views,
                "hidden_box": {"lo": lo.tolist(), "hi": hi.tolist()}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root) -> SyntheticScene:
    """Reload a dataset directory; the scene is regenerated from its spec and checked."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    sd = manifest["spec"]
    for key in ("hidden_center", "background", "hidden_background"):
        sd[key] = tuple(sd[key])
    scene = make_scene(SyntheticSpec(**sd))
    with np.load(root / "arrays.npz") as z:
        if not np.array_equal(z["original"], np.stack(scene.original_images)):
            raise ValueError(f"{root}: stored images do not match the regenerated scene")
    return scene
