"""Anchor-based scene representation with a public and a private decoding path.

Each anchor stores a position, a 32-d feature, a log-scaling factor and ``k``
explicit offsets.  The public decoders turn anchors into the Gaussians of the
original scene; the private :class:`KeyBundle` turns the *same* anchors into
the Gaussians of the hidden object.  Nothing of the key lives in the anchors.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import Camera
from .rasterizer import Gaussians

FEATURE_DIM = 32
HIDDEN_UNITS = 32
MLP_INPUT = FEATURE_DIM + 1 + 3  # blended feature, distance, view direction


class Origin(enum.IntEnum):
    ORI = 0  # grown from original-stream gradients (or initial points)
    HID = 1  # grown from hidden-stream gradients


class KeyIntegrityError(ValueError):
    pass


class MissingKeyError(PermissionError):
    """A hidden-stream operation was attempted without a private key."""


# ---------------------------------------------------------------------- MLPs

class MLP:
    """``Linear(d_in -> 32) -> ReLU -> Linear(32 -> d_out)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 hidden: int = HIDDEN_UNITS, out_scale: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        b1 = 1.0 / np.sqrt(d_in)
        b2 = 1.0 / np.sqrt(hidden)
        self.params = {
            "W1": rng.uniform(-b1, b1, (d_in, hidden)),
            "b1": rng.uniform(-b1, b1, hidden),
            "W2": rng.uniform(-b2, b2, (hidden, d_out)) * out_scale,
            "b2": rng.uniform(-b2, b2, d_out) * out_scale,
        }
        self._tensors: dict[str, ad.Tensor] | None = None

    @property
    def d_in(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def d_out(self) -> int:
        return self.params["W2"].shape[1]

    def bind(self) -> dict[str, ad.Tensor]:
        """Wrap the weights as fresh gradient-tracking tensors for one step."""
        self._tensors = {k: ad.parameter(v) for k, v in self.params.items()}
        return self._tensors

    def unbind(self) -> None:
        self._tensors = None

    def grads(self) -> dict[str, np.ndarray | None]:
        if self._tensors is None:
            return {k: None for k in self.params}
        return {k: t.grad for k, t in self._tensors.items()}

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        p = self._tensors or {k: ad.constant(v) for k, v in self.params.items()}
        h = ad.relu(ad.linear(x, p["W1"], p["b1"]))
        return ad.linear(h, p["W2"], p["b2"])

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        return np.maximum(x @ p["W1"] + p["b1"], 0.0) @ p["W2"] + p["b2"]

    def zero_(self) -> "MLP":
        for v in self.params.values():
            v[...] = 0.0
        return self

    def copy(self) -> "MLP":
        m = MLP.__new__(MLP)
        m.params = {k: v.copy() for k, v in self.params.items()}
        m._tensors = None
        return m


def _quat_head(d_in: int, k: int, rng) -> MLP:
    m = MLP(d_in, 4 * k, rng)
    m.params["b2"].reshape(k, 4)[:] = (1.0, 0.0, 0.0, 0.0)
    return m


@dataclass
class DecoderSet:
    """Public decoders: feature-bank weights plus colour/opacity/rotation/scale heads."""

    k: int
    F_w: MLP
    F_c: MLP
    F_alpha: MLP
    F_q: MLP
    F_s: MLP

    @classmethod
    def create(cls, k: int = 10, seed: int = 0) -> "DecoderSet":
        rng = np.random.default_rng(seed)
        return cls(k=k, F_w=MLP(4, 3, rng), F_c=MLP(MLP_INPUT, 3 * k, rng),
                   F_alpha=MLP(MLP_INPUT, k, rng), F_q=_quat_head(MLP_INPUT, k, rng),
                   F_s=MLP(MLP_INPUT, 3 * k, rng, out_scale=0.1))

    def mlps(self) -> dict[str, MLP]:
        return {"F_w": self.F_w, "F_c": self.F_c, "F_alpha": self.F_alpha, "F_q": self.F_q, "F_s": self.F_s}


@dataclass
class KeyBundle:
    """Private decoders.  Holding one is what authorizes hidden decoding."""

    k: int
    F_o: MLP
    F_c: MLP
    F_alpha: MLP
    F_q: MLP
    F_s: MLP
    F_b: MLP | None = None
    version: int = 1
    checksum: int | None = None  # set when sealed or loaded from disk

    @classmethod
    def create(cls, k: int = 10, n_bits: int = 0, seed: int = 1, offset_scale: float = 0.1) -> "KeyBundle":
        rng = np.random.default_rng(seed)
        return cls(k=k, F_o=MLP(MLP_INPUT, 3 * k, rng, out_scale=offset_scale),
                   F_c=MLP(MLP_INPUT, 3 * k, rng), F_alpha=MLP(MLP_INPUT, k, rng),
                   F_q=_quat_head(MLP_INPUT, k, rng), F_s=MLP(MLP_INPUT, 3 * k, rng, out_scale=0.1),
                   F_b=MLP(FEATURE_DIM, n_bits, rng, out_scale=0.1) if n_bits > 0 else None)

    @property
    def n_bits(self) -> int:
        return 0 if self.F_b is None else self.F_b.d_out

    def mlps(self) -> dict[str, MLP]:
        out = {"F_o": self.F_o, "F_c": self.F_c, "F_alpha": self.F_alpha, "F_q": self.F_q, "F_s": self.F_s}
        if self.F_b is not None:
            out["F_b"] = self.F_b
        return out

    def payload(self) -> bytes:
        parts = []
        for name, mlp in self.mlps().items():
            for pname in ("W1", "b1", "W2", "b2"):
                parts.append(np.ascontiguousarray(mlp.params[pname], dtype="<f8").tobytes())
        return b"".join(parts)

    def seal(self) -> "KeyBundle":
        from .io import fnv1a64
        self.checksum = fnv1a64(self.payload())
        return self

    def validate(self) -> None:
        if self.checksum is None:
            return
        from .io import fnv1a64
        if fnv1a64(self.payload()) != self.checksum:
            raise KeyIntegrityError("key bundle checksum mismatch")


# -------------------------------------------------------------------- anchors

@dataclass
class AnchorPoint:
    x_v: np.ndarray
    f_v: np.ndarray
    raw_l: np.ndarray  # log of the scaling factor
    offsets: np.ndarray  # [k,3]
    origin: Origin = Origin.ORI

    @property
    def l_v(self) -> np.ndarray:
        return np.exp(self.raw_l)


@dataclass
class AnchorCloud:
    """Struct-of-arrays anchor set; the unit that training mutates."""

    positions: np.ndarray  # [A,3]
    features: np.ndarray  # [A,32]
    raw_scaling: np.ndarray  # [A,3], log l_v
    offsets: np.ndarray  # [A,k,3]
    origin: np.ndarray = field(default=None)  # [A] int8, never serialized
    seed: np.ndarray = field(default=None)  # [A] bool, initial anchors

    def __post_init__(self):
        A = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(A, 3)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(A, FEATURE_DIM)
        self.raw_scaling = np.asarray(self.raw_scaling, dtype=np.float64).reshape(A, 3)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.ndim != 3 or offsets.shape[0] != A or offsets.shape[2] != 3:
            offsets = offsets.reshape(A, -1, 3)
        self.offsets = offsets
        if self.origin is None:
            self.origin = np.full(A, Origin.ORI, dtype=np.int8)
        if self.seed is None:
            self.seed = np.zeros(A, dtype=bool)
        self.origin = np.asarray(self.origin, dtype=np.int8)
        self.seed = np.asarray(self.seed, dtype=bool)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.raw_scaling)

    def __getitem__(self, i: int) -> AnchorPoint:
        return AnchorPoint(self.positions[i].copy(), self.features[i].copy(), self.raw_scaling[i].copy(),
                           self.offsets[i].copy(), Origin(int(self.origin[i])))

    @classmethod
    def from_points(cls, points: list[AnchorPoint]) -> "AnchorCloud":
        if not points:
            return cls.empty(1)
        return cls(np.stack([p.x_v for p in points]), np.stack([p.f_v for p in points]),
                   np.stack([p.raw_l for p in points]), np.stack([p.offsets for p in points]),
                   np.array([int(p.origin) for p in points], dtype=np.int8))

    @classmethod
    def empty(cls, k: int) -> "AnchorCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, FEATURE_DIM)), np.zeros((0, 3)), np.zeros((0, k, 3)))

    @classmethod
    def init_from_points(cls, points: np.ndarray, voxel_size: float, k: int = 10,
                         rng: np.random.Generator | None = None) -> "AnchorCloud":
        """Voxelize a point set: one anchor per occupied voxel centre."""
        rng = rng if rng is not None else np.random.default_rng(0)
        cells = np.unique(np.round(np.asarray(points) / voxel_size).astype(np.int64), axis=0)
        A = len(cells)
        return cls(cells * voxel_size, np.zeros((A, FEATURE_DIM)), np.full((A, 3), np.log(voxel_size)),
                   rng.uniform(-0.5, 0.5, (A, k, 3)), seed=np.ones(A, dtype=bool))

    def subset(self, keep) -> "AnchorCloud":
        keep = np.asarray(keep)
        return AnchorCloud(self.positions[keep], self.features[keep], self.raw_scaling[keep],
                           self.offsets[keep], self.origin[keep], self.seed[keep])

    def append(self, other: "AnchorCloud") -> "AnchorCloud":
        return AnchorCloud(np.concatenate([self.positions, other.positions]),
                           np.concatenate([self.features, other.features]),
                           np.concatenate([self.raw_scaling, other.raw_scaling]),
                           np.concatenate([self.offsets, other.offsets]),
                           np.concatenate([self.origin, other.origin]),
                           np.concatenate([self.seed, other.seed]))

    def copy(self) -> "AnchorCloud":
        return self.subset(np.arange(len(self)))

    def counts(self) -> dict[str, int]:
        return {"ori": int((self.origin == Origin.ORI).sum()), "hid": int((self.origin == Origin.HID).sum())}


@dataclass
class AnchorTensors:
    """Tape view of an :class:`AnchorCloud` for one forward/backward pass."""

    positions: ad.Tensor
    features: ad.Tensor
    raw_scaling: ad.Tensor
    offsets: ad.Tensor

    @classmethod
    def bind(cls, cloud: AnchorCloud, requires_grad: bool = True) -> "AnchorTensors":
        mk = ad.parameter if requires_grad else ad.constant
        return cls(mk(cloud.positions), mk(cloud.features), mk(cloud.raw_scaling), mk(cloud.offsets))


# --------------------------------------------------------------- feature bank

def _pool_matrix(group: int, dim: int = FEATURE_DIM) -> np.ndarray:
    P = np.zeros((dim, dim))
    for j in range(dim):
        g0 = (j // group) * group
        P[g0:g0 + group, j] = 1.0 / group
    return P


POOL_HALF = _pool_matrix(2)
POOL_QUARTER = _pool_matrix(4)


def feature_bank(f: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f = np.asarray(f, dtype=np.float64)
    return f, f @ POOL_HALF, f @ POOL_QUARTER


@dataclass
class ViewInputs:
    fhat: ad.Tensor  # [A,32]
    dist: ad.Tensor  # [A]
    direction: ad.Tensor  # [A,3]
    mlp_in: ad.Tensor  # [A,36]


def view_inputs(anchors: AnchorTensors, cam: Camera, F_w: MLP) -> ViewInputs:
    rel = ad.add_const(anchors.positions, -cam.center[None, :].repeat(anchors.positions.shape[0], 0))
    dist = ad.row_norm(rel)
    if np.any(dist.value == 0):
        raise ValueError("anchor coincides with the camera centre")
    direction = ad.scale_rows(rel, ad.reciprocal(dist))
    A = anchors.positions.shape[0]
    geo = ad.concat([ad.reshape(dist, (A, 1)), direction], axis=1)
    w = ad.softmax(F_w(geo))
    f = anchors.features
    fhat = ad.add(ad.add(ad.scale_rows(f, ad.column(w, 0)),
                         ad.scale_rows(ad.matmul_const(f, POOL_HALF), ad.column(w, 1))),
                  ad.scale_rows(ad.matmul_const(f, POOL_QUARTER), ad.column(w, 2)))
    return ViewInputs(fhat, dist, direction, ad.concat([fhat, geo], axis=1))


def blend_features(a: AnchorPoint, cam: Camera, dec: DecoderSet) -> tuple[np.ndarray, float, np.ndarray]:
    """Blended feature, distance and unit view direction for one anchor."""
    t = AnchorTensors(ad.constant(a.x_v[None]), ad.constant(a.f_v[None]),
                      ad.constant(a.raw_l[None]), ad.constant(a.offsets[None]))
    v = view_inputs(t, cam, dec.F_w)
    return v.fhat.value[0], float(v.dist.value[0]), v.direction.value[0]


# ------------------------------------------------------------------ decoding

def _attributes(v: ViewInputs, anchors: AnchorTensors, F_c: MLP, F_alpha: MLP, F_q: MLP, F_s: MLP,
                k: int) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor, ad.Tensor]:
    A = anchors.positions.shape[0]
    colors = ad.reshape(ad.sigmoid(F_c(v.mlp_in)), (A * k, 3))
    opacity = ad.reshape(ad.tanh(F_alpha(v.mlp_in)), (A * k,))
    quats = ad.normalize_rows(ad.reshape(F_q(v.mlp_in), (A * k, 4)))
    l_rep = ad.repeat_rows(ad.exp(anchors.raw_scaling), k)
    scales = ad.mul(ad.exp(ad.reshape(F_s(v.mlp_in), (A * k, 3))), l_rep)
    return colors, opacity, quats, scales


def derive_original(anchors: AnchorTensors, cam: Camera, dec: DecoderSet,
                    view: ViewInputs | None = None) -> Gaussians:
    """k Gaussians per anchor, in anchor-then-offset order.

    Means are ``x_v + O_i * l_v`` from the stored offsets.
    """
    k = dec.k
    v = view or view_inputs(anchors, cam, dec.F_w)
    A = anchors.positions.shape[0]
    l_rep = ad.repeat_rows(ad.exp(anchors.raw_scaling), k)
    means = ad.add(ad.repeat_rows(anchors.positions, k),
                   ad.mul(ad.reshape(anchors.offsets, (A * k, 3)), l_rep))
    colors, opacity, quats, scales = _attributes(v, anchors, dec.F_c, dec.F_alpha, dec.F_q, dec.F_s, k)
    return Gaussians(means, colors, opacity, quats, scales)


def derive_hidden(anchors: AnchorTensors, cam: Camera, dec: DecoderSet, key: KeyBundle,
                  view: ViewInputs | None = None) -> Gaussians:
    """Hidden Gaussians: means ``x_v + F_o(...)`` (no l_v scaling), private attribute heads."""
    if key is None:
        raise MissingKeyError("hidden decoding requires a key bundle")
    key.validate()
    k = key.k
    v = view or view_inputs(anchors, cam, dec.F_w)
    A = anchors.positions.shape[0]
    means = ad.add(ad.repeat_rows(anchors.positions, k), ad.reshape(key.F_o(v.mlp_in), (A * k, 3)))
    colors, opacity, quats, scales = _attributes(v, anchors, key.F_c, key.F_alpha, key.F_q, key.F_s, k)
    return Gaussians(means, colors, opacity, quats, scales)


def decode_all(cloud: AnchorCloud, cam: Camera, dec: DecoderSet,
               key: KeyBundle | None = None) -> tuple[Gaussians, Gaussians | None]:
    """Original Gaussians from every anchor; hidden ones only when a key is given."""
    if len(cloud) == 0:
        empty = Gaussians.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
                                      np.zeros((0, 4)), np.zeros((0, 3)))
        return empty, (empty if key is not None else None)
    t = AnchorTensors.bind(cloud, requires_grad=False)
    v = view_inputs(t, cam, dec.F_w)
    ori = derive_original(t, cam, dec, v)
    hid = derive_hidden(t, cam, dec, key, v) if key is not None else None
    return ori, hid
