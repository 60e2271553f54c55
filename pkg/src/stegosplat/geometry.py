"""Gaussian primitive math: covariance composition, EWA projection, 2D density.

Quaternions are (w, x, y, z).  Cameras follow the OpenCV convention: the
camera looks down +z, x to the right, y down, pixel centres at integer
coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LOW_PASS = 0.3  # px^2 added to the projected covariance diagonal
SINGULAR_DET = 1e-12


class SingularCovariance(ValueError):
    pass


@dataclass
class Camera:
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            R=np.array(d["R"]), t=np.array(d["t"]), fx=d["fx"], fy=d["fy"],
            cx=d["cx"], cy=d["cy"], width=int(d["width"]), height=int(d["height"]),
            near=d.get("near", 0.01), name=d.get("name", ""),
        )


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, width=64, height=64, fov_deg=50.0,
            near=0.01, name="") -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    return Camera(R=R, t=-R @ eye, fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height, near=near, name=name)


@dataclass
class Gaussian3D:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


# ------------------------------------------------------------------ rotation

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions ``[..., 4]`` (not re-normalized)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_vjp(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = lambda i, j: gR[:, i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = (2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1))
          - 4 * x * (g(1, 1) + g(2, 2)))
    dy = (2 * (x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1))
          - 4 * y * (g(0, 0) + g(2, 2)))
    dz = (2 * (-w * g(0, 1) + x * g(0, 2) + w * g(1, 0) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
          - 4 * z * (g(0, 0) + g(1, 1)))
    return np.stack([dw, dx, dy, dz], axis=1)


def covariance3d(q, s) -> np.ndarray:
    """``R(q) diag(s)^2 R(q)^T`` for a single Gaussian; ``q`` is re-normalized."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero-norm quaternion")
    M = quat_to_rotmat(q / n) * np.asarray(s, dtype=np.float64)[None, :]
    return M @ M.T


def covariance3d_batch(q: ad.Tensor, s: ad.Tensor) -> ad.Tensor:
    """Differentiable ``[N,4], [N,3] -> [N,3,3]``; quaternions used as given."""
    qv, sv = q.value, s.value
    R = quat_to_rotmat(qv)
    M = R * sv[:, None, :]
    cov = M @ M.transpose(0, 2, 1)

    def back(g):
        dM = (g + g.transpose(0, 2, 1)) @ M
        dR = dM * sv[:, None, :]
        ds = (dM * R).sum(axis=1)
        return _rotmat_vjp(qv, dR), ds

    return ad.record(cov, (q, s), back)


# ---------------------------------------------------------------- projection

def _camera_space(mu: np.ndarray, cam: Camera) -> np.ndarray:
    return mu @ cam.R.T + cam.t


def project_means(mu: ad.Tensor, cam: Camera) -> tuple[ad.Tensor, np.ndarray, np.ndarray]:
    """Pixel means ``[N,2]``, camera depth ``[N]`` and in-front mask ``[N]``."""
    p = _camera_space(mu.value, cam)
    depth = p[:, 2].copy()
    valid = depth > cam.near
    z = np.where(valid, depth, 1.0)
    u = cam.fx * p[:, 0] / z + cam.cx
    v = cam.fy * p[:, 1] / z + cam.cy
    m2 = np.stack([u, v], axis=1)

    def back(g):
        gu = np.where(valid, g[:, 0], 0.0)
        gv = np.where(valid, g[:, 1], 0.0)
        dp = np.stack([
            gu * cam.fx / z,
            gv * cam.fy / z,
            -(gu * cam.fx * p[:, 0] + gv * cam.fy * p[:, 1]) / (z * z),
        ], axis=1)
        return (dp @ cam.R,)

    return ad.record(m2, (mu,), back), depth, valid


def project_cov(mu: ad.Tensor, cov3d: ad.Tensor, cam: Camera, low_pass: float = LOW_PASS) -> ad.Tensor:
    """EWA screen covariance ``J W Sigma W^T J^T + low_pass * I`` per Gaussian."""
    p = _camera_space(mu.value, cam)
    valid = p[:, 2] > cam.near
    z = np.where(valid, p[:, 2], 1.0)
    N = len(p)
    J = np.zeros((N, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * p[:, 0] / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * p[:, 1] / (z * z)
    T = J @ cam.R
    S = cov3d.value
    cov2 = T @ S @ T.transpose(0, 2, 1)
    cov2[:, 0, 0] += low_pass
    cov2[:, 1, 1] += low_pass

    def back(g):
        g = g * valid[:, None, None]
        gS = T.transpose(0, 2, 1) @ g @ T
        dT = g @ T @ S.transpose(0, 2, 1) + g.transpose(0, 2, 1) @ T @ S
        dJ = dT @ cam.R.T
        z2, z3 = z * z, z * z * z
        dpx = -cam.fx / z2 * dJ[:, 0, 2]
        dpy = -cam.fy / z2 * dJ[:, 1, 2]
        dpz = (-cam.fx / z2 * dJ[:, 0, 0] + 2 * cam.fx * p[:, 0] / z3 * dJ[:, 0, 2]
               - cam.fy / z2 * dJ[:, 1, 1] + 2 * cam.fy * p[:, 1] / z3 * dJ[:, 1, 2])
        dp = np.stack([dpx, dpy, dpz], axis=1)
        return dp @ cam.R, gS

    return ad.record(cov2, (mu, cov3d), back)


def project(g: Gaussian3D, cam: Camera) -> Splat2D | None:
    """Project one Gaussian; ``None`` when it is at or behind the near plane."""
    mu = ad.constant(np.asarray(g.mu, dtype=np.float64)[None, :])
    m2, depth, valid = project_means(mu, cam)
    if not valid[0]:
        return None
    cov3 = ad.constant(covariance3d(g.q, g.s)[None])
    cov2 = project_cov(mu, cov3, cam)
    return Splat2D(mean2d=m2.value[0], cov2d=cov2.value[0], depth=float(depth[0]),
                   opacity=float(g.opacity), color=np.asarray(g.color, dtype=np.float64))


# ------------------------------------------------------------------- density

def eval_splat(sp: Splat2D, p) -> float:
    """``exp(-1/2 d^T cov^-1 d)`` with ``d = p - mean2d``."""
    cov = np.asarray(sp.cov2d, dtype=np.float64)
    if abs(np.linalg.det(cov)) < SINGULAR_DET:
        raise SingularCovariance("splat covariance is singular")
    d = np.asarray(p, dtype=np.float64) - sp.mean2d
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


def conic(cov2d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of symmetric 2x2 covariances as (A, B, C) entries plus determinant."""
    a = cov2d[:, 0, 0]
    b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    safe = np.where(np.abs(det) < SINGULAR_DET, 1.0, det)
    return c / safe, -b / safe, a / safe, det


def conic_vjp_to_cov(A, B, C, gA, gB, gC) -> np.ndarray:
    """Pull gradients on conic entries back to the (symmetric) covariance.

    ``gB`` is the gradient wrt the shared off-diagonal value.
    """
    N = len(A)
    Q = np.empty((N, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = A, B, B, C
    gQ = np.empty((N, 2, 2))
    gQ[:, 0, 0], gQ[:, 0, 1], gQ[:, 1, 0], gQ[:, 1, 1] = gA, 0.5 * gB, 0.5 * gB, gC
    return -Q @ gQ @ Q


def splat_density(mean2d: ad.Tensor, cov2d: ad.Tensor, pixels: np.ndarray) -> ad.Tensor:
    """Differentiable batched ``G'(p)``: one pixel per splat, ``-> [N]``."""
    A, B, C, det = conic(cov2d.value)
    if np.any(np.abs(det) < SINGULAR_DET):
        raise SingularCovariance("splat covariance is singular")
    d = np.asarray(pixels, dtype=np.float64) - mean2d.value
    dx, dy = d[:, 0], d[:, 1]
    G = np.exp(-0.5 * (A * dx * dx + 2 * B * dx * dy + C * dy * dy))

    def back(g):
        gp = g * G
        gm = np.stack([(A * dx + B * dy) * gp, (B * dx + C * dy) * gp], axis=1)
        gcov = conic_vjp_to_cov(A, B, C, -0.5 * dx * dx * gp, -dx * dy * gp, -0.5 * dy * dy * gp)
        return gm, gcov

    return ad.record(G, (mean2d, cov2d), back)
