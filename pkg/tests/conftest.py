import numpy as np
import pytest

from stegosplat import autodiff as ad
from stegosplat.geometry import look_at
from stegosplat.rasterizer import Gaussians


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max relative error, with a floor so near-zero entries compare absolutely."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def grad_of(build, params: list[np.ndarray]):
    """Analytic gradients of scalar ``build(*tensors)`` wrt each array in ``params``."""
    ts = [ad.parameter(p) for p in params]
    with ad.Tape() as tape:
        out = build(*ts)
        tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.value) for t in ts]


def value_of(build, params):
    with ad.Tape():
        return float(build(*[ad.constant(p) for p in params]).value)


def check_grads(build, params, h=1e-6):
    """Max relative error over all parameters."""
    analytic = grad_of(build, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        num = central_diff(lambda: value_of(build, params), p, h)
        worst = max(worst, rel_err(g, num))
    return worst


def random_gaussians(rng, n, center=(0.0, 0.0, 0.0), spread=0.4, scale=(0.05, 0.2)):
    means = np.asarray(center) + rng.uniform(-spread, spread, (n, 3))
    colors = rng.uniform(0.05, 0.95, (n, 3))
    opacity = rng.uniform(0.2, 0.9, n)
    quats = rng.normal(size=(n, 4))
    scales = rng.uniform(*scale, (n, 3))
    return means, colors, opacity, quats, scales


@pytest.fixture
def camera16():
    return look_at((2.0, 0.4, 0.8), (0.0, 0.0, 0.0), width=16, height=16, fov_deg=45)


@pytest.fixture
def camera32():
    return look_at((2.2, -0.6, 1.0), (0.0, 0.0, 0.0), width=32, height=32, fov_deg=45)


def gaussians_from(params, requires_grad=True) -> Gaussians:
    return Gaussians.from_arrays(*params, requires_grad=requires_grad)
