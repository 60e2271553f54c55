import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stegosplat import autodiff as ad
from stegosplat.geometry import (Camera, Gaussian3D, SingularCovariance, Splat2D, covariance3d,
                                 covariance3d_batch, eval_splat, look_at, project, project_cov,
                                 project_means, quat_to_rotmat, splat_density)

from conftest import check_grads

seeds = st.integers(0, 2**31 - 1)


def _pixel(mu, cam):
    p = cam.R @ mu + cam.t
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def _numeric_jacobian(mu, cam, h=1e-6):
    J = np.zeros((2, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        J[:, i] = (_pixel(mu + e, cam) - _pixel(mu - e, cam)) / (2 * h)
    return J


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(R=np.diag([1.0, 1.0, 2.0]), t=np.zeros(3), fx=1, fy=1, cx=0, cy=0, width=4, height=4)
    with pytest.raises(ValueError):
        Camera(R=np.eye(3), t=np.zeros(3), fx=0, fy=1, cx=0, cy=0, width=4, height=4)
    cam = look_at((1.0, 2.0, 3.0), (0.0, 0.0, 0.0))
    assert np.allclose(cam.center, [1.0, 2.0, 3.0])
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.R, cam.R) and back.fx == cam.fx


def test_covariance_examples():
    assert np.allclose(covariance3d([1, 0, 0, 0], [1, 2, 3]), np.diag([1.0, 4.0, 9.0]))
    # 90 degrees about z swaps x and y
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    assert np.allclose(covariance3d(q, [1, 2, 3]), np.diag([4.0, 1.0, 9.0]))
    with pytest.raises(ValueError):
        covariance3d([0, 0, 0, 0], [1, 1, 1])


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_covariance_invariants(seed):
    rng = np.random.default_rng(seed)
    q, s = rng.normal(size=4), rng.uniform(0.1, 2.0, 3)
    S = covariance3d(q, s)
    assert np.allclose(S, S.T)
    assert np.all(np.linalg.eigvalsh(S) > 0)
    assert np.allclose(covariance3d(-q, s), S)
    assert np.allclose(covariance3d(3.7 * q, s), S)
    R = quat_to_rotmat(q / np.linalg.norm(q))
    assert np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1.0)
    assert np.allclose(np.sort(np.linalg.eigvalsh(S)), np.sort(s**2))


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_covariance_gradient(seed):
    rng = np.random.default_rng(seed)
    q, s = rng.normal(size=(3, 4)), rng.uniform(0.2, 1.5, (3, 3))
    w = rng.normal(size=(3, 3, 3))

    def f(q, s):
        return ad.sum_(ad.mul(covariance3d_batch(q, s), ad.constant(w)))

    assert check_grads(f, [q, s]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_projection_matches_numeric_jacobian(seed):
    rng = np.random.default_rng(seed)
    cam = look_at(rng.uniform(1.5, 3.0, 3), (0.0, 0.0, 0.0), width=48, height=40, fov_deg=55)
    mu = rng.uniform(-0.5, 0.5, 3)
    q, s = rng.normal(size=4), rng.uniform(0.05, 0.4, 3)
    sp = project(Gaussian3D(mu=mu, q=q, s=s), cam)
    assert np.allclose(sp.mean2d, _pixel(mu, cam))
    J = _numeric_jacobian(mu, cam)
    expected = J @ covariance3d(q, s) @ J.T + 0.3 * np.eye(2)
    assert np.allclose(sp.cov2d, expected, rtol=1e-6, atol=1e-6)
    assert sp.depth == pytest.approx((cam.R @ mu + cam.t)[2])


def test_project_behind_camera():
    cam = look_at((0.0, 0.0, 2.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
    assert project(Gaussian3D(mu=np.array([0.0, 0.0, 3.0]), q=np.array([1.0, 0, 0, 0]), s=np.ones(3)), cam) is None
    mu = ad.constant(np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 0.0]]))
    _, depth, valid = project_means(mu, cam)
    assert not valid[0] and valid[1]


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_projection_gradients(seed):
    rng = np.random.default_rng(seed)
    cam = look_at((2.0, 0.5, 1.0), (0.0, 0.0, 0.0), width=32, height=32)
    mu = rng.uniform(-0.4, 0.4, (4, 3))
    q, s = rng.normal(size=(4, 4)), rng.uniform(0.05, 0.3, (4, 3))
    w2, wc = rng.normal(size=(4, 2)), rng.normal(size=(4, 2, 2))

    def f(mu, q, s):
        m2, _, _ = project_means(mu, cam)
        cov2 = project_cov(mu, covariance3d_batch(q, s), cam)
        return ad.add(ad.sum_(ad.mul(m2, ad.constant(w2))), ad.sum_(ad.mul(cov2, ad.constant(wc))))

    assert check_grads(f, [mu, q, s]) < 1e-4


def test_eval_splat_examples():
    sp = Splat2D(mean2d=np.array([3.0, 4.0]), cov2d=np.eye(2), depth=1.0, opacity=1.0, color=np.ones(3))
    assert eval_splat(sp, [3.0, 4.0]) == 1.0
    assert eval_splat(sp, [4.0, 4.0]) == pytest.approx(np.exp(-0.5))
    sp.cov2d = np.diag([4.0, 1.0])
    assert eval_splat(sp, [5.0, 4.0]) == pytest.approx(np.exp(-0.5))
    sp.cov2d = np.zeros((2, 2))
    with pytest.raises(SingularCovariance):
        eval_splat(sp, [0.0, 0.0])


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_splat_density_matches_scalar_and_gradient(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(0, 10, (3, 2))
    L = rng.normal(size=(3, 2, 2))
    cov = L @ L.transpose(0, 2, 1) + 0.5 * np.eye(2)
    px = m + rng.normal(size=(3, 2))
    dens = splat_density(ad.constant(m), ad.constant(cov), px).value
    for i in range(3):
        sp = Splat2D(mean2d=m[i], cov2d=cov[i], depth=1.0, opacity=1.0, color=np.ones(3))
        assert dens[i] == pytest.approx(eval_splat(sp, px[i]), rel=1e-12)
    w = rng.normal(size=3)

    def f(m, cov):
        return ad.sum_(ad.mul(splat_density(m, cov, px), ad.constant(w)))

    assert check_grads(f, [m, cov]) < 1e-4
