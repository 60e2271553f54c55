import numpy as np
import pytest

from stegosplat import autodiff as ad
from stegosplat.geometry import look_at
from stegosplat.scene import (FEATURE_DIM, MLP_INPUT, AnchorCloud, AnchorPoint, AnchorTensors, DecoderSet,
                              KeyBundle, KeyIntegrityError, MissingKeyError, Origin, blend_features,
                              decode_all, derive_hidden, derive_original, feature_bank, view_inputs)

from conftest import check_grads


@pytest.fixture
def cam():
    return look_at((2.0, 1.0, 1.0), (0.0, 0.0, 0.0), width=16, height=16)


def _cloud(rng, n=4, k=3):
    return AnchorCloud(rng.uniform(-0.3, 0.3, (n, 3)), rng.normal(size=(n, FEATURE_DIM)),
                       np.log(rng.uniform(0.05, 0.2, (n, 3))), rng.uniform(-1, 1, (n, k, 3)))


def test_feature_bank_pools():
    f = np.arange(FEATURE_DIM, dtype=float)
    full, half, quarter = feature_bank(f)
    assert np.array_equal(full, f)
    assert half[0] == half[1] == 0.5 and half[30] == half[31] == 30.5
    assert np.all(quarter[:4] == 1.5)
    c = np.full(FEATURE_DIM, 2.5)
    assert all(np.allclose(x, c) for x in feature_bank(c))


def test_blend_features_constant_feature_and_inputs(cam):
    dec = DecoderSet.create(k=3, seed=0)
    a = AnchorPoint(np.array([0.1, 0.0, 0.0]), np.full(FEATURE_DIM, -0.7), np.zeros(3), np.zeros((3, 3)))
    fhat, dist, direction = blend_features(a, cam, dec)
    assert np.allclose(fhat, -0.7)
    assert dist == pytest.approx(np.linalg.norm(a.x_v - cam.center))
    assert np.allclose(direction, (a.x_v - cam.center) / dist)
    v = view_inputs(AnchorTensors.bind(_cloud(np.random.default_rng(0)), False), cam, dec.F_w)
    assert v.mlp_in.shape == (4, MLP_INPUT) == (4, 36)


def test_derive_original_heads(cam):
    rng = np.random.default_rng(1)
    cloud = _cloud(rng, 5, 4)
    dec = DecoderSet.create(k=4, seed=3)
    g = derive_original(AnchorTensors.bind(cloud, False), cam, dec)
    assert len(g) == 20
    assert np.all((g.colors.value > 0) & (g.colors.value < 1))
    assert np.all(np.abs(g.opacity.value) < 1)
    assert np.allclose(np.linalg.norm(g.quats.value, axis=1), 1.0)
    assert np.all(g.scales.value > 0)
    expect = cloud.positions[:, None] + cloud.offsets * cloud.scaling[:, None]
    assert np.allclose(g.means.value, expect.reshape(-1, 3))


def test_derive_hidden_ignores_scaling(cam):
    rng = np.random.default_rng(2)
    cloud = _cloud(rng, 3, 2)
    dec, key = DecoderSet.create(k=2), KeyBundle.create(k=2)
    h1 = derive_hidden(AnchorTensors.bind(cloud, False), cam, dec, key)
    cloud.raw_scaling += 1.0
    h2 = derive_hidden(AnchorTensors.bind(cloud, False), cam, dec, key)
    assert np.allclose(h1.means.value, h2.means.value)
    assert not np.allclose(h1.scales.value, h2.scales.value)
    with pytest.raises(MissingKeyError):
        derive_hidden(AnchorTensors.bind(cloud, False), cam, dec, None)


def test_decode_all_without_key(cam):
    cloud = _cloud(np.random.default_rng(3))
    ori, hid = decode_all(cloud, cam, DecoderSet.create(k=3))
    assert hid is None and len(ori) == 12
    ori, hid = decode_all(AnchorCloud.empty(3), cam, DecoderSet.create(k=3), KeyBundle.create(k=3))
    assert len(ori) == 0 and len(hid) == 0


@pytest.mark.parametrize("seed", range(3))
def test_anchor_decoding_gradients(seed, cam):
    rng = np.random.default_rng(seed)
    cloud = _cloud(rng, 2, 2)
    dec, key = DecoderSet.create(k=2, seed=seed), KeyBundle.create(k=2, seed=seed + 1)
    w = rng.normal(size=(4, 3))

    def f(pos, feat, raw, off):
        t = AnchorTensors(pos, feat, raw, off)
        o = derive_original(t, cam, dec)
        h = derive_hidden(t, cam, dec, key)
        terms = [ad.sum_(ad.mul(o.means, ad.constant(w))), ad.sum_(ad.mul(o.colors, ad.constant(w))),
                 ad.sum_(o.opacity), ad.sum_(ad.mul(o.scales, ad.constant(w))), ad.sum_(ad.square(o.quats)),
                 ad.sum_(ad.mul(h.means, ad.constant(w))), ad.sum_(ad.mul(h.colors, ad.constant(w)))]
        out = terms[0]
        for t_ in terms[1:]:
            out = ad.add(out, t_)
        return out

    params = [cloud.positions.copy(), cloud.features.copy(), cloud.raw_scaling.copy(), cloud.offsets.copy()]
    assert check_grads(f, params) < 1e-4


def test_key_integrity():
    key = KeyBundle.create(k=2, n_bits=8).seal()
    key.validate()
    assert key.n_bits == 8 and set(key.mlps()) == {"F_o", "F_c", "F_alpha", "F_q", "F_s", "F_b"}
    key.F_c.params["b2"][0] += 1e-9
    with pytest.raises(KeyIntegrityError):
        key.validate()


def test_zero_bit_head_gives_zero_logits():
    key = KeyBundle.create(k=2, n_bits=5)
    key.F_b.zero_()
    assert np.array_equal(key.F_b.forward_numpy(np.random.default_rng(0).normal(size=(3, FEATURE_DIM))),
                          np.zeros((3, 5)))


def test_cloud_structure():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, (500, 3))
    cloud = AnchorCloud.init_from_points(pts, 0.25, k=4)
    cells = np.unique(np.round(pts / 0.25), axis=0)
    assert len(cloud) == len(cells) and cloud.k == 4 and cloud.seed.all()
    assert np.allclose(cloud.scaling, 0.25)
    sub = cloud.subset([2, 0])
    assert np.array_equal(sub.positions, cloud.positions[[2, 0]])
    both = sub.append(AnchorCloud.empty(4))
    assert len(both) == 2 and both.offsets.shape == (2, 4, 3)
    assert AnchorCloud.empty(4).offsets.shape == (0, 4, 3)
    pt = cloud[1]
    assert pt.origin == Origin.ORI and np.allclose(pt.l_v, 0.25)
    back = AnchorCloud.from_points([cloud[0], cloud[1]])
    assert np.array_equal(back.features, cloud.features[:2])
    assert cloud.counts() == {"ori": len(cloud), "hid": 0}
