import math

import numpy as np
import pytest

from stegosplat.densify import (BoundingBox, DensifyConfig, DensifyState, GradientLedger, adaptive_threshold,
                                dbscan, grow, hidden_bbox, is_bbox_iteration, is_refinement,
                                median_nn_distance, prune_mask, rdo_step)
from stegosplat.scene import FEATURE_DIM, AnchorCloud, Origin

from oracles import brute_dbscan


def canonical(labels):
    """Relabel clusters by first appearance so label permutations compare equal."""
    out, seen = np.full(len(labels), -1), {}
    for i, lab in enumerate(labels):
        if lab >= 0:
            out[i] = seen.setdefault(lab, len(seen))
    return out


# ------------------------------------------------------------------ ledger

def test_ledger_constant_gradient_statistic():
    led = GradientLedger(n_anchors=2, k=3, step=4)
    for it in range(10):
        led.accumulate("ori", np.full(6, 0.25), it)
    assert np.allclose(led.statistic("ori"), 0.25)
    assert led.events["ori"] == 10


@pytest.mark.parametrize("T,s", [(1, 4), (10, 4), (12, 4), (13, 5), (7, 1), (100, 3)])
def test_ledger_hid_cadence(T, s):
    led = GradientLedger(n_anchors=1, k=2, step=s)
    for it in range(T):
        led.accumulate("hid", np.ones(2), it)
    assert led.events["hid"] == math.ceil(T / s)
    assert np.allclose(led.statistic("hid"), math.ceil(T / s) / T)


def test_ledger_visibility_and_positions():
    led = GradientLedger(n_anchors=2, k=1, step=2)
    vis = np.array([True, False])
    pos = np.array([[1.0, 2.0, 3.0], [9.0, 9.0, 9.0]])
    assert led.accumulate("hid", [0.5, 0.7], 0, visible=vis, positions=pos)
    assert not led.accumulate("hid", [0.5, 0.7], 1, visible=vis, positions=pos)
    assert np.allclose(led.statistic("hid"), [0.25, 0.0])
    assert np.allclose(led.hidden_positions(), [[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        led.accumulate("other", [0.0, 0.0], 0)
    with pytest.raises(ValueError):
        led.accumulate("ori", [0.0], 0)


def test_ledger_opacity():
    led = GradientLedger(n_anchors=3, k=2)
    led.add_opacity([0.1, -0.5, 0.2, 0.2, 0.0, 0.0], visible_anchor=[True, True, False])
    m = led.mean_opacity()
    assert m[0] == pytest.approx(0.1) and m[1] == pytest.approx(0.4) and np.isnan(m[2])


# -------------------------------------------------------------- threshold

def test_adaptive_threshold_values():
    cfg = DensifyConfig(tau_fix=0.0002, r_down=4)
    box = BoundingBox([0, 0, 0], [1, 1, 1])
    assert adaptive_threshold(np.array([0.5, 0.5, 0.5]), box, cfg) == 0.00005
    assert adaptive_threshold(np.array([2.0, 0.5, 0.5]), box, cfg) == 0.0002
    assert adaptive_threshold(np.array([1.0, 1.0, 1.0]), box, cfg) == 0.00005
    assert adaptive_threshold(np.array([0.5, 0.5, 0.5]), None, cfg) == 0.0002
    assert np.array_equal(adaptive_threshold(np.array([[0.5] * 3, [3.0] * 3]), box, cfg), [0.00005, 0.0002])


def test_bounding_box_rejects_inverted():
    with pytest.raises(ValueError):
        BoundingBox([1, 0, 0], [0, 1, 1])


# ------------------------------------------------------------------ DBSCAN

def test_dbscan_examples():
    pts = np.array([[0, 0], [0, 1], [1, 0], [10, 10], [10, 11], [50, 50]], dtype=float)
    labels = dbscan(pts, eps=1.5, min_pts=2)
    assert list(labels) == [0, 0, 0, 1, 1, -1]
    assert list(dbscan(pts, eps=1.5, min_pts=4)) == [-1] * 6
    assert len(dbscan(np.zeros((0, 3)), 1.0, 3)) == 0
    with pytest.raises(ValueError):
        dbscan(pts, eps=0.0, min_pts=2)


def test_dbscan_border_goes_to_first_cluster():
    # point 2 is a border point reachable from both cores
    pts = np.array([[0.0], [0.1], [1.0], [1.9], [2.0]])
    labels = dbscan(pts, eps=1.0, min_pts=2)
    assert labels[2] == labels[0]


@pytest.mark.parametrize("seed", range(10))
def test_dbscan_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    pts = np.concatenate([rng.normal(c, 0.3, (n // 3 + 1, 3)) for c in rng.uniform(-3, 3, (3, 3))])
    eps, min_pts = float(rng.uniform(0.1, 0.8)), int(rng.integers(2, 8))
    assert np.array_equal(canonical(dbscan(pts, eps, min_pts)), canonical(brute_dbscan(pts, eps, min_pts)))


def test_median_nn_distance():
    assert median_nn_distance(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])) == 1.0
    assert median_nn_distance(np.zeros((1, 3))) == 0.0


# -------------------------------------------------------- hand-traced step

def _five_anchor_scene():
    positions = np.array([[0, 0, 0], [10, 0, 0], [10, 1, 0], [11, 0, 0], [20, 0, 0]], dtype=float)
    features = np.arange(5)[:, None] * np.ones((5, FEATURE_DIM))
    offsets = np.zeros((5, 2, 3))
    offsets[1, 0] = (0, 0, 1)
    offsets[4, 0] = (2, 0, 0)
    origin = np.array([Origin.ORI, Origin.HID, Origin.HID, Origin.HID, Origin.ORI], dtype=np.int8)
    return AnchorCloud(positions, features, np.zeros((5, 3)), offsets, origin, np.zeros(5, bool))


def _five_anchor_ledger():
    led = GradientLedger(n_anchors=5, k=2, step=4)
    ori = np.zeros(10)
    ori[0] = 1e-4  # anchor 0 outside the box: below 2e-4
    ori[2] = 1e-4  # anchor 1 inside the box: above 5e-5
    ori[8] = 3e-4  # anchor 4: fires, offset lands in a free voxel
    ori[9] = 3e-4  # anchor 4: fires, lands on its own occupied voxel
    hid = np.zeros(10)
    hid[1] = 5e-4  # anchor 0: fires
    hid[4] = 1e-4  # anchor 2: inside the box, but hid always uses tau_fix
    hid[7] = 3e-4  # anchor 3: fires, but its voxel is claimed by ori growth
    hid_pos = np.zeros((10, 3))
    hid_pos[1] = (0.2, 3.1, -0.1)
    hid_pos[4] = (10, 5, 5)
    hid_pos[7] = (10.3, 0.1, 0.8)
    led.accumulate("ori", ori, 0)
    led.accumulate("hid", hid, 0, positions=hid_pos)
    op = np.full(10, 0.3)
    op[8:] = 0.0005  # anchor 4 mean opacity 0.001 < 0.005
    led.add_opacity(op)
    return led


def test_rdo_step_matches_hand_trace():
    cfg = DensifyConfig(tau_fix=0.0002, r_down=4, warmup=0, refine_interval=100, bbox_interval=100,
                        voxel_size=1.0, dbscan_eps=1.5, dbscan_min_pts=3, prune_threshold=0.005)
    cloud, led = _five_anchor_scene(), _five_anchor_ledger()
    state = DensifyState()
    res = rdo_step(cloud, led, cfg, 100, state)

    # bbox: anchors 1-3 form one cluster, padded by one voxel
    assert np.array_equal(state.bbox.lo, [9, -1, -1]) and np.array_equal(state.bbox.hi, [12, 2, 1])
    assert list(res.kept) == [0, 1, 2, 3]
    assert res.pruned == 1 and res.grown_ori == 2 and res.grown_hid == 1
    expected = np.array([[0, 0, 0], [10, 0, 0], [10, 1, 0], [11, 0, 0],
                         [10, 0, 1], [22, 0, 0],
                         [0, 3, 0]], dtype=float)
    assert np.array_equal(res.cloud.positions, expected)
    assert list(res.cloud.origin) == [0, 1, 1, 1, 0, 0, 1]
    assert list(res.cloud.features[:, 0]) == [0, 1, 2, 3, 1, 4, 0]
    assert np.array_equal(res.cloud.offsets[4:], np.zeros((3, 2, 3)))
    assert np.array_equal(res.cloud.raw_scaling[4:], np.zeros((3, 3)))
    assert led.n_anchors == 7 and led.events == {"ori": 0, "hid": 0}
    assert state.history[-1] == {"iteration": 100, "grown_ori": 2, "grown_hid": 1, "pruned": 1, "anchors": 7}


def test_rdo_step_off_cadence_is_identity():
    cfg = DensifyConfig(warmup=500, refine_interval=100)
    cloud = _five_anchor_scene()
    res = rdo_step(cloud, _five_anchor_ledger(), cfg, 450)
    assert res.cloud is cloud and res.n_new == 0
    assert not is_refinement(450, cfg) and is_refinement(500, cfg) and not is_refinement(550, cfg)
    assert is_bbox_iteration(1000, cfg) and not is_bbox_iteration(1000, DensifyConfig(rdo=False))


def test_without_rdo_no_threshold_drop():
    cfg = DensifyConfig(voxel_size=1.0, rdo=False)
    cloud, led = _five_anchor_scene(), _five_anchor_ledger()
    box = hidden_bbox(cloud, DensifyConfig(voxel_size=1.0, dbscan_eps=1.5, dbscan_min_pts=3))
    new = grow(cloud, led, box, cfg, "ori")
    assert np.array_equal(new.positions, [[22, 0, 0]])
    assert cfg.effective_hid_step == 1


def test_hidden_bbox_none_cases():
    cfg = DensifyConfig(voxel_size=1.0, dbscan_eps=0.5, dbscan_min_pts=3)
    assert hidden_bbox(AnchorCloud.empty(2), cfg) is None
    assert hidden_bbox(_five_anchor_scene(), cfg) is None


def test_seed_anchors_exempt_from_early_pruning():
    cloud = _five_anchor_scene()
    cloud.seed[:] = True
    led = _five_anchor_ledger()
    cfg = DensifyConfig(warmup=500, refine_interval=100)
    assert not prune_mask(cloud, led, cfg, 500).any()
    assert list(np.flatnonzero(prune_mask(cloud, led, cfg, 600))) == [4]


def test_config_validation():
    with pytest.raises(ValueError):
        DensifyConfig(hid_step=0)
    with pytest.raises(ValueError):
        DensifyConfig(trigger="median")
