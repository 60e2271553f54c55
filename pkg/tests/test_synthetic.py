import numpy as np
import pytest

from stegosplat.losses import psnr
from stegosplat.rasterizer import RasterSettings, render
from stegosplat.synthetic import SyntheticSpec, load_dataset, make_scene, read_ppm, save_dataset, write_ppm


@pytest.fixture(scope="module")
def scene():
    return make_scene(SyntheticSpec(n_cameras=4, resolution=32))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(resolution=8)
    with pytest.raises(ValueError):
        SyntheticSpec(hidden_center=(5.0, 0.0, 0.1))
    with pytest.raises(ValueError):
        SyntheticSpec(n_cameras=0)


def test_scene_shapes(scene):
    assert len(scene.cameras) == len(scene.original_images) == len(scene.hidden_images) == 4
    assert scene.original_images[0].shape == (32, 32, 3)
    assert len(scene.anchors) >= 100 and scene.anchors.k == 10
    for cam in scene.cameras:
        cam.validate()
    for img in scene.hidden_images:
        assert img.max() > 0.2  # the object is in view
    lo, hi = scene.hidden_box
    assert np.all(lo < hi)
    assert np.all(scene.hidden_ref.means >= lo) and np.all(scene.hidden_ref.means <= hi)


def test_deterministic(scene):
    again = make_scene(SyntheticSpec(n_cameras=4, resolution=32))
    assert all(np.array_equal(a, b) for a, b in zip(scene.original_images, again.original_images))
    assert np.array_equal(scene.anchors.offsets, again.anchors.offsets)
    other = make_scene(SyntheticSpec(n_cameras=4, resolution=32, seed=5))
    assert not np.array_equal(scene.anchors.offsets, other.anchors.offsets)


def test_reference_rerender_consistent(scene):
    cam = scene.cameras[1]
    again = render(scene.hidden_ref.gaussians(), cam, RasterSettings(background=scene.spec.hidden_background))
    assert psnr(again.image, scene.hidden_images[1]) >= 45


def test_hidden_object_overlaps_original_cloud(scene):
    lo, hi = scene.hidden_box
    near = np.all((scene.anchors.positions > lo - 0.2) & (scene.anchors.positions < hi + 0.2), axis=1)
    assert near.any()


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.allclose(read_ppm(tmp_path / "a.ppm"), img)


def test_dataset_round_trip(tmp_path, scene):
    root = save_dataset(scene, tmp_path / "ds")
    assert (root / "manifest.json").exists() and len(list((root / "original").glob("*.ppm"))) == 4
    back = load_dataset(root)
    assert all(np.array_equal(a, b) for a, b in zip(back.hidden_images, scene.hidden_images))
