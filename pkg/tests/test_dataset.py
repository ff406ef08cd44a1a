import math

import numpy as np
import pytest

from fruitsplat.colmap import CameraIntrinsics, CameraModel, ModelFormat, SparsePoint, write_colmap_model
from fruitsplat.dataset import (
    SyntheticSceneSpec,
    TrainingSample,
    generate_synthetic_scene,
    load_dataset,
    read_mask,
    synthetic_cameras,
    write_image,
    write_mask,
)
from fruitsplat.rasterizer import render
from helpers import identity_frame

SMALL = dict(n_gaussians=80, n_cameras=3, image_size=24, n_background=16)


def _tree(tmp_path, n=3, size=(6, 4)):
    w, h = size
    intr = CameraIntrinsics(CameraModel.PINHOLE, w, h, 5.0, 5.0, w / 2, h / 2)
    from fruitsplat.colmap import CameraFrame

    frames = [CameraFrame(i + 1, intr, (1.0, 0, 0, 0), (0, 0, 0), f"im{i}.png") for i in range(n)]
    write_colmap_model(frames[::-1], [SparsePoint((0, 0, 1), (1, 2, 3))], tmp_path / "sparse", ModelFormat.TEXT)
    (tmp_path / "images").mkdir()
    rng = np.random.default_rng(0)
    for f in frames:
        write_image(tmp_path / "images" / f.image_name, rng.uniform(size=(h, w, 3)))
    return frames


def test_load_without_masks(tmp_path):
    _tree(tmp_path)
    samples = load_dataset(tmp_path / "sparse", tmp_path / "images")
    assert [s.frame.frame_id for s in samples] == [1, 2, 3]
    assert all(s.strawberry_mask is None and s.bruise_mask is None for s in samples)
    assert samples[0].image.shape == (4, 6, 3)
    assert 0.0 <= samples[0].image.min() and samples[0].image.max() <= 1.0


def test_mask_threshold(tmp_path):
    frames = _tree(tmp_path)
    (tmp_path / "s").mkdir()
    (tmp_path / "b").mkdir()
    for f in frames:
        write_mask(tmp_path / "s" / f.image_name, np.ones((4, 6)))
        write_mask(tmp_path / "b" / f.image_name, np.zeros((4, 6)))
    samples = load_dataset(tmp_path / "sparse", tmp_path / "images", tmp_path / "s", tmp_path / "b")
    assert all(s.strawberry_mask.all() and not s.bruise_mask.any() for s in samples)


def test_gray_levels_split_at_127(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[127, 128, 0, 255]], dtype=np.uint8), mode="L").save(tmp_path / "m.png")
    assert read_mask(tmp_path / "m.png").tolist() == [[0, 1, 0, 1]]


def test_wrong_mask_resolution_reports_sizes(tmp_path):
    frames = _tree(tmp_path)
    (tmp_path / "s").mkdir()
    for f in frames:
        write_mask(tmp_path / "s" / f.image_name, np.ones((5, 6)))
    with pytest.raises(ValueError, match=r"6x5.*6x4"):
        load_dataset(tmp_path / "sparse", tmp_path / "images", tmp_path / "s")


def test_missing_image_names_frame(tmp_path):
    _tree(tmp_path)
    (tmp_path / "images" / "im1.png").unlink()
    with pytest.raises(FileNotFoundError, match="frame 2"):
        load_dataset(tmp_path / "sparse", tmp_path / "images")


def test_missing_image_dir(tmp_path):
    _tree(tmp_path)
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_dataset(tmp_path / "sparse", tmp_path / "nowhere")


def test_load_is_repeatable(tmp_path):
    _tree(tmp_path)
    a = load_dataset(tmp_path / "sparse", tmp_path / "images")
    b = load_dataset(tmp_path / "sparse", tmp_path / "images", threads=4)
    assert all(np.array_equal(x.image, y.image) and x.frame == y.frame for x, y in zip(a, b))


def test_sample_invariants():
    frame = identity_frame(8)
    img = np.zeros((8, 8, 3))
    with pytest.raises(ValueError, match="without a strawberry mask"):
        TrainingSample(frame, img, None, np.zeros((8, 8)))
    with pytest.raises(ValueError):
        TrainingSample(frame, np.zeros((8, 7, 3)))
    s = TrainingSample(frame, img, np.ones((8, 8)), np.zeros((8, 8)))
    assert s.without_masks().strawberry_mask is None
    with pytest.raises(ValueError):
        s.image[0, 0, 0] = 1.0


def test_spec_invariants():
    for bad in (dict(n_cameras=1), dict(n_gaussians=0), dict(bruise_patch_angle=0.0),
                dict(bruise_patch_angle=math.pi), dict(bruise_patch_center=(1.0, 1.0, 0.0))):
        with pytest.raises(ValueError):
            SyntheticSceneSpec(**bad)


def test_tiny_patch_has_no_bruise():
    spec = SyntheticSceneSpec(bruise_patch_angle=1e-9, **SMALL)
    cloud, samples, truth = generate_synthetic_scene(spec)
    assert truth["bruise_fraction"] == 0.0
    assert not any(s.bruise_mask.any() for s in samples)


def test_hemisphere_fraction_matches_enumeration():
    spec = SyntheticSceneSpec(bruise_patch_angle=math.pi / 2, **SMALL)
    cloud, _, truth = generate_synthetic_scene(spec)
    fruit = cloud.s_logits > 0
    bruised = (cloud.b_logits > 0) & fruit
    assert truth["bruise_fraction"] == bruised.sum() / fruit.sum()
    assert truth["strawberry_count"] == spec.n_gaussians == fruit.sum()
    assert abs(truth["bruise_fraction"] - 0.5) < 0.05


def test_fraction_helper_tracks_cap_area():
    for f in (0.1, 0.25, 0.4):
        angle = SyntheticSceneSpec.angle_for_fraction(f)
        spec = SyntheticSceneSpec(**{**SMALL, "n_gaussians": 400, "bruise_patch_angle": angle})
        _, _, truth = generate_synthetic_scene(spec)
        assert abs(truth["bruise_fraction"] - f) < 0.02


def test_synthetic_scene_deterministic():
    a = generate_synthetic_scene(SyntheticSceneSpec(**SMALL))
    b = generate_synthetic_scene(SyntheticSceneSpec(**SMALL))
    for name in ("means", "colors", "b_logits"):
        assert np.array_equal(getattr(a[0], name), getattr(b[0], name))
    for x, y in zip(a[1], b[1]):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.bruise_mask, y.bruise_mask)


def test_masks_consistent_with_gt_render():
    cloud, samples, _ = generate_synthetic_scene(SyntheticSceneSpec(**SMALL))
    for s in samples:
        out = render(cloud, s.frame)
        assert np.array_equal(s.strawberry_mask, (out.strawberry >= 0.5).astype(np.uint8))
        assert np.array_equal(s.bruise_mask, (out.bruise >= 0.5).astype(np.uint8))
        assert np.all(s.bruise_mask <= s.strawberry_mask)


def test_cameras_look_at_origin():
    spec = SyntheticSceneSpec(n_cameras=5)
    for f in synthetic_cameras(spec):
        assert np.linalg.norm(f.camera_center()) == pytest.approx(spec.camera_radius)
        cam = f.rotation_matrix() @ np.zeros(3) + np.asarray(f.translation)
        assert cam[:2] == pytest.approx([0.0, 0.0], abs=1e-12) and cam[2] > 0
