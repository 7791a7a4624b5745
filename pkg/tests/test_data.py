import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfnet.boxes import Box3D, iou_matrix, normalize_angle, points_in_box
from cvfnet.errors import ConfigurationError, ParseError
from cvfnet.geometry import PointCloud
from cvfnet.data.augment import (IDENTITY_AUGMENTATION, AugmentationConfig, augment, build_gt_bank, flip_y,
                                 gt_sample_injection, rotate_z, scale_scene)
from cvfnet.data.kitti import (SceneSample, load_dataset, load_scene, read_labels, read_manifest,
                               write_labels, write_manifest, write_scene)
from cvfnet.data.synth import SyntheticSceneSpec, scene_seed, synth_generate

# camera -> LiDAR: x_lidar = z_cam, y_lidar = -x_cam, z_lidar = -y_cam, plus an offset
CALIB = np.array([[0, 0, 1, 0.27], [-1, 0, 0, 0.0], [0, -1, 0, -0.08], [0, 0, 0, 1.0]])


def random_boxes(n, seed, with_score=False):
    r = np.random.default_rng(seed)
    return [Box3D(r.uniform(0, 60), r.uniform(-30, 30), r.uniform(-2, 0), r.uniform(0.5, 2), r.uniform(0.5, 5),
                  r.uniform(1, 2), r.uniform(-math.pi, math.pi), class_id=int(r.integers(0, 3)),
                  score=float(r.uniform()) if with_score else None, truncated=0.0, occluded=int(r.integers(0, 3)),
                  bbox2d=(10.0, 20.0, 110.0, 90.0))
            for _ in range(n)]


def assert_boxes_close(a, b, atol=1e-6):
    assert len(a) == len(b)
    for p, q in zip(a, b):
        d = p.as_array() - q.as_array()
        d[6] = normalize_angle(d[6])
        assert np.abs(d).max() < atol
        assert (p.class_id, p.occluded) == (q.class_id, q.occluded)
        if p.score is None:
            assert q.score is None
        else:
            assert q.score == pytest.approx(p.score, abs=1e-6)


# -- loading -----------------------------------------------------------------------

@pytest.mark.parametrize("calib", [None, CALIB])
@pytest.mark.parametrize("with_score", [False, True])
def test_label_roundtrip(tmp_path, calib, with_score):
    boxes = random_boxes(25, 3, with_score)
    write_labels(tmp_path / "l.txt", boxes, calib)
    assert_boxes_close(boxes, read_labels(tmp_path / "l.txt", calib))


def test_camera_frame_conversion_known_box(tmp_path):
    # camera bottom centre (1, 1.5, 20), h = 1.5 -> LiDAR centre (20.27, -1, -1.58 + 0.75)
    (tmp_path / "l.txt").write_text("Car 0.00 0 -1.0 0 0 50 50 1.50 1.60 3.90 1.00 1.50 20.00 0.0\n")
    (b,) = read_labels(tmp_path / "l.txt", CALIB)
    np.testing.assert_allclose([b.x, b.y, b.z], [20.27, -1.0, -1.58 + 0.75], atol=1e-12)
    assert b.yaw == pytest.approx(-math.pi / 2)


def test_empty_label_file(tmp_path):
    (tmp_path / "a.bin").write_bytes(np.zeros((3, 4), "<f4").tobytes())
    (tmp_path / "a.txt").write_text("")
    s = load_scene(tmp_path / "a.bin", tmp_path / "a.txt")
    assert s.gts == [] and len(s.cloud) == 3 and s.scene_id == "a"


def test_sixteen_bytes_is_one_point(tmp_path):
    (tmp_path / "a.bin").write_bytes(np.array([1, 2, 3, 0.5], "<f4").tobytes())
    s = load_scene(tmp_path / "a.bin")
    np.testing.assert_array_equal(s.cloud.points, [[1, 2, 3, 0.5]])


def test_bin_size_must_be_multiple_of_sixteen(tmp_path):
    (tmp_path / "a.bin").write_bytes(b"\0" * 20)
    with pytest.raises(ParseError):
        load_scene(tmp_path / "a.bin")


@pytest.mark.parametrize("bad", ["Car 0 0 0 1 2 3\n", "Car 0 0 0 0 0 1 1 1.5 1.6 3.9 x 1 2 0\n",
                                 "Car 0 0 0 0 0 1 1 1.5 -1.6 3.9 1 1 2 0\n"])
def test_malformed_label_reports_line(tmp_path, bad):
    good = "Car 0.00 0 0 0 0 1 1 1.5 1.6 3.9 1 1 2 0\n"
    (tmp_path / "l.txt").write_text(good + "\n" + bad)
    with pytest.raises(ParseError) as exc:
        read_labels(tmp_path / "l.txt")
    assert exc.value.line == 3


def test_unknown_classes_are_skipped(tmp_path):
    (tmp_path / "l.txt").write_text("DontCare -1 -1 -10 0 0 1 1 -1 -1 -1 -1000 -1000 -1000 -10\n"
                                    "Pedestrian 0.00 0 0 0 0 1 1 1.7 0.6 0.8 1 1 2 0\n")
    (b,) = read_labels(tmp_path / "l.txt")
    assert b.class_id == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 64), st.integers(0, 10_000))
def test_loader_accepts_any_valid_size(tmp_path_factory, n, seed):
    d = tmp_path_factory.mktemp("fuzz")
    pts = np.random.default_rng(seed).standard_normal((n, 4)).astype("<f4")
    (d / "x.bin").write_bytes(pts.tobytes())
    np.testing.assert_array_equal(load_scene(d / "x.bin").cloud.points, pts.astype(np.float64).reshape(-1, 4))


def test_manifest_roundtrip_and_errors(tmp_path):
    write_manifest(tmp_path / "m.txt", [("000000", 0), ("000001", 1)])
    assert read_manifest(tmp_path / "m.txt") == [("000000", 0), ("000001", 1)]
    (tmp_path / "bad.txt").write_text("# header\n000000 0\n000001 one\n")
    with pytest.raises(ParseError) as exc:
        read_manifest(tmp_path / "bad.txt")
    assert exc.value.line == 3


def test_dataset_follows_manifest_order(tmp_path):
    for sid in ("b", "a"):
        write_scene(tmp_path, SceneSample(PointCloud(np.ones((2, 4))), random_boxes(1, 0), sid))
    write_manifest(tmp_path / "manifest.txt", [("b", 0), ("a", 1)])
    assert [s.scene_id for s in load_dataset(tmp_path)] == ["b", "a"]


# -- augmentation --------------------------------------------------------------------

def scene_with_box(seed=0):
    r = np.random.default_rng(seed)
    box = Box3D(10.0, 2.0, -0.8, 1.6, 3.9, 1.56, 0.4)
    inside = r.uniform(-0.45, 0.45, size=(200, 3)) * np.array([box.l, box.w, box.h])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xyz = np.stack([box.x + c * inside[:, 0] - s * inside[:, 1], box.y + s * inside[:, 0] + c * inside[:, 1],
                    box.z + inside[:, 2]], axis=1)
    other = r.uniform(-30, 30, size=(300, 3))
    pts = np.concatenate([np.concatenate([xyz, other]), r.uniform(0, 1, (500, 1))], axis=1)
    return SceneSample(PointCloud(pts), [box], "s")


def test_identity_augmentation_is_noop():
    s = scene_with_box()
    out = augment(s, IDENTITY_AUGMENTATION, np.random.default_rng(0))
    np.testing.assert_array_equal(out.cloud.points, s.cloud.points)
    assert out.gts == s.gts


def test_double_flip_restores_sample():
    s = scene_with_box()
    back = flip_y(flip_y(s))
    np.testing.assert_array_equal(back.cloud.points, s.cloud.points)
    np.testing.assert_allclose(back.gts[0].as_array(), s.gts[0].as_array(), atol=1e-15)


def test_rotation_by_pi_over_six():
    s = SceneSample(PointCloud(np.array([[1.0, 0, 0, 0.3]])), [], "r")
    out = rotate_z(s, math.pi / 6)
    np.testing.assert_allclose(out.cloud.points[0, :3], [math.cos(math.pi / 6), math.sin(math.pi / 6), 0],
                               atol=1e-15)


def test_scale_multiplies_sizes_and_centres():
    s = scene_with_box()
    out = scale_scene(s, 1.05)
    np.testing.assert_allclose(out.gts[0].as_array()[:6], s.gts[0].as_array()[:6] * 1.05)
    assert out.gts[0].yaw == s.gts[0].yaw


def test_augment_order_flip_rotate_scale():
    s = scene_with_box()
    cfg = AugmentationConfig(1.0, (0.97, 0.97), (0.3, 0.3))
    out = augment(s, cfg, np.random.default_rng(0))
    ref = scale_scene(rotate_z(flip_y(s), 0.3), 0.97)
    np.testing.assert_allclose(out.cloud.points, ref.cloud.points, atol=1e-12)
    np.testing.assert_allclose(out.gts[0].as_array(), ref.gts[0].as_array(), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_augmentation_preserves_membership(seed):
    s = scene_with_box(seed % 7)
    before = points_in_box(s.cloud.points, s.gts[0])
    out = augment(s, AugmentationConfig(), np.random.default_rng(seed))
    np.testing.assert_array_equal(points_in_box(out.cloud.points, out.gts[0], eps=1e-6), before)


@pytest.mark.parametrize("kw", [dict(flip_x_prob=1.5), dict(scale_range=(1.1, 0.9)),
                                dict(rotation_range=(1.0, -1.0)), dict(gt_sample_max_per_class=-1)])
def test_augmentation_config_validation(kw):
    with pytest.raises(ConfigurationError):
        AugmentationConfig(**kw)


# -- ground-truth injection ---------------------------------------------------------

def bank_of(n_scenes=6):
    scenes = [synth_generate(SyntheticSceneSpec(seed=i, n_background_points=500)) for i in range(n_scenes)]
    return build_gt_bank(scenes)


def test_injection_empty_bank_unchanged():
    s = scene_with_box()
    out = gt_sample_injection(s, [], AugmentationConfig(gt_sample_max_per_class=3), np.random.default_rng(0))
    assert out is s


def test_injection_into_empty_scene_counts():
    bank = bank_of()
    empty = SceneSample(PointCloud(np.zeros((0, 4))), [], "e")
    out = gt_sample_injection(empty, bank, AugmentationConfig(gt_sample_max_per_class=3), np.random.default_rng(1))
    assert len(out.gts) == 3
    covered = np.zeros(len(out.cloud), dtype=bool)
    for b in out.gts:
        covered |= points_in_box(out.cloud.points, b)
    assert len(out.cloud) > 0 and covered.all()


def test_injected_boxes_never_overlap():
    bank = bank_of()
    cfg = AugmentationConfig(gt_sample_max_per_class=6)
    for seed in range(10):
        s = synth_generate(SyntheticSceneSpec(seed=100 + seed, n_background_points=500))
        out = gt_sample_injection(s, bank, cfg, np.random.default_rng(seed))
        arr = np.stack([b.as_array() for b in out.gts])
        m = iou_matrix(arr, arr)
        n0 = len(s.gts)
        np.fill_diagonal(m, 0.0)
        assert np.all(m[n0:, :] == 0) and np.all(m[:, n0:] == 0)


def test_injection_clears_scene_points_under_new_footprint():
    bank = bank_of()
    base = scene_with_box()
    out = gt_sample_injection(base, bank, AugmentationConfig(gt_sample_max_per_class=4), np.random.default_rng(2))
    orig = {tuple(p) for p in base.cloud.points}
    for b in out.gts[1:]:
        inside = out.cloud.points[points_in_box(out.cloud.points, b)]
        assert all(tuple(p) not in orig for p in inside)


# -- synthetic scenes -----------------------------------------------------------------

def test_synth_zero_objects():
    s = synth_generate(SyntheticSceneSpec(seed=1, object_count=(0, 0), n_background_points=800))
    assert s.gts == [] and len(s.cloud) == 800
    np.testing.assert_array_equal(s.cloud.xyz[:, 2], -1.73)


def test_synth_is_bit_identical_per_seed():
    a = synth_generate(SyntheticSceneSpec(seed=5))
    b = synth_generate(SyntheticSceneSpec(seed=5))
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
    assert a.gts == b.gts
    c = synth_generate(SyntheticSceneSpec(seed=6))
    assert c.cloud.points.tobytes() != a.cloud.points.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_synth_object_points_contained(seed):
    s = synth_generate(SyntheticSceneSpec(seed=seed, class_mix={"Car": 1.0, "Pedestrian": 0.5, "Cyclist": 0.5}))
    assert len(s.gts) >= 2
    above_ground = s.cloud.xyz[:, 2] > -1.73 + 1e-9
    covered = np.zeros(len(s.cloud), dtype=bool)
    for b in s.gts:
        m = points_in_box(s.cloud.points, b)
        assert m.sum() >= 30
        covered |= m
    # every non-ground return belongs to some box
    assert np.all(covered[above_ground])


def test_synth_boxes_respect_clearance():
    s = synth_generate(SyntheticSceneSpec(seed=3, object_count=(5, 5)))
    arr = np.stack([b.as_array() for b in s.gts])
    m = iou_matrix(arr, arr)
    np.fill_diagonal(m, 0.0)
    assert m.max() == 0


def test_scene_seed_is_xor():
    assert scene_seed(0, 5) == 5
    assert scene_seed(12, 5) == 12 ^ 5


def test_synth_spec_validation():
    with pytest.raises(ConfigurationError):
        SyntheticSceneSpec(object_count=(3, 1))
    with pytest.raises(ConfigurationError):
        SyntheticSceneSpec(class_mix={"Truck": 1.0})
