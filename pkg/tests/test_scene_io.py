import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2pdet import geom3d
from v2pdet.scene_io import (KITTI_BOUNDS, Calibration, EmptySceneError, FormatError, GroundTruth,
                             LabelRecord, PointCloud, SceneBounds, SynthSpec, augment, crop_to_bounds,
                             format_kitti_labels, load_kitti_bin, parse_kitti_labels, read_dataset,
                             synth_dataset, synth_scene, write_kitti_bin, write_scene)


def test_bounds_validation():
    with pytest.raises(ValueError):
        SceneBounds(1, 0, 0, 1, 0, 1)
    with pytest.raises(ValueError):
        SceneBounds(0, float("inf"), 0, 1, 0, 1)


def test_load_kitti_bin_examples(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(np.array([1, 2, 3, 0.5, 4, 5, 6, 0.1], dtype="<f4").tobytes())
    pc = load_kitti_bin(p)
    assert np.allclose(pc.points, [[1, 2, 3, 0.5], [4, 5, 6, 0.1]])
    (tmp_path / "e.bin").write_bytes(b"")
    assert len(load_kitti_bin(tmp_path / "e.bin")) == 0
    (tmp_path / "t.bin").write_bytes(b"\0" * 20)
    with pytest.raises(FormatError, match="byte offset 16"):
        load_kitti_bin(tmp_path / "t.bin")


def test_bin_roundtrip_float32(tmp_path, rng):
    pts = rng.normal(size=(50, 4)) * 20
    write_kitti_bin(tmp_path / "x.bin", PointCloud(pts))
    back = load_kitti_bin(tmp_path / "x.bin").points
    assert np.array_equal(back, pts.astype(np.float32).astype(np.float64))


def test_crop_half_open():
    pts = np.array([[70.39, 0, 0, 0], [70.4, 0, 0, 0], [10, -41, 0, 0], [0, -40, -3, 0]])
    out = crop_to_bounds(PointCloud(pts), KITTI_BOUNDS).points
    assert np.array_equal(out, pts[[0, 3]])


def test_synth_examples():
    spec = SynthSpec(num_boxes=1, points_per_box=100, background_points=0, seed=7)
    pc, gt = synth_scene(spec)
    assert len(pc) == 100 and len(gt) == 1
    assert geom3d.points_in_box(gt.boxes[0], pc.xyz).all()
    pc2, gt2 = synth_scene(spec)
    assert np.array_equal(pc.points, pc2.points) and np.array_equal(gt.boxes, gt2.boxes)
    pc0, gt0 = synth_scene(SynthSpec(num_boxes=0, background_points=50, seed=1))
    assert len(gt0) == 0 and len(pc0) == 50
    with pytest.raises(EmptySceneError):
        synth_scene(SynthSpec(num_boxes=0, background_points=0))


def test_synth_boxes_do_not_overlap():
    for pc, gt in synth_dataset(SynthSpec(num_boxes=6, num_scenes=4, seed=3)):
        m = geom3d.iou_bev_matrix(gt.boxes, gt.boxes)
        assert np.allclose(m - np.diag(np.diag(m)), 0)
        assert np.all(gt.boxes[:, 6] > -np.pi) and np.all(gt.boxes[:, 6] <= np.pi)


def test_synth_dataset_deterministic():
    a = synth_dataset(SynthSpec(num_scenes=3, seed=11))
    b = synth_dataset(SynthSpec(num_scenes=3, seed=11))
    assert all(np.array_equal(x[0].points, y[0].points) for x, y in zip(a, b))
    assert not np.array_equal(a[0][0].points, a[1][0].points)


def test_augment_examples():
    pc = PointCloud(np.array([[1.0, 2.0, 3.0, 0.2]]))
    gt = GroundTruth(np.array([[1, 2, 3, 4, 2, 1, 0.5]]), [0])
    fp, fg = augment(pc, gt, "flip")
    assert np.allclose(fp.points[0, :3], [1, -2, 3]) and fg.boxes[0, 6] == pytest.approx(-0.5)
    sp, sg = augment(pc, gt, "scale", value=1.0)
    assert np.array_equal(sp.points, pc.points) and np.array_equal(sg.boxes, gt.boxes)
    rp, rg = augment(PointCloud(np.array([[1.0, 0, 0, 0]])), GroundTruth(np.array([[0, 0, 0, 1, 1, 1, 3.0]]), [0]),
                     "rotate", value=np.pi / 2, rot_range=(-np.pi / 2, np.pi / 2))
    assert np.allclose(rp.points[0, :3], [0, 1, 0], atol=1e-12)
    assert rg.boxes[0, 6] == pytest.approx(geom3d.wrap_angle(3.0 + np.pi / 2))
    with pytest.raises(ValueError):
        augment(pc, gt, "scale", value=2.0)
    with pytest.raises(ValueError):
        augment(pc, gt, "shear")


@given(st.sampled_from(["flip", "scale", "rotate"]), st.integers(0, 1000))
def test_augment_preserves_membership(mode, seed):
    rng = np.random.default_rng(seed)
    pc, gt = synth_scene(SynthSpec(num_boxes=2, points_per_box=60, background_points=60, seed=seed))
    before = geom3d.points_in_boxes(gt.boxes, pc.xyz).sum(axis=0)
    ap, ag = augment(pc, gt, mode, rng)
    after = geom3d.points_in_boxes(ag.boxes, ap.xyz).sum(axis=0)
    assert np.array_equal(before, after)


def test_label_roundtrip_default_calibration(rng):
    boxes = np.c_[rng.uniform(0, 50, 5), rng.uniform(-20, 20, 5), rng.uniform(-2, 0, 5),
                  rng.uniform(3, 5, 5), rng.uniform(1.4, 2, 5), rng.uniform(1.3, 1.8, 5),
                  rng.uniform(-3, 3, 5)]
    recs = [LabelRecord("Car", b, float(s)) for b, s in zip(boxes, rng.random(5))]
    text = format_kitti_labels(recs)
    back = parse_kitti_labels(text)
    assert [r.cls_name for r in back] == ["Car"] * 5
    got = np.array([r.box for r in back])
    assert np.allclose(got, boxes, atol=1e-12)
    assert [r.score for r in back] == [r.score for r in recs]
    # the text itself is a fixed point of parse/format
    assert format_kitti_labels(parse_kitti_labels(text)) == format_kitti_labels(back)


def test_label_parse_known_line():
    # camera frame: x right, y down, z forward; location is the bottom center
    line = "Car 0.00 0 -1.58 587.0 173.3 614.1 200.1 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n"
    rec = parse_kitti_labels(line)[0]
    x, y, z, l, w, h, yaw = rec.box
    assert (x, y) == pytest.approx((46.70, 0.65))
    assert z == pytest.approx(-1.71 + 1.65 / 2)
    assert (l, w, h) == pytest.approx((3.64, 1.67, 1.65))
    assert yaw == pytest.approx(1.59 - np.pi / 2)
    assert parse_kitti_labels("DontCare -1 -1 -10 1 1 1 1 -1 -1 -1 -1000 -1000 -1000 -10\n") == []
    with pytest.raises(FormatError):
        parse_kitti_labels("Car 1 2 3\n")


def test_calibration_file(tmp_path):
    calib = tmp_path / "c.txt"
    calib.write_text("R0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n")
    c = Calibration.from_file(calib)
    assert np.allclose(c.velo_to_cam, Calibration().velo_to_cam)


def test_dataset_dir_roundtrip(tmp_path):
    scenes = synth_dataset(SynthSpec(num_scenes=2, seed=4))
    for i, (pc, gt) in enumerate(scenes):
        write_scene(tmp_path, f"{i:06d}", pc, gt, ["Car"])
    back = read_dataset(tmp_path, ["Car"])
    assert [fid for fid, _, _ in back] == ["000000", "000001"]
    for (pc, gt), (_, pc2, gt2) in zip(scenes, back):
        assert np.array_equal(pc2.points, pc.points.astype(np.float32).astype(np.float64))
        assert np.allclose(gt2.boxes, gt.boxes, atol=1e-12)
