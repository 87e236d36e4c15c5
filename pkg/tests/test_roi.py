import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2pdet import geom3d
from v2pdet.autodiff import Tensor, check_gradients
from v2pdet.backbone import BevMap
from v2pdet.config import RoiConfig
from v2pdet.roi import (RoiHead, SceneFeatures, align_iou, bev_coords, bilinear_taps, corner_embed,
                        crop_points, final_nms, fuse_and_predict, make_grid, map_roi_align,
                        point_roi_align, refine_losses, refine_targets)
from v2pdet.scene_io import KITTI_BOUNDS, SceneBounds
from v2pdet.voxelizer import VoxelGridSpec

SPEC = VoxelGridSpec((0.4, 0.4, 0.5), SceneBounds(0, 12.8, -6.4, 6.4, -3, 1)).at_stride(8)
TINY = RoiConfig(grid_size=2, nsample=4, mlp1=(4,), mlp2=(4,), mlp3=(4,), point_channels=4, map_channels=3,
                 corner_channels=4, corner_lift=3, shared_fc=(6,), corner_fc=(5,), branch_fc=(4,))
BOX = np.array([5.0, 0.5, -1.0, 3.0, 1.6, 1.5, 0.4])


def make_scene(rng, n=40, c_point=5, requires_grad=False):
    H, W, _ = SPEC.grid_shape
    xyz = geom3d.decanonicalize(BOX, rng.uniform(-0.6, 0.6, (n, 3)) * BOX[3:6])
    return SceneFeatures(xyz, Tensor(rng.normal(size=(n, c_point)), requires_grad=requires_grad),
                         Tensor(rng.uniform(0.1, 0.9, n), requires_grad=requires_grad),
                         BevMap(Tensor(rng.normal(size=(H, W, 3)), requires_grad=requires_grad), SPEC))


def randomize_biases(head, rng):
    for _, p in head.named_parameters():
        if p.data.ndim == 1:
            p.data[:] = rng.normal(size=p.data.shape) * 0.3


# ---------------------------------------------------------------------------
# grid points

def test_make_grid_examples():
    assert np.allclose(make_grid(BOX, 1, world=True), [BOX[:3]])
    g = make_grid(np.array([0, 0, 0, 2, 2, 2, 0.0]), 2, world=True)
    assert sorted(map(tuple, g)) == sorted((x, y, z) for x in (-.5, .5) for y in (-.5, .5) for z in (-.5, .5))
    assert make_grid(BOX, 6).shape == (216, 3)


@given(st.integers(1, 7), st.floats(-np.pi, np.pi))
def test_grid_inside_and_symmetric(n, yaw):
    box = np.array([1.0, -2.0, 0.5, 3.0, 1.2, 0.9, yaw])
    g = make_grid(box, n, world=True)
    assert geom3d.points_in_box(box, g).all()
    assert np.allclose(g.mean(axis=0), box[:3], atol=1e-12)


# ---------------------------------------------------------------------------
# cropping

def test_crop_rigid_invariance_and_margin_monotone(rng):
    scene = make_scene(rng, 60)
    crop = crop_points(BOX[None], scene.xyz, 0.5)
    rot, t = 0.9, np.array([2.0, -1.0, 0.3])
    c, s = np.cos(rot), np.sin(rot)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    moved = BOX.copy()
    moved[:3] = R @ BOX[:3] + t
    moved[6] = geom3d.wrap_angle(BOX[6] + rot)
    crop2 = crop_points(moved[None], scene.xyz @ R.T + t, 0.5)
    assert np.array_equal(crop.rows, crop2.rows)
    assert np.allclose(crop.local, crop2.local, atol=1e-9)
    counts = [crop_points(BOX[None], scene.xyz, m).counts[0] for m in (0.0, 0.1, 0.4, 1.6)]
    assert counts == sorted(counts)


# ---------------------------------------------------------------------------
# point stream

def test_point_stream_empty_proposal_is_zero(rng):
    head = RoiHead(TINY, 5, 3, rng)
    scene = make_scene(rng)
    far = BOX.copy()
    far[0] = 11.0
    H = point_roi_align(far, scene, head)
    assert H.shape == (8, 4) and np.all(H.data == 0)
    assert head(scene, far[None]).low_evidence.tolist() == [True]


def test_point_coincident_with_grid_point_has_zero_offset(rng):
    head = RoiHead(TINY, 5, 3, rng)
    g = make_grid(BOX, 2, world=True)[0]
    crop = crop_points(BOX[None], g[None], head.margin)
    assert np.allclose(crop.local[0], make_grid(BOX, 2)[0], atol=1e-12)


def test_point_stream_gradients(rng):
    head = RoiHead(TINY, 5, 3, rng)
    randomize_biases(head, rng)
    scene = make_scene(rng, 25, requires_grad=True)
    boxes = np.stack([BOX, BOX + [0.3, -0.2, 0, 0, 0, 0, 0.2]])
    w = rng.normal(size=(16, 4))
    fn = lambda: (point_roi_align(boxes, scene, head) * Tensor(w)).sum()
    params = [p for n, p in head.named_parameters() if n.startswith("mlp")] + [scene.p0, scene.seg]
    assert check_gradients(fn, params, rng=rng) < 1e-6


# ---------------------------------------------------------------------------
# map stream

def test_bev_projection_arithmetic():
    kitti = VoxelGridSpec((0.05, 0.05, 0.1), KITTI_BOUNDS).at_stride(8)
    assert np.allclose(bev_coords(np.array([[0.6, -40.0]]), kitti), [[1.5, 0.0]])


def test_bilinear_identity_and_mean(rng):
    feats = rng.normal(size=(4, 5, 2))
    flat = feats.reshape(20, 2)
    idx, w = bilinear_taps(np.array([[2.0, 3.0], [1.5, 2.5], [-3.0, 9.0]]), 4, 5)
    vals = (flat[idx] * w[..., None]).sum(1)
    assert np.allclose(vals[0], feats[2, 3])
    assert np.allclose(vals[1], feats[1:3, 2:4].reshape(4, 2).mean(0))
    assert np.allclose(vals[2], feats[0, 4])
    assert np.allclose(w.sum(1), 1)


def test_map_stream_gradients(rng):
    head = RoiHead(TINY, 5, 3, rng)
    scene = make_scene(rng, requires_grad=True)
    w = rng.normal(size=(8, 3))
    fn = lambda: (map_roi_align(BOX, scene.bev, head) * Tensor(w)).sum()
    assert check_gradients(fn, [scene.bev.features], rng=rng) < 1e-6


# ---------------------------------------------------------------------------
# corner embedding

def test_corner_embed_bias_only(rng):
    head = RoiHead(TINY, 5, 3, rng)
    head.corner_agg.weight.data[:] = 0
    head.corner_agg.bias.data[:] = [1, 2, 3, 4]
    out = corner_embed(np.stack([BOX, BOX * 1.1]), head).data
    assert np.allclose(out, [[1, 2, 3, 4]] * 2)
    full = RoiHead(RoiConfig(grid_size=1, mlp1=(4,), mlp2=(4,), mlp3=(4,), shared_fc=(4,), corner_fc=(4,),
                             branch_fc=(4,), map_channels=3), 5, 3, rng)
    assert corner_embed(BOX, full).shape == (1, 128)


def test_corner_embed_gradients(rng):
    head = RoiHead(TINY, 5, 3, rng)
    randomize_biases(head, rng)
    w = rng.normal(size=(2, 4))
    boxes = np.stack([BOX, BOX + 0.5])
    fn = lambda: (corner_embed(boxes, head) * Tensor(w)).sum()
    assert check_gradients(fn, [head.corner_lift.weight, head.corner_lift.bias, head.corner_agg.weight]) < 1e-6


# ---------------------------------------------------------------------------
# fusion and heads

def test_end_to_end_gradients(rng):
    head = RoiHead(TINY, 5, 3, rng)
    randomize_biases(head, rng)
    scene = make_scene(rng, 20, requires_grad=True)
    boxes = np.stack([BOX, BOX + [0.2, 0.1, 0, 0, 0, 0, -0.3]])
    wr = rng.normal(size=(2, 8))

    def fn():
        ref = head(scene, boxes)
        return ref.cls_logit.sum() + (ref.reg * Tensor(wr)).sum() + ref.iou.sum() * 2.0
    params = [p for _, p in head.named_parameters()] + [scene.p0, scene.seg, scene.bev.features]
    assert check_gradients(fn, params, rng=rng) < 1e-6


def test_zero_residual_keeps_proposal_and_streams_switch_off(rng):
    cfg = copy.deepcopy(TINY)
    cfg.use_point = False
    head = RoiHead(cfg, 5, 3, rng)
    scene = make_scene(rng)
    ref = head(scene, BOX[None])
    assert ref.reg.shape == (1, 8)
    H = Tensor(np.zeros((8, 4)))
    M = map_roi_align(BOX, scene.bev, head)
    B = corner_embed(BOX, head)
    manual = fuse_and_predict(H, M, B, head, BOX)
    assert np.allclose(manual.iou.data, ref.iou.data)
    ref.reg.data[:] = [0, 0, 0, 0, 0, 0, 0, 1]
    assert np.allclose(head.refine_boxes(ref), BOX[None], atol=1e-12)


def test_align_iou_fixed_point_read_only_and_tags(rng):
    head = RoiHead(TINY, 5, 3, rng)
    scene = make_scene(rng)
    before = {n: p.data.copy() for n, p in head.named_parameters()}
    first = head(scene, BOX[None])
    first_iou = first.iou.data.copy()
    second = align_iou(head, scene, first.boxes)
    assert second.iou.data[0] == first_iou[0]
    assert (first.pass_tag, second.pass_tag) == ("first", "aligned")
    assert all(np.array_equal(p.data, before[n]) for n, p in head.named_parameters())
    assert np.array_equal(first.iou.data, first_iou)


# ---------------------------------------------------------------------------
# targets and masked losses

def test_refine_targets_examples():
    gt = BOX[None]
    t = refine_targets(gt, [0], gt, [0])
    assert t.cls_label.tolist() == [1] and t.iou[0] == pytest.approx(1.0)
    assert np.allclose(t.reg_target[0], [0, 0, 0, 0, 0, 0, 0, 1])
    shifted = BOX.copy()
    while geom3d.iou_3d(shifted, BOX) > 0.4:
        shifted[0] += 0.01
    t = refine_targets(shifted[None], [0], gt, [0])
    assert t.cls_label.tolist() == [-1] and not t.reg_mask[0]
    t = refine_targets(np.stack([BOX, shifted]), [0, 0], np.zeros((0, 7)), [])
    assert t.cls_label.tolist() == [0, 0] and not t.reg_mask.any()


def _box_with_iou(target):
    """Shift BOX along x until its IoU with BOX drops to ``target``."""
    lo, hi = 0.0, BOX[3]
    for _ in range(80):
        mid = (lo + hi) / 2
        b = BOX.copy()
        b[0] += mid * np.cos(BOX[6])
        b[1] += mid * np.sin(BOX[6])
        lo, hi = (mid, hi) if geom3d.iou_3d(b, BOX) > target else (lo, mid)
    return b


def test_regression_mask_half_pass(rng):
    props = np.stack([_box_with_iou(v) for v in (0.9, 0.6, 0.5, 0.3)])
    t = refine_targets(props, [0] * 4, BOX[None], [0], reg_thresh=0.55)
    assert t.reg_mask.tolist() == [True, True, False, False]
    reg = Tensor(rng.normal(size=(4, 8)))
    iou = Tensor(rng.uniform(0, 1, 4))
    from v2pdet.roi import Refinement
    ref = Refinement(props, Tensor(rng.normal(size=4)), reg, iou, "first", np.zeros(4, bool))
    _, l_reg, l_iou = refine_losses(ref, t)

    def sl1(d):
        d = np.abs(d)
        return np.where(d < 1, 0.5 * d * d, d - 0.5)
    assert l_reg.data == pytest.approx(sl1(reg.data[:2] - t.reg_target[:2]).sum() / 2, abs=1e-12)
    assert l_iou.data == pytest.approx(sl1(iou.data[:2] - t.iou[:2]).sum() / 2, abs=1e-12)
    none = refine_targets(props[2:], [0, 0], BOX[None], [0])
    ref2 = Refinement(props[2:], Tensor(np.zeros(2)), Tensor(np.zeros((2, 8))), Tensor(np.zeros(2)), "first", None)
    _, r0, i0 = refine_losses(ref2, none)
    assert r0.data == 0.0 and i0.data == 0.0


# ---------------------------------------------------------------------------
# final NMS

def test_final_nms_modes():
    one = final_nms(BOX[None], [0], [0.3], [0.2], [0.9], "aligned-iou")
    assert one[0].tolist() == [0]
    a = BOX.copy()
    b = BOX.copy()
    b[0] += 0.2
    boxes = np.stack([a, b])
    cls, un, al = np.array([0.9, 0.6]), np.array([0.5, 0.5]), np.array([0.4, 0.8])
    assert final_nms(boxes, [0, 0], cls, un, al, "cls")[0].tolist() == [0]
    assert final_nms(boxes, [0, 0], cls, un, al, "aligned-iou")[0].tolist() == [1]
    keep, conf = final_nms(boxes, [0, 0], cls, un, al, "aligned-iou-x-cls")
    assert keep.tolist() == [1] and conf[0] == pytest.approx(0.48)
    # different classes never suppress each other
    assert sorted(final_nms(boxes, [0, 1], cls, un, al, "cls")[0].tolist()) == [0, 1]
    with pytest.raises(ValueError):
        final_nms(boxes, [0, 0], cls, un, al, "bogus")
