"""Anchor-based region proposals on the BEV map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom3d
from .autodiff import Linear, Module, Tensor, gather_rows, matmul, relu
from .autodiff.nn import kaiming_uniform
from .backbone import BevMap

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


# ---------------------------------------------------------------------------
# residual box encoding

def _angle_feats(theta, period):
    a = 2 * np.pi * np.asarray(theta) / period
    return np.sin(a), np.cos(a)


def encode_box(gt, anchor, period=2 * np.pi, box_frame=False) -> np.ndarray:
    """Residual of ``gt`` against ``anchor`` (both ``(..., 7)``) as an 8-vector.

    Centers are normalized by the anchor's BEV diagonal (z by its height),
    sizes by log ratio.  The heading is ``(sin, cos)`` of the absolute yaw.
    With ``box_frame`` the center offset is expressed in the anchor's own
    axes and the heading is taken relative to the anchor's yaw, which makes
    the residual invariant to rigid motions of the pair.
    """
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(gt[..., 3:6] <= 0) or np.any(anchor[..., 3:6] <= 0):
        raise ValueError("box sizes must be positive for encoding")
    diag = np.hypot(anchor[..., 3], anchor[..., 4])
    dx = gt[..., 0] - anchor[..., 0]
    dy = gt[..., 1] - anchor[..., 1]
    theta = gt[..., 6]
    if box_frame:
        c, s = np.cos(anchor[..., 6]), np.sin(anchor[..., 6])
        dx, dy = c * dx + s * dy, -s * dx + c * dy
        theta = theta - anchor[..., 6]
    sn, cs = _angle_feats(theta, period)
    return np.stack([
        dx / diag,
        dy / diag,
        (gt[..., 2] - anchor[..., 2]) / anchor[..., 5],
        np.log(gt[..., 3] / anchor[..., 3]),
        np.log(gt[..., 4] / anchor[..., 4]),
        np.log(gt[..., 5] / anchor[..., 5]),
        sn, cs,
    ], axis=-1)


def decode_box(deltas, anchor, period=2 * np.pi, box_frame=False) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    diag = np.hypot(anchor[..., 3], anchor[..., 4])
    theta = np.arctan2(deltas[..., 6], deltas[..., 7]) * period / (2 * np.pi)
    dx = deltas[..., 0] * diag
    dy = deltas[..., 1] * diag
    if box_frame:
        c, s = np.cos(anchor[..., 6]), np.sin(anchor[..., 6])
        dx, dy = c * dx - s * dy, s * dx + c * dy
        theta = theta + anchor[..., 6]
    return np.stack([
        dx + anchor[..., 0],
        dy + anchor[..., 1],
        deltas[..., 2] * anchor[..., 5] + anchor[..., 2],
        np.exp(np.clip(deltas[..., 3], -10, 10)) * anchor[..., 3],
        np.exp(np.clip(deltas[..., 4], -10, 10)) * anchor[..., 4],
        np.exp(np.clip(deltas[..., 5], -10, 10)) * anchor[..., 5],
        geom3d.wrap_angle(theta),
    ], axis=-1)


# ---------------------------------------------------------------------------
# anchors

@dataclass
class AnchorGrid:
    """Anchors in (cell, class, rotation) order: ``boxes`` (H*W*A, 7), ``class_ids`` (H*W*A,)."""
    boxes: np.ndarray
    class_ids: np.ndarray
    per_cell: int
    map_shape: tuple


def make_anchors(spec, map_shape, classes, sizes: dict, z_centers: dict, rotations) -> AnchorGrid:
    H, W = map_shape[:2]
    step = np.asarray(spec.voxel_size) * spec.stride
    xs = (np.arange(H) + 0.5) * step[0] + spec.bounds.x_min
    ys = (np.arange(W) + 0.5) * step[1] + spec.bounds.y_min
    cx, cy = np.meshgrid(xs, ys, indexing="ij")
    per_cell = []
    cids = []
    for ci, name in enumerate(classes):
        l, w, h = sizes[name]
        for rot in rotations:
            per_cell.append([l, w, h, z_centers[name], rot])
            cids.append(ci)
    per_cell = np.array(per_cell)
    A = len(per_cell)
    boxes = np.zeros((H, W, A, 7))
    boxes[..., 0] = cx[..., None]
    boxes[..., 1] = cy[..., None]
    boxes[..., 2] = per_cell[:, 3]
    boxes[..., 3:6] = per_cell[:, 0:3]
    boxes[..., 6] = per_cell[:, 4]
    cls = np.broadcast_to(np.array(cids), (H, W, A))
    return AnchorGrid(boxes.reshape(-1, 7), cls.reshape(-1).copy(), A, (H, W))


# ---------------------------------------------------------------------------
# heads

def _conv3x3_table(H: int, W: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cols = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ni, nj = ii + di, jj + dj
            ok = (ni >= 0) & (ni < H) & (nj >= 0) & (nj < W)
            cols.append(np.where(ok, ni * W + nj, -1).reshape(-1))
    return np.stack(cols, axis=1)


class RpnHead(Module):
    """Shared same-padded 3x3 conv, then 1x1 objectness and box-residual heads."""

    def __init__(self, c_in: int, c_hidden: int, anchors_per_cell: int, rng: np.random.Generator):
        self.c_in, self.A = c_in, anchors_per_cell
        self.conv_w = Tensor(kaiming_uniform(rng, 9 * c_in, (9 * c_in, c_hidden)), requires_grad=True)
        self.conv_b = Tensor(np.zeros(c_hidden), requires_grad=True)
        self.cls = Linear(c_hidden, anchors_per_cell, rng)
        self.reg = Linear(c_hidden, anchors_per_cell * 8, rng)
        # start with a low objectness prior as in focal-loss detectors
        self.cls.bias.data[:] = -np.log((1 - 0.01) / 0.01)
        self._tables = {}

    def __call__(self, bev: BevMap):
        H, W, C = bev.shape
        if (H, W) not in self._tables:
            self._tables[(H, W)] = _conv3x3_table(H, W)
        table = self._tables[(H, W)]
        flat = bev.features.reshape(H * W, C)
        cols = gather_rows(flat, table.reshape(-1)).reshape(H * W, 9 * C)
        hidden = relu(matmul(cols, self.conv_w) + self.conv_b)
        scores = self.cls(hidden).reshape(H * W * self.A)
        regs = self.reg(hidden).reshape(H * W * self.A, 8)
        return scores, regs


def rpn_heads(bev: BevMap, head: RpnHead):
    return head(bev)


# ---------------------------------------------------------------------------
# target assignment

@dataclass
class RpnTargets:
    labels: np.ndarray       # POSITIVE / NEGATIVE / IGNORE per anchor
    reg_targets: np.ndarray  # (num_anchors, 8), zero where not positive
    matched_gt: np.ndarray   # index of the assigned gt, -1 if none


def assign_targets(anchors: AnchorGrid, gt_boxes, gt_classes, pos_iou=0.6, neg_iou=0.45,
                   period=2 * np.pi) -> RpnTargets:
    n = len(anchors.boxes)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    reg = np.zeros((n, 8))
    matched = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(gt_boxes) == 0:
        return RpnTargets(labels, reg, matched)
    for c in np.unique(gt_classes):
        a_sel = np.flatnonzero(anchors.class_ids == c)
        g_sel = np.flatnonzero(gt_classes == c)
        iou = geom3d.iou_bev_matrix(anchors.boxes[a_sel], gt_boxes[g_sel])
        best_gt = iou.argmax(axis=1)
        best_iou = iou.max(axis=1)
        lab = np.where(best_iou >= pos_iou, POSITIVE, np.where(best_iou < neg_iou, NEGATIVE, IGNORE))
        match = np.where(lab == POSITIVE, best_gt, -1)
        # every gt keeps its best anchor(s)
        for j in range(len(g_sel)):
            top = iou[:, j].max()
            if top > 0:
                for i in np.flatnonzero(iou[:, j] == top):
                    lab[i] = POSITIVE
                    match[i] = j
        labels[a_sel] = lab
        pos = a_sel[lab == POSITIVE]
        matched[pos] = g_sel[match[lab == POSITIVE]]
        if len(pos):
            reg[pos] = encode_box(gt_boxes[matched[pos]], anchors.boxes[pos], period)
    return RpnTargets(labels, reg, matched)


# ---------------------------------------------------------------------------
# proposals

def nms_bev(boxes, scores, thresh: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy rotated-BEV NMS; a box is suppressed when its IoU with a kept box exceeds ``thresh``.

    Ties in score keep the lower index first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    alive = np.ones(len(order), dtype=bool)
    radius = np.hypot(boxes[:, 3], boxes[:, 4]) / 2
    keep = []
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[pos + 1:]
        cand = np.flatnonzero(alive[pos + 1:] & (
            np.hypot(boxes[rest, 0] - boxes[i, 0], boxes[rest, 1] - boxes[i, 1]) <= radius[rest] + radius[i]))
        if len(cand):
            ious = geom3d.iou_bev_matrix(boxes[i:i + 1], boxes[rest[cand]])[0]
            alive[pos + 1 + cand[ious > thresh]] = False
    return np.array(keep, dtype=np.int64)


@dataclass
class ProposalSet:
    boxes: np.ndarray
    scores: np.ndarray
    class_ids: np.ndarray
    anchor_index: np.ndarray

    def __len__(self):
        return len(self.boxes)


def propose(scores, regs, anchors: AnchorGrid, nms_iou=0.85, max_keep=100,
            period=2 * np.pi) -> ProposalSet:
    logits = np.asarray(getattr(scores, "data", scores))
    deltas = np.asarray(getattr(regs, "data", regs))
    prob = 1.0 / (1.0 + np.exp(-np.clip(logits, -50, 50)))
    boxes = decode_box(deltas, anchors.boxes, period)
    keep = nms_bev(boxes, prob, nms_iou, max_keep)
    return ProposalSet(boxes[keep], prob[keep], anchors.class_ids[keep], keep)


def dump_proposals(props: ProposalSet) -> str:
    """Text dump: ``score x y z l w h yaw`` per proposal."""
    lines = [" ".join(repr(float(v)) for v in [s, *b]) for s, b in zip(props.scores, props.boxes)]
    return "\n".join(lines) + ("\n" if lines else "")
