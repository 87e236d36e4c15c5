"""Average precision, IoU-estimate correlation and the proposal-to-refined IoU shift."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import geom3d


@dataclass
class FrameDetections:
    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)


@dataclass
class EvalReport:
    ap_3d: dict = field(default_factory=dict)
    ap_bev: dict = field(default_factory=dict)
    plcc: float | None = None
    srcc: float | None = None
    iou_shift: "IouShift | None" = None

    def to_dict(self) -> dict:
        out = {"ap_3d": self.ap_3d, "ap_bev": self.ap_bev, "plcc": self.plcc, "srcc": self.srcc}
        if self.iou_shift is not None:
            out["iou_shift"] = self.iou_shift.to_dict()
        return out


def ap_from_matches(scores, is_tp, num_gt: int, num_recall: int = 40) -> float:
    """Interpolated AP over the recall positions ``1/R, 2/R, ..., 1``.

    Precision at a recall position is the best precision reached at any
    recall at or above it (0 if that recall is never reached).
    """
    if num_gt == 0:
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if len(scores) == 0:
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -scores))
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # running max from the right gives the interpolated envelope
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.arange(1, num_recall + 1) / num_recall:
        hit = np.flatnonzero(recall >= r - 1e-12)
        if len(hit):
            total += envelope[hit[0]]
    return total / num_recall


def match_frame(boxes, scores, gt_boxes, thresh: float, metric: str = "3d") -> np.ndarray:
    """Greedy matching by descending score; each gt is claimed at most once by its best free box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    tp = np.zeros(len(boxes), dtype=bool)
    if len(boxes) == 0 or len(gt_boxes) == 0:
        return tp
    iou = (geom3d.iou_3d_matrix if metric == "3d" else geom3d.iou_bev_matrix)(boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in np.lexsort((np.arange(len(boxes)), -np.asarray(scores))):
        cand = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(cand))
        if cand[j] >= thresh:
            tp[i] = True
            taken[j] = True
    return tp


def average_precision(dets, gts, class_id: int, thresh: float, metric: str = "3d",
                      num_recall: int = 40) -> float:
    """AP of one class over frames; ``dets`` and ``gts`` are aligned per frame."""
    all_scores, all_tp = [], []
    num_gt = 0
    for d, g in zip(dets, gts):
        dm = d.class_ids == class_id
        gm = g.class_ids == class_id
        num_gt += int(gm.sum())
        all_scores.append(d.scores[dm])
        all_tp.append(match_frame(d.boxes[dm], d.scores[dm], g.boxes[gm], thresh, metric))
    if not all_scores:
        return float("nan")
    return ap_from_matches(np.concatenate(all_scores), np.concatenate(all_tp), num_gt, num_recall)


def evaluate(dets, gts, classes, thresholds: dict, num_recall: int = 40) -> EvalReport:
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection frames vs {len(gts)} ground-truth frames")
    rep = EvalReport()
    for ci, name in enumerate(classes):
        t = thresholds[name]
        rep.ap_3d[name] = average_precision(dets, gts, ci, t, "3d", num_recall)
        rep.ap_bev[name] = average_precision(dets, gts, ci, t, "bev", num_recall)
    return rep


# ---------------------------------------------------------------------------

def _pearson(a, b) -> float | None:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return None
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def correlation(estimates, actuals) -> tuple[float | None, float | None]:
    """Pearson and Spearman (average ranks for ties); ``None`` when a side has zero variance."""
    est = np.asarray(estimates, dtype=np.float64).reshape(-1)
    act = np.asarray(actuals, dtype=np.float64).reshape(-1)
    if len(est) != len(act):
        raise ValueError("estimates and actuals differ in length")
    if len(est) < 2:
        raise ValueError("correlation needs at least two pairs")
    return _pearson(est, act), _pearson(rankdata(est), rankdata(act))


def actual_iou(boxes, class_ids, gt_boxes, gt_classes) -> np.ndarray:
    """Best 3D IoU of each box with a same-class ground truth (0 without one)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = np.zeros(len(boxes))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    if len(boxes) == 0 or len(gt_boxes) == 0:
        return out
    iou = geom3d.iou_3d_matrix(boxes, gt_boxes)
    same = np.asarray(class_ids)[:, None] == np.asarray(gt_classes)[None, :]
    return np.where(same, iou, 0.0).max(axis=1)


@dataclass
class IouShift:
    before: np.ndarray
    after: np.ndarray
    edges: np.ndarray
    hist_before: np.ndarray
    hist_after: np.ndarray

    @property
    def mean_shift(self) -> float:
        if len(self.before) == 0:
            return 0.0
        return float(self.after.mean() - self.before.mean())

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "proposal": self.hist_before.tolist(),
                "refined": self.hist_after.tolist(), "mean_shift": self.mean_shift,
                "mean_proposal": float(self.before.mean()) if len(self.before) else None,
                "mean_refined": float(self.after.mean()) if len(self.after) else None}


def iou_shift(proposals, refined, gt_boxes, class_ids=None, gt_classes=None, bins: int = 10) -> IouShift:
    """Actual-IoU histograms of paired proposal and refined boxes (row i refines row i)."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    refined = np.asarray(refined, dtype=np.float64).reshape(-1, 7)
    if len(proposals) != len(refined):
        raise ValueError("proposals and refined boxes must be paired")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    cid = np.zeros(len(proposals), dtype=np.int64) if class_ids is None else np.asarray(class_ids)
    gcid = np.zeros(len(gt_boxes), dtype=np.int64) if gt_classes is None else np.asarray(gt_classes)
    before = actual_iou(proposals, cid, gt_boxes, gcid)
    after = actual_iou(refined, cid, gt_boxes, gcid)
    edges = np.linspace(0.0, 1.0, bins + 1)
    return IouShift(before, after, edges, np.histogram(before, edges)[0], np.histogram(after, edges)[0])


def merge_shifts(shifts) -> IouShift:
    shifts = list(shifts)
    edges = shifts[0].edges if shifts else np.linspace(0, 1, 11)
    before = np.concatenate([s.before for s in shifts]) if shifts else np.zeros(0)
    after = np.concatenate([s.after for s in shifts]) if shifts else np.zeros(0)
    return IouShift(before, after, edges, np.histogram(before, edges)[0], np.histogram(after, edges)[0])
