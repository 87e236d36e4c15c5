"""Rotated 3D box geometry.

A box is a float array ``[x, y, z, l, w, h, yaw]``: center in meters, length
along the heading axis, width, height, and yaw in radians about +Z.  Arrays
of boxes have shape ``(..., 7)``.

Corner order (``corners``): bottom face counter-clockwise seen from +Z,
starting at the front-left corner ``(+l/2, +w/2)``, then the top face in the
same order.
"""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

COLLAPSE_EPS = 1e-9
AREA_EPS = 1e-12
# closed faces, with slack for rounding in the rotation
CONTAIN_EPS = 1e-9

_CORNER_SIGNS = np.array([
    [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
], dtype=np.float64) * 0.5


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    out = theta - 2 * np.pi * np.ceil((theta - np.pi) / (2 * np.pi))
    return out if out.ndim else float(out)


def rotz(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def validate_box(box) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.shape[-1] != 7:
        raise ValueError(f"box must have 7 parameters, got shape {box.shape}")
    if not np.all(np.isfinite(box)):
        raise ValueError("box parameters must be finite")
    if np.any(box[..., 3:6] <= 0):
        raise ValueError("box sizes must be strictly positive")
    return box


def corners(box) -> np.ndarray:
    """Eight corners, shape ``(..., 8, 3)``."""
    box = np.asarray(box, dtype=np.float64)
    local = _CORNER_SIGNS * box[..., None, 3:6]
    c, s = np.cos(box[..., 6])[..., None], np.sin(box[..., 6])[..., None]
    x = c * local[..., 0] - s * local[..., 1]
    y = s * local[..., 0] + c * local[..., 1]
    out = np.stack([x, y, local[..., 2]], axis=-1)
    return out + box[..., None, 0:3]


def canonicalize(box, pts) -> np.ndarray:
    """Express points in the box frame: ``R(-yaw) @ (p - center)``."""
    box = np.asarray(box, dtype=np.float64)
    d = np.asarray(pts, dtype=np.float64)[..., :3] - box[0:3]
    c, s = np.cos(box[6]), np.sin(box[6])
    return np.stack([c * d[..., 0] + s * d[..., 1],
                     -s * d[..., 0] + c * d[..., 1],
                     d[..., 2]], axis=-1)


def decanonicalize(box, pts) -> np.ndarray:
    """Inverse of :func:`canonicalize`."""
    box = np.asarray(box, dtype=np.float64)
    p = np.asarray(pts, dtype=np.float64)
    c, s = np.cos(box[6]), np.sin(box[6])
    return np.stack([c * p[..., 0] - s * p[..., 1] + box[0],
                     s * p[..., 0] + c * p[..., 1] + box[1],
                     p[..., 2] + box[2]], axis=-1)


def points_in_box(box, pts) -> np.ndarray:
    """Closed-face containment test for many points against one box."""
    box = np.asarray(box, dtype=np.float64)
    local = canonicalize(box, pts)
    half = box[3:6] / 2
    return np.all(np.abs(local) <= half + CONTAIN_EPS, axis=-1)


def contains(box, p) -> bool:
    return bool(points_in_box(box, np.asarray(p, dtype=np.float64)[None, :3])[0])


def points_in_boxes(boxes, pts) -> np.ndarray:
    """Membership matrix of shape ``(num_points, num_boxes)``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    pts = np.asarray(pts, dtype=np.float64)
    out = np.zeros((len(pts), len(boxes)), dtype=bool)
    for j, b in enumerate(boxes):
        out[:, j] = points_in_box(b, pts)
    return out


def bev_polygon(box) -> np.ndarray:
    """Counter-clockwise BEV rectangle, shape ``(..., 4, 2)``."""
    return corners(box)[..., :4, :2]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _collapse(poly: list) -> list:
    out = []
    for p in poly:
        if not out or np.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > COLLAPSE_EPS:
            out.append(p)
    while len(out) > 1 and np.hypot(out[0][0] - out[-1][0], out[0][1] - out[-1][1]) <= COLLAPSE_EPS:
        out.pop()
    return out


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
        out = _collapse(out)
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _degenerate(a, b) -> bool:
    if a[3] * a[4] < AREA_EPS or b[3] * b[4] < AREA_EPS:
        log.warning("degenerate box in IoU computation; overlap defined as 0")
        return True
    return False


def bev_overlap(a, b) -> float:
    """Intersection area of the BEV rectangles of two boxes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ra = np.hypot(a[3], a[4]) / 2
    rb = np.hypot(b[3], b[4]) / 2
    if np.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    poly = clip_polygon(bev_polygon(a), bev_polygon(b))
    return max(polygon_area(poly), 0.0)


def iou_bev(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if _degenerate(a, b):
        return 0.0
    inter = bev_overlap(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(np.clip(inter / union, 0.0, 1.0))


def iou_3d(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if _degenerate(a, b) or a[5] < COLLAPSE_EPS or b[5] < COLLAPSE_EPS:
        return 0.0
    zo = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if zo <= 0:
        return 0.0
    inter = bev_overlap(a, b) * zo
    union = np.prod(a[3:6]) + np.prod(b[3:6]) - inter
    return float(np.clip(inter / union, 0.0, 1.0))


# ---------------------------------------------------------------------------
# batched path: vertex enumeration, used for anchor assignment and NMS

def _batched_overlap(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Intersection areas of convex CCW quads, ``pa``/``pb`` shaped ``(B, 4, 2)``."""
    B = len(pa)
    if B == 0:
        return np.zeros(0)

    def inside(pts, poly):
        # pts (B, P, 2), poly (B, 4, 2) -> (B, P)
        a = poly[:, None, :, :]
        e = np.roll(poly, -1, axis=1)[:, None, :, :] - a
        d = pts[:, :, None, :] - a
        cross = e[..., 0] * d[..., 1] - e[..., 1] * d[..., 0]
        return np.all(cross >= -1e-12, axis=-1)

    a0 = pa[:, :, None, :]
    a1 = np.roll(pa, -1, axis=1)[:, :, None, :]
    b0 = pb[:, None, :, :]
    b1 = np.roll(pb, -1, axis=1)[:, None, :, :]
    r = a1 - a0
    s = b1 - b0
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = b0 - a0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    ok = (np.abs(denom) > 1e-15) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    t = np.where(ok, t, 0.0)
    cross_pts = (a0 + t[..., None] * r).reshape(B, 16, 2)
    cand = np.concatenate([pa, pb, cross_pts], axis=1)
    valid = np.concatenate([inside(pa, pb), inside(pb, pa), ok.reshape(B, 16)], axis=1)
    cand = np.where(valid[..., None], cand, 0.0)
    cnt = valid.sum(axis=1)
    center = cand.sum(axis=1) / np.maximum(cnt, 1)[:, None]
    rel = cand - center[:, None, :]
    ang = np.where(valid, np.arctan2(rel[..., 1], rel[..., 0]), np.inf)
    order = np.argsort(ang, axis=1)
    pts = np.take_along_axis(cand, order[..., None], axis=1)
    v = np.take_along_axis(valid, order, axis=1)
    first = pts[:, :1, :]
    pts = np.where(v[..., None], pts, first)
    nxt = np.roll(pts, -1, axis=1)
    area = 0.5 * np.sum(pts[..., 0] * nxt[..., 1] - nxt[..., 0] * pts[..., 1], axis=1)
    return np.where(cnt >= 3, np.maximum(area, 0.0), 0.0)


def _pairs_matrix(A, B, three_d: bool) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64).reshape(-1, 7)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(A), len(B)))
    if len(A) == 0 or len(B) == 0:
        return out
    ra = np.hypot(A[:, 3], A[:, 4]) / 2
    rb = np.hypot(B[:, 3], B[:, 4]) / 2
    dist = np.hypot(A[:, None, 0] - B[None, :, 0], A[:, None, 1] - B[None, :, 1])
    near = dist <= ra[:, None] + rb[None, :]
    if three_d:
        zo = (np.minimum(A[:, None, 2] + A[:, None, 5] / 2, B[None, :, 2] + B[None, :, 5] / 2)
              - np.maximum(A[:, None, 2] - A[:, None, 5] / 2, B[None, :, 2] - B[None, :, 5] / 2))
        near &= zo > 0
    ii, jj = np.nonzero(near)
    if len(ii) == 0:
        return out
    inter = _batched_overlap(bev_polygon(A[ii]), bev_polygon(B[jj]))
    if three_d:
        inter = inter * zo[ii, jj]
        union = np.prod(A[ii, 3:6], axis=1) + np.prod(B[jj, 3:6], axis=1) - inter
    else:
        union = A[ii, 3] * A[ii, 4] + B[jj, 3] * B[jj, 4] - inter
    out[ii, jj] = np.clip(inter / union, 0.0, 1.0)
    return out


def iou_bev_matrix(A, B) -> np.ndarray:
    """Pairwise BEV IoU, shape ``(len(A), len(B))``."""
    return _pairs_matrix(A, B, three_d=False)


def iou_3d_matrix(A, B) -> np.ndarray:
    """Pairwise 3D IoU, shape ``(len(A), len(B))``."""
    return _pairs_matrix(A, B, three_d=True)


def iou_3d_montecarlo(a, b, samples: int, rng: np.random.Generator):
    """Monte Carlo IoU estimate and its standard error.

    Samples are drawn uniformly inside ``a``; the fraction landing in ``b``
    estimates the intersection volume.  The error is propagated through
    ``I / (Va + Vb - I)`` with the delta method.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    # map a's canonical frame straight into b's: rotation by the yaw difference plus an offset
    dyaw = a[6] - b[6]
    c, s = np.cos(dyaw), np.sin(dyaw)
    cb, sb = np.cos(b[6]), np.sin(b[6])
    dx, dy = a[0] - b[0], a[1] - b[1]
    tx, ty, tz = cb * dx + sb * dy, -sb * dx + cb * dy, a[2] - b[2]
    hb = b[3:6] / 2
    hits = 0
    chunk = 1 << 18
    for lo in range(0, samples, chunk):
        n = min(chunk, samples - lo)
        u = (rng.random((3, n)) - 0.5) * a[3:6, None]
        ok = np.abs(c * u[0] - s * u[1] + tx) <= hb[0]
        ok &= np.abs(s * u[0] + c * u[1] + ty) <= hb[1]
        ok &= np.abs(u[2] + tz) <= hb[2]
        hits += int(np.count_nonzero(ok))
    frac = hits / samples
    va, vb = float(np.prod(a[3:6])), float(np.prod(b[3:6]))
    inter = frac * va
    iou = inter / (va + vb - inter)
    se_frac = np.sqrt(frac * (1 - frac) / samples)
    # d iou / d frac = va (va + vb) / (va + vb - I)^2
    se = se_frac * va * (va + vb) / (va + vb - inter) ** 2
    return iou, float(se)
