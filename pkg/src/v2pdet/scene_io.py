"""Point clouds, labels, KITTI file formats, synthetic scenes and augmentation."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom3d


class FormatError(ValueError):
    pass


class EmptySceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        vals = [self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("scene bounds must be finite")
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ValueError("scene bounds need min < max on every axis")

    @classmethod
    def from_range(cls, r) -> "SceneBounds":
        """From ``(x_min, y_min, z_min, x_max, y_max, z_max)``."""
        return cls(r[0], r[3], r[1], r[4], r[2], r[5])

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])


KITTI_BOUNDS = SceneBounds(0.0, 70.4, -40.0, 40.0, -3.0, 1.0)


@dataclass
class PointCloud:
    """``points`` is an ``(N, 4)`` float64 array of x, y, z, reflectance."""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass
class GroundTruth:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.class_ids):
            raise ValueError("one class id per box required")

    def __len__(self):
        return len(self.boxes)


# ---------------------------------------------------------------------------
# KITTI velodyne .bin

def load_kitti_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        whole = len(raw) - len(raw) % 16
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of 16; "
                          f"truncated record at byte offset {whole}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts.astype(np.float64))


def write_kitti_bin(path, pc: PointCloud) -> None:
    Path(path).write_bytes(np.ascontiguousarray(pc.points, dtype="<f4").tobytes())


def crop_to_bounds(pc: PointCloud, b: SceneBounds) -> PointCloud:
    """Keep points inside the half-open box ``[min, max)`` on each axis."""
    p = pc.points
    keep = ((p[:, 0] >= b.x_min) & (p[:, 0] < b.x_max)
            & (p[:, 1] >= b.y_min) & (p[:, 1] < b.y_max)
            & (p[:, 2] >= b.z_min) & (p[:, 2] < b.z_max))
    return PointCloud(p[keep])


# ---------------------------------------------------------------------------
# KITTI label text
#
# Labels live in the rectified camera frame (x right, y down, z forward) with
# the location at the bottom center of the box.  Without a calibration file
# the nominal axis permutation lidar = (z_cam, -x_cam, -y_cam) is used.

@dataclass
class Calibration:
    """Velodyne-to-rectified-camera transform (4x4)."""
    velo_to_cam: np.ndarray = field(default_factory=lambda: np.array([
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0]]))

    @classmethod
    def from_file(cls, path) -> "Calibration":
        vals = {}
        for line in Path(path).read_text().splitlines():
            if ":" in line:
                key, rest = line.split(":", 1)
                vals[key.strip()] = np.array([float(v) for v in rest.split()])
        r0 = np.eye(4)
        r0[:3, :3] = vals["R0_rect"].reshape(3, 3)
        tr = np.eye(4)
        tr[:3, :4] = vals["Tr_velo_to_cam"].reshape(3, 4)
        return cls(r0 @ tr)

    def cam_to_lidar(self, xyz):
        inv = np.linalg.inv(self.velo_to_cam)
        h = np.c_[xyz, np.ones(len(xyz))]
        return (h @ inv.T)[:, :3]

    def lidar_to_cam(self, xyz):
        h = np.c_[xyz, np.ones(len(xyz))]
        return (h @ self.velo_to_cam.T)[:, :3]


@dataclass
class LabelRecord:
    cls_name: str
    box: np.ndarray          # lidar-frame box
    score: float | None = None


def parse_kitti_labels(text: str, calib: Calibration | None = None) -> list[LabelRecord]:
    calib = calib or Calibration()
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        f = line.split()
        if not f:
            continue
        if len(f) not in (15, 16):
            raise FormatError(f"label line {n}: expected 15 or 16 fields, got {len(f)}")
        if f[0] == "DontCare":
            continue
        h, w, l = (float(v) for v in f[8:11])
        loc = np.array([[float(v) for v in f[11:14]]])
        ry = float(f[14])
        center = calib.cam_to_lidar(loc)[0]
        center[2] += h / 2
        yaw = geom3d.wrap_angle(-ry - np.pi / 2)
        score = float(f[15]) if len(f) == 16 else None
        out.append(LabelRecord(f[0], np.array([*center, l, w, h, yaw]), score))
    return out


def format_kitti_labels(records, calib: Calibration | None = None) -> str:
    """KITTI label/result lines; truncation, occlusion, alpha and 2D box are placeholders."""
    calib = calib or Calibration()
    lines = []
    for r in records:
        x, y, z, l, w, h, yaw = (float(v) for v in r.box)
        bottom = calib.lidar_to_cam(np.array([[x, y, z - h / 2]]))[0]
        ry = float(geom3d.wrap_angle(-yaw - np.pi / 2))
        vals = [0.0, 0, -10.0, 0.0, 0.0, 0.0, 0.0, h, w, l, *bottom, ry]
        fields = [r.cls_name] + [repr(float(v)) if isinstance(v, float) else str(v) for v in vals]
        fields[2] = "0"
        if r.score is not None:
            fields.append(repr(float(r.score)))
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def gt_from_records(records, classes) -> GroundTruth:
    recs = [r for r in records if r.cls_name in classes]
    return GroundTruth(np.array([r.box for r in recs]).reshape(-1, 7),
                       np.array([list(classes).index(r.cls_name) for r in recs], dtype=np.int64))


def records_from_gt(gt: GroundTruth, classes, scores=None) -> list[LabelRecord]:
    return [LabelRecord(classes[int(c)], b, None if scores is None else float(scores[i]))
            for i, (b, c) in enumerate(zip(gt.boxes, gt.class_ids))]


# ---------------------------------------------------------------------------
# dataset directories: velodyne/<id>.bin, label_2/<id>.txt, optional calib/<id>.txt

def write_scene(root, frame_id: str, pc: PointCloud, gt: GroundTruth, classes) -> None:
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "label_2").mkdir(parents=True, exist_ok=True)
    write_kitti_bin(root / "velodyne" / f"{frame_id}.bin", pc)
    (root / "label_2" / f"{frame_id}.txt").write_text(format_kitti_labels(records_from_gt(gt, classes)))


def list_frames(root) -> list[str]:
    return sorted(p.stem for p in (Path(root) / "velodyne").glob("*.bin"))


def read_scene(root, frame_id: str, classes) -> tuple[PointCloud, GroundTruth]:
    root = Path(root)
    pc = load_kitti_bin(root / "velodyne" / f"{frame_id}.bin")
    calib_path = root / "calib" / f"{frame_id}.txt"
    calib = Calibration.from_file(calib_path) if calib_path.exists() else None
    label_path = root / "label_2" / f"{frame_id}.txt"
    text = label_path.read_text() if label_path.exists() else ""
    return pc, gt_from_records(parse_kitti_labels(text, calib), classes)


def read_dataset(root, classes) -> list[tuple[str, PointCloud, GroundTruth]]:
    return [(fid, *read_scene(root, fid, classes)) for fid in list_frames(root)]


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class SynthSpec:
    num_boxes: int = 3
    # class name -> ((l_min, l_max), (w_min, w_max), (h_min, h_max))
    size_ranges: dict = field(default_factory=lambda: {"Car": ((3.5, 4.5), (1.5, 1.8), (1.4, 1.7))})
    points_per_box: int = 150
    background_points: int = 1000
    seed: int = 0
    bounds: SceneBounds = field(default_factory=lambda: SceneBounds(0.0, 25.6, -12.8, 12.8, -3.0, 1.0))
    ground_z: float = -1.78
    noise: float = 0.02
    num_scenes: int = 1

    def __post_init__(self):
        if self.points_per_box < 0 or self.background_points < 0 or self.num_boxes < 0:
            raise ValueError("counts and densities must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = SceneBounds.from_range(d["bounds"])
        return cls(**d)


def _sample_box_surface(box, n, noise, rng) -> np.ndarray:
    """Points on the faces of ``box``, pushed strictly inward by a small noise."""
    half = box[3:6] / 2
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 4
    probs = np.repeat(areas, 2) / (2 * areas.sum())
    faces = rng.choice(6, size=n, p=probs)
    u = (rng.random((n, 3)) * 2 - 1) * half * (1 - 1e-6)
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    inset = np.minimum(1e-6 + np.abs(rng.normal(0.0, noise, n)), half[axis] * 0.5)
    u[np.arange(n), axis] = sign * (half[axis] - inset)
    return geom3d.decanonicalize(box, u)


def synth_scene(spec: SynthSpec, classes=None) -> tuple[PointCloud, GroundTruth]:
    if spec.num_boxes == 0 and spec.background_points == 0:
        raise EmptySceneError("scene with no boxes and no background points")
    classes = list(classes or spec.size_ranges.keys())
    rng = np.random.default_rng(spec.seed)
    b = spec.bounds
    boxes, cids = [], []
    attempts = 0
    while len(boxes) < spec.num_boxes:
        attempts += 1
        if attempts > 1000 * max(spec.num_boxes, 1):
            raise EmptySceneError("could not place non-overlapping boxes in bounds")
        name = list(spec.size_ranges.keys())[rng.integers(len(spec.size_ranges))]
        (l0, l1), (w0, w1), (h0, h1) = spec.size_ranges[name]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        r = math.hypot(l, w) / 2
        if b.x_max - b.x_min <= 2 * r or b.y_max - b.y_min <= 2 * r:
            raise EmptySceneError("bounds too small for the requested box sizes")
        x = rng.uniform(b.x_min + r, b.x_max - r)
        y = rng.uniform(b.y_min + r, b.y_max - r)
        z = spec.ground_z + h / 2
        yaw = geom3d.wrap_angle(rng.uniform(-np.pi, np.pi))
        cand = np.array([x, y, z, l, w, h, yaw])
        if any(math.hypot(x - o[0], y - o[1]) <= r + math.hypot(o[3], o[4]) / 2 for o in boxes):
            continue
        boxes.append(cand)
        cids.append(classes.index(name))
    parts = [_sample_box_surface(bx, spec.points_per_box, spec.noise, rng) for bx in boxes]
    bg = rng.random((spec.background_points, 3)) * (b.maxs - b.mins) + b.mins
    xyz = np.concatenate(parts + [bg], axis=0) if parts else bg
    refl = rng.random(len(xyz))
    pc = crop_to_bounds(PointCloud(np.c_[xyz, refl]), b)
    return pc, GroundTruth(np.array(boxes).reshape(-1, 7), np.array(cids, dtype=np.int64))


def synth_dataset(spec: SynthSpec, classes=None) -> list[tuple[PointCloud, GroundTruth]]:
    seeds = np.random.SeedSequence(spec.seed).generate_state(spec.num_scenes)
    out = []
    for s in seeds:
        sub = SynthSpec(**{**spec.__dict__, "seed": int(s), "num_scenes": 1})
        out.append(synth_scene(sub, classes))
    return out


# ---------------------------------------------------------------------------
# global augmentation

def augment(pc: PointCloud, gt: GroundTruth, mode: str, rng: np.random.Generator | None = None,
            value: float | None = None, scale_range=(0.95, 1.05),
            rot_range=(-np.pi / 4, np.pi / 4)) -> tuple[PointCloud, GroundTruth]:
    """Apply one global augmentation.

    ``value`` fixes the scale factor or rotation angle; otherwise it is drawn
    from ``rng`` within the given range.  ``flip`` mirrors across the X axis.
    """
    pts = pc.points.copy()
    boxes = gt.boxes.copy()
    if mode == "flip":
        pts[:, 1] = -pts[:, 1]
        boxes[:, 1] = -boxes[:, 1]
        boxes[:, 6] = geom3d.wrap_angle(-boxes[:, 6])
    elif mode == "scale":
        s = value if value is not None else rng.uniform(*scale_range)
        if not scale_range[0] <= s <= scale_range[1]:
            raise ValueError(f"scale factor {s} outside {scale_range}")
        pts[:, :3] *= s
        boxes[:, :6] *= s
    elif mode == "rotate":
        a = value if value is not None else rng.uniform(*rot_range)
        c, s = math.cos(a), math.sin(a)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0], pts[:, 1] = c * x - s * y, s * x + c * y
        bx, by = boxes[:, 0].copy(), boxes[:, 1].copy()
        boxes[:, 0], boxes[:, 1] = c * bx - s * by, s * bx + c * by
        boxes[:, 6] = geom3d.wrap_angle(boxes[:, 6] + a)
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return PointCloud(pts), GroundTruth(boxes, gt.class_ids.copy())


def write_points_dump(path, xyz, prob, label) -> None:
    """Segmentation dump: ``x y z prob label`` per line."""
    with open(path, "w") as fh:
        for p, s, l in zip(xyz, prob, label):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {s:.6f} {int(l)}\n")


def ensure_dir(path) -> Path:
    os.makedirs(path, exist_ok=True)
    return Path(path)
