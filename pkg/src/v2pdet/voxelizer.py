"""Point-to-voxel quantization and the voxel-center inverse map."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scene_io import PointCloud, SceneBounds


@dataclass(frozen=True)
class VoxelGridSpec:
    voxel_size: tuple
    bounds: SceneBounds
    stride: int = 1

    def __post_init__(self):
        if min(self.voxel_size) <= 0:
            raise ValueError("voxel size must be positive")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        ext = (self.bounds.maxs - self.bounds.mins) / np.asarray(self.voxel_size)
        if np.any(np.abs(ext - np.round(ext)) > 1e-6):
            raise ValueError(f"range {self.bounds} is not a whole number of voxels {self.voxel_size}")

    @property
    def base_shape(self) -> tuple:
        ext = (self.bounds.maxs - self.bounds.mins) / np.asarray(self.voxel_size)
        return tuple(int(v) for v in np.round(ext))

    @property
    def grid_shape(self) -> tuple:
        """Grid extent at this stride (each halving rounds up)."""
        shape = np.array(self.base_shape)
        s = self.stride
        while s > 1:
            shape = (shape + 1) // 2
            s //= 2
        return tuple(int(v) for v in shape)

    def at_stride(self, stride: int) -> "VoxelGridSpec":
        return replace(self, stride=stride)


@dataclass
class SparseVoxelTensor:
    """Occupied voxels: ``indices`` (M, 3) int64, sorted lexicographically,
    and aligned ``features`` (an array or autodiff ``Tensor`` with M rows)."""
    indices: np.ndarray
    features: object
    spec: VoxelGridSpec
    counts: np.ndarray | None = None

    def __len__(self):
        return len(self.indices)

    @property
    def width(self) -> int:
        return self.features.shape[1]


def voxelize(pc: PointCloud, spec: VoxelGridSpec) -> SparseVoxelTensor:
    """Mean (x, y, z, r) feature per occupied voxel."""
    if spec.stride != 1:
        raise ValueError("voxelize works at stride 1")
    pts = pc.points
    idx = np.floor((pts[:, :3] - spec.bounds.mins) / np.asarray(spec.voxel_size)).astype(np.int64)
    shape = np.array(spec.grid_shape)
    bad = np.any((idx < 0) | (idx >= shape), axis=1)
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        raise ValueError(f"point {first} at {pts[first, :3]} lies outside the grid; crop first")
    if len(pts) == 0:
        return SparseVoxelTensor(np.zeros((0, 3), np.int64), np.zeros((0, 4)), spec, np.zeros(0, np.int64))
    uniq, inv, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    feats = np.zeros((len(uniq), 4))
    np.add.at(feats, inv, pts)
    feats /= counts[:, None]
    return SparseVoxelTensor(uniq, feats, spec, counts)


def devoxelize(idx, spec: VoxelGridSpec) -> np.ndarray:
    """Voxel centers in metric coordinates: ``(v + 0.5) * d * stride + min``.

    Evaluated as a division by cells-per-metre, which is exact for the usual
    decimal steps (0.05 m -> 20), so e.g. stride-8 index 1 gives exactly 0.6.
    """
    idx = np.asarray(idx, dtype=np.float64)
    per_metre = 1.0 / (np.asarray(spec.voxel_size) * spec.stride)
    return (idx + 0.5) / per_metre + spec.bounds.mins


def dump_text(svt: SparseVoxelTensor) -> str:
    """Debug dump, one ``vx vy vz f0 f1 f2 f3`` line per voxel."""
    feats = np.asarray(getattr(svt.features, "data", svt.features))
    lines = []
    for i, f in zip(svt.indices, feats):
        lines.append(" ".join([str(int(v)) for v in i] + [repr(float(v)) for v in f]))
    return "\n".join(lines) + ("\n" if lines else "")
