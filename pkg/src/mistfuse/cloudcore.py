"""Core point-cloud types, rigid transforms, point-set metrics and KITTI-style I/O.

Coordinates are meters in the sensor frame (x forward, y left, z up).
All types are immutable after construction; operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

# Below this size brute force beats the KD-tree; both paths must agree exactly.
_BRUTE_FORCE_LIMIT = 256


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


def _as_readonly(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with per-point intensity and optional ring index."""

    xyz: np.ndarray                  # (N, 3) float64
    intensity: np.ndarray            # (N,) float64 in [0, 1]
    frame_id: str = ""
    ring: np.ndarray | None = None   # (N,) int32 laser-row index, if known

    def __post_init__(self):
        xyz = np.atleast_2d(np.asarray(self.xyz, dtype=np.float64))
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (N, 3), got {xyz.shape}")
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if inten.shape[0] != xyz.shape[0]:
            raise ValueError("intensity length does not match point count")
        if xyz.size and not np.all(np.isfinite(xyz)):
            raise ValueError("non-finite coordinates")
        if inten.size and (inten.min() < 0.0 or inten.max() > 1.0):
            raise ValueError("intensity outside [0, 1]")
        object.__setattr__(self, "xyz", _as_readonly(xyz))
        object.__setattr__(self, "intensity", _as_readonly(inten))
        if self.ring is not None:
            ring = np.asarray(self.ring).reshape(-1)
            if ring.shape[0] != xyz.shape[0]:
                raise ValueError("ring length does not match point count")
            if ring.size and ring.min() < 0:
                raise ValueError("negative ring index")
            object.__setattr__(self, "ring", _as_readonly(ring, dtype=np.int32))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __iter__(self) -> Iterator[Point]:
        for i in range(len(self)):
            yield Point(*self.xyz[i], self.intensity[i])

    @classmethod
    def from_array(cls, arr: np.ndarray, frame_id: str = "",
                   ring: np.ndarray | None = None) -> "PointCloud":
        """Build from an (N, 3) xyz or (N, 4) xyz+intensity array."""
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        if arr.shape[1] == 3:
            return cls(arr, np.zeros(arr.shape[0]), frame_id, ring)
        if arr.shape[1] == 4:
            return cls(arr[:, :3], arr[:, 3], frame_id, ring)
        raise ValueError(f"expected (N, 3) or (N, 4), got {arr.shape}")

    def as_array(self) -> np.ndarray:
        """(N, 4) float64 copy: x, y, z, intensity."""
        return np.column_stack([self.xyz, self.intensity])

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        """Same metadata, new coordinates (point count must match)."""
        return PointCloud(xyz, self.intensity, self.frame_id, self.ring)

    def select(self, mask_or_index) -> "PointCloud":
        ring = None if self.ring is None else self.ring[mask_or_index]
        return PointCloud(self.xyz[mask_or_index], self.intensity[mask_or_index],
                          self.frame_id, ring)

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("empty cloud has no centroid")
        return self.xyz.mean(axis=0)


@dataclass(frozen=True)
class BoundingBox3D:
    """Oriented 3D box: center, (length, width, height), yaw about +z."""

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float
    label: str = "Car"

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError(f"dims must be strictly positive, got {self.dims}")
        if not (-math.pi < self.yaw <= math.pi):
            raise ValueError(f"yaw must lie in (-pi, pi], got {self.yaw}")
        if not all(math.isfinite(v) for v in (*self.center, *self.dims)):
            raise ValueError("non-finite box parameters")

    @property
    def z_top(self) -> float:
        return self.center[2] + self.dims[2] / 2.0

    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    def to_box_frame(self, xyz: np.ndarray) -> np.ndarray:
        """Map scene-frame points into the box frame (x along length, y along width)."""
        return (np.atleast_2d(xyz) - np.asarray(self.center)) @ self.rotation()

    def from_box_frame(self, local: np.ndarray) -> np.ndarray:
        return np.atleast_2d(local) @ self.rotation().T + np.asarray(self.center)

    def bev_corners(self) -> np.ndarray:
        """(4, 2) top-down corners in scene frame, counter-clockwise."""
        l, w, _ = self.dims
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2],
                          [-l / 2, -w / 2], [l / 2, -w / 2]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])


def yaw_matrix(yaw: float) -> np.ndarray:
    """Rotation about +z by `yaw` radians."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: p -> R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or tr.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", _as_readonly(rot))
        object.__setattr__(self, "translation", _as_readonly(tr))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(yaw_matrix(yaw), np.asarray(translation, dtype=np.float64))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.atleast_2d(xyz) @ self.rotation.T + self.translation


def transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Apply a rigid motion to every point; intensity and ring pass through."""
    return cloud.with_xyz(t.apply(cloud.xyz))


def _nearest_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Distance from each query point to its nearest neighbor in ref."""
    if len(query) < _BRUTE_FORCE_LIMIT and len(ref) < _BRUTE_FORCE_LIMIT:
        diff = query[:, None, :] - ref[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=-1)).min(axis=1)
    dists, _ = cKDTree(ref).query(query, k=1)
    return dists


def _check_nonempty(a: PointCloud, b: PointCloud, op: str) -> None:
    if len(a) == 0 or len(b) == 0:
        raise ValueError(f"{op} requires non-empty clouds")


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Chamfer distance: mean of the two directed mean nearest distances."""
    _check_nonempty(a, b, "chamfer")
    d_ab = _nearest_dists(a.xyz, b.xyz).mean()
    d_ba = _nearest_dists(b.xyz, a.xyz).mean()
    return 0.5 * (d_ab + d_ba)


def hausdorff(a: PointCloud, b: PointCloud) -> float:
    """Bidirectional Hausdorff distance: max of the two directed max-min distances."""
    _check_nonempty(a, b, "hausdorff")
    d_ab = _nearest_dists(a.xyz, b.xyz).max()
    d_ba = _nearest_dists(b.xyz, a.xyz).max()
    return float(max(d_ab, d_ba))


def crop_to_box(cloud: PointCloud, box: BoundingBox3D, margin: float = 0.0) -> PointCloud:
    """Points whose box-frame coordinates lie within dims/2 + margin on every axis."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if len(cloud) == 0:
        return cloud
    local = box.to_box_frame(cloud.xyz)
    half = np.asarray(box.dims) / 2.0 + margin
    inside = np.all(np.abs(local) <= half, axis=1)
    return cloud.select(inside)


# --- KITTI-style frame and label I/O -------------------------------------------------

def read_frame(path) -> PointCloud:
    """Read a little-endian float32 x,y,z,intensity binary frame."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16 != 0:
        raise ValueError(f"{path.name}: size {len(raw)} is not a multiple of 16 bytes")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud.from_array(arr, frame_id=path.stem)


def write_frame(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(cloud.as_array().astype("<f4").tobytes())


def read_labels(path) -> list[BoundingBox3D]:
    """One box per line: `cx cy cz l w h yaw class`."""
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        cx, cy, cz, l, w, h, yaw = map(float, parts[:7])
        boxes.append(BoundingBox3D((cx, cy, cz), (l, w, h), yaw, parts[7]))
    return boxes


def write_labels(path, boxes: Sequence[BoundingBox3D]) -> None:
    lines = []
    for b in boxes:
        cx, cy, cz = b.center
        l, w, h = b.dims
        lines.append(f"{cx:.6f} {cy:.6f} {cz:.6f} {l:.6f} {w:.6f} {h:.6f} {b.yaw:.6f} {b.label}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
