"""Attach an object sequence to a target vehicle and re-render the scene.

The pipeline per sequence frame: pick anchor point(s) B on the box's top
rectangle from the fusion mode, move the object so that A = centroid + (0, 0,
dz) lands on B (dz being half the object's vertical extent), apply the spray
rotation about the placed centroid, keep only the object points a beam would
actually see (density gate), then merge with the scene and re-render through
the range image so real occlusion happens in both directions.

The spray rotation runs after placement, not before: placement aligns the
object's principal axis with the attached face, which would silently undo any
earlier rotation about the same vertical axis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mistfuse.cloudcore import BoundingBox3D, PointCloud, yaw_matrix
from mistfuse.objectgen import SequenceSample
from mistfuse.rangesim import (
    DEFAULT_AZIMUTH_ORIGIN,
    LaserModel,
    RangeImage,
    backproject,
    project,
)

MODES = ("head_tail_side", "body_side", "two_sides", "corner_point")

# Per-dataset ceiling on d_v; a config clamp, not a change of gate semantics.
DATASET_DV_MAX = {"kitti": 0.004, "nuscenes": 0.5}

# Box faces by outward local normal: 0 +x (front), 1 -x (rear), 2 +y (left), 3 -y (right)
_FACE_NORMALS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)


class InfeasibleModeError(ValueError):
    """The requested fusion mode needs more sensor-facing faces than exist."""


@dataclass(frozen=True)
class FusionConfig:
    """Attack parameters: fusion mode, density limits, spray angle."""

    mode: str
    d_h: float = 0.5
    d_v: float = 0.5
    spray_angle_deg: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (0.0 <= self.d_h <= 0.5) or not (0.0 <= self.d_v <= 0.5):
            raise ValueError("d_h and d_v must lie in [0, 0.5]")
        if not (-40.0 <= self.spray_angle_deg <= 40.0):
            raise ValueError("spray angle must lie in [-40, 40] degrees")


def check_config_for_dataset(cfg: FusionConfig, dataset: str) -> None:
    """Enforce the per-dataset d_v ceiling (KITTI: 0.004)."""
    limit = DATASET_DV_MAX.get(dataset)
    if limit is None:
        raise ValueError(f"unknown dataset {dataset!r}")
    if cfg.d_v > limit + 1e-12:
        raise ValueError(f"d_v={cfg.d_v} exceeds {dataset} limit {limit}")


def save_config(path, cfg: FusionConfig) -> None:
    Path(path).write_text(
        f"mode={cfg.mode}\nd_h={cfg.d_h!r}\nd_v={cfg.d_v!r}\n"
        f"spray_angle_deg={cfg.spray_angle_deg!r}\n")


def load_config(path) -> FusionConfig:
    kv = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        kv[key.strip()] = value.strip()
    try:
        return FusionConfig(kv["mode"], float(kv["d_h"]), float(kv["d_v"]),
                            float(kv["spray_angle_deg"]))
    except KeyError as exc:
        raise ValueError(f"{path}: missing config key {exc}") from exc


@dataclass(frozen=True)
class AnchorSet:
    """Anchor point(s) B on the box's top rectangle plus the sensor-facing faces."""

    anchors: tuple[tuple[float, float, float], ...]
    facing_faces: tuple[int, ...]


def _facing_faces(box: BoundingBox3D, sensor_origin: np.ndarray) -> list[int]:
    rot = box.rotation()
    center = np.asarray(box.center)
    half = np.array([box.dims[0] / 2, box.dims[0] / 2, box.dims[1] / 2, box.dims[1] / 2])
    facing = []
    for face in range(4):
        normal = rot[:, :2] @ _FACE_NORMALS[face]
        face_center = center + normal * half[face]
        to_sensor = sensor_origin - face_center
        norm = np.linalg.norm(to_sensor)
        if norm > 0 and normal @ (to_sensor / norm) > 1e-12:
            facing.append(face)
    return facing


def select_anchor(box: BoundingBox3D, sensor_origin, mode: str) -> AnchorSet:
    """Anchor(s) for the mode, from the top-rectangle edge midpoints/corner.

    A face counts as facing iff its outward horizontal normal points toward
    the sensor.  Two-anchor modes need both a facing front/rear and a facing
    lateral face, otherwise the mode is infeasible for this geometry.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    sensor = np.asarray(sensor_origin, dtype=float)
    local_sensor = box.to_box_frame(sensor)[0]
    if np.all(np.abs(local_sensor) <= np.asarray(box.dims) / 2):
        raise ValueError("sensor origin lies inside the box")

    facing = _facing_faces(box, sensor)
    l, w, h = box.dims
    x_face = next((f for f in facing if f < 2), None)
    y_face = next((f for f in facing if f >= 2), None)
    sx = 1.0 if x_face == 0 else -1.0
    sy = 1.0 if y_face == 2 else -1.0

    def world(local):
        return tuple(box.from_box_frame(np.asarray(local))[0])

    if mode == "head_tail_side":
        if x_face is None:
            raise InfeasibleModeError("no facing front/rear face")
        anchors = (world([sx * l / 2, 0.0, h / 2]),)
    elif mode == "body_side":
        if y_face is None:
            raise InfeasibleModeError("no facing lateral face")
        anchors = (world([0.0, sy * w / 2, h / 2]),)
    elif mode == "two_sides":
        if x_face is None or y_face is None:
            raise InfeasibleModeError(f"two_sides needs 2 facing faces, got {len(facing)}")
        anchors = (world([sx * l / 2, 0.0, h / 2]), world([0.0, sy * w / 2, h / 2]))
    else:  # corner_point: the top vertex shared by the two facing faces
        if x_face is None or y_face is None:
            raise InfeasibleModeError(f"corner_point needs 2 facing faces, got {len(facing)}")
        anchors = (world([sx * l / 2, sy * w / 2, h / 2]),)
    return AnchorSet(anchors, tuple(facing))


def feasible_modes(box: BoundingBox3D, sensor_origin) -> tuple[str, ...]:
    """The subset of MODES with a valid anchor for this box/sensor geometry."""
    out = []
    for mode in MODES:
        try:
            select_anchor(box, sensor_origin, mode)
        except InfeasibleModeError:
            continue
        out.append(mode)
    return tuple(out)


def _principal_axis_angle(xy: np.ndarray) -> float | None:
    """Orientation of the dominant horizontal axis; None if isotropic/degenerate."""
    if len(xy) < 2:
        return None
    centered = xy - xy.mean(axis=0)
    cov = centered.T @ centered / len(xy)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] - evals[0] <= 1e-12 * max(evals[1], 1.0):
        return None
    v = evecs[:, 1]
    return math.atan2(v[1], v[0])


def place_object(object_frame: PointCloud, anchor, box_yaw: float) -> PointCloud:
    """Align the object's principal horizontal axis to `box_yaw`, then move A to B.

    dz is half the vertical extent; A = centroid + (0, 0, dz) translates exactly
    onto the anchor B.  `box_yaw` is the direction of the alignment line,
    normally the attached face's tangent.  Alignment resolves only up to the
    axis sign, so the rotation applied is the minimal one (within +-90 deg).
    """
    if len(object_frame) == 0:
        raise ValueError("cannot place an empty object")
    xyz = object_frame.xyz
    centroid = object_frame.centroid()
    dz = 0.5 * (xyz[:, 2].max() - xyz[:, 2].min())

    angle = _principal_axis_angle(xyz[:, :2])
    if angle is not None:
        delta = (box_yaw - angle + math.pi / 2) % math.pi - math.pi / 2
        xyz = (xyz - centroid) @ yaw_matrix(delta).T + centroid

    a_point = centroid + np.array([0.0, 0.0, dz])
    return object_frame.with_xyz(xyz + (np.asarray(anchor, dtype=float) - a_point))


def rotate_spray(obj: PointCloud, angle_deg: float) -> PointCloud:
    """Rotate the object about the vertical axis through its centroid."""
    if not (-40.0 <= angle_deg <= 40.0):
        raise ValueError("spray angle must lie in [-40, 40] degrees")
    if angle_deg == 0.0 or len(obj) == 0:
        return obj
    centroid = obj.centroid()
    rot = yaw_matrix(math.radians(angle_deg))
    return obj.with_xyz((obj.xyz - centroid) @ rot.T + centroid)


def density_gate(obj: PointCloud, model: LaserModel, d_h: float, d_v: float,
                 azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN) -> PointCloud:
    """Keep the object points a simulated beam would register.

    A point survives iff its inclination is within d_v * (local ring pitch) of
    the nearest ring's beam and its azimuth is within d_h * (2 pi / W) of the
    nearest column's beam.  The retained set grows monotonically with each
    limit; 0.5 on both axes accepts everything a cell would ever own.
    """
    if not (0.0 <= d_h <= 0.5) or not (0.0 <= d_v <= 0.5):
        raise ValueError("d_h and d_v must lie in [0, 0.5]")
    if len(obj) == 0:
        return obj
    d_xy = np.hypot(obj.xyz[:, 0], obj.xyz[:, 1])
    # (N, R) inclination of each point as seen from each ring's origin height
    elev = np.arctan2(obj.xyz[:, 2][:, None] - model.heights[None, :], d_xy[:, None])
    dev_all = np.abs(elev - model.thetas[None, :])
    rows = np.argmin(dev_all, axis=1)
    dev_v = dev_all[np.arange(len(obj)), rows]

    phi = np.arctan2(obj.xyz[:, 1], obj.xyz[:, 0])
    pitch = model.azimuth_pitch
    frac = np.mod(phi - azimuth_origin, pitch)
    dev_h = np.minimum(frac, pitch - frac)

    keep = (dev_v <= d_v * model.ring_pitches()[rows]) & (dev_h <= d_h * pitch)
    return obj.select(keep)


def _anchor_tangents(box: BoundingBox3D, anchors: AnchorSet, mode: str) -> list[float]:
    # front/rear edges run across the width, lateral edges along the length;
    # the corner belongs to both faces, so it aligns with the car's heading
    if mode == "head_tail_side":
        return [box.yaw + math.pi / 2]
    if mode == "body_side":
        return [box.yaw]
    if mode == "two_sides":
        return [box.yaw + math.pi / 2, box.yaw]
    return [box.yaw]


@dataclass(frozen=True)
class FusedFrame:
    """One re-rendered output frame with its z-buffer and gate accounting."""

    cloud: PointCloud
    image: RangeImage
    scene_point_count: int          # merged indices below this are scene points
    object_points_pre_gate: int
    object_points_post_gate: int


def fuse_frame(scene: PointCloud, object_frame: PointCloud, box: BoundingBox3D,
               cfg: FusionConfig, model: LaserModel,
               azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN,
               anchor_set: AnchorSet | None = None) -> FusedFrame:
    """Place, rotate, gate, merge and re-render a single object frame."""
    if anchor_set is None:
        anchor_set = select_anchor(box, (0.0, 0.0, 0.0), cfg.mode)
    parts = []
    pre_gate = 0
    if len(object_frame) > 0:
        tangents = _anchor_tangents(box, anchor_set, cfg.mode)
        for anchor, tangent in zip(anchor_set.anchors, tangents):
            placed = place_object(object_frame, anchor, tangent)
            placed = rotate_spray(placed, cfg.spray_angle_deg)
            pre_gate += len(placed)
            parts.append(density_gate(placed, model, cfg.d_h, cfg.d_v, azimuth_origin))
    post_gate = sum(len(p) for p in parts)
    if pre_gate > 0 and post_gate == 0:
        warnings.warn(f"object fully gated out for frame {scene.frame_id!r}; "
                      "emitting a pure re-rendered scene")

    merged_xyz = np.vstack([scene.xyz] + [p.xyz for p in parts])
    merged_inten = np.concatenate([scene.intensity] + [p.intensity for p in parts])
    merged = PointCloud(merged_xyz, merged_inten, frame_id=scene.frame_id)
    image = project(merged, model, azimuth_origin)
    cloud = backproject(image)
    cloud = PointCloud(cloud.xyz, cloud.intensity, scene.frame_id, cloud.ring)
    return FusedFrame(cloud, image, len(scene), pre_gate, post_gate)


def fuse(scene: PointCloud, object_seq: SequenceSample, box: BoundingBox3D,
         cfg: FusionConfig, model: LaserModel,
         azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN) -> list[PointCloud]:
    """Fuse every sequence frame into the scene; returns K re-rendered clouds."""
    anchor_set = select_anchor(box, (0.0, 0.0, 0.0), cfg.mode)
    return [fuse_frame(scene, obj, box, cfg, model, azimuth_origin, anchor_set).cloud
            for obj in object_seq.frames]
