"""Attack scoring: 3D IoU, attack-success rate, occlusion ratio, parameter sweeps.

A vehicle counts as initially detected when some baseline detection clears both
the confidence gate (> 0.5) and the IoU gate (> 0.7) under greedy one-to-one
matching; the attack succeeds on it when no adversarial detection clears both
gates against it anymore.  ASR pools successes over initially-detected vehicle
instances and is reported as undefined (not 0) when nothing was detected.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from shapely.geometry import Polygon

from mistfuse.cloudcore import BoundingBox3D, PointCloud, crop_to_box
from mistfuse.fusion import (
    DEFAULT_AZIMUTH_ORIGIN,
    FusionConfig,
    InfeasibleModeError,
    fuse_frame,
    select_anchor,
)
from mistfuse.objectgen import SequenceSample
from mistfuse.rangesim import LaserModel, backproject, project

VEHICLE_CLASS = "Car"
CONF_THRESH = 0.5
IOU_THRESH = 0.7


@dataclass(frozen=True)
class Detection:
    """One predicted box with its confidence score."""

    box: BoundingBox3D
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class DetectionSet:
    """All detections of one frame from one detector."""

    frame_id: str
    detections: tuple[Detection, ...]
    detector_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


def iou3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """Volumetric IoU: clipped BEV polygon overlap times vertical overlap."""
    inter_area = Polygon(a.bev_corners()).intersection(Polygon(b.bev_corners())).area
    if inter_area <= 0.0:
        return 0.0
    dz = min(a.z_top, b.z_top) - max(a.center[2] - a.dims[2] / 2,
                                     b.center[2] - b.dims[2] / 2)
    if dz <= 0.0:
        return 0.0
    inter = inter_area * dz
    vol_a = a.dims[0] * a.dims[1] * a.dims[2]
    vol_b = b.dims[0] * b.dims[1] * b.dims[2]
    return inter / (vol_a + vol_b - inter)


def _vehicle_gt_indices(gt: Sequence[BoundingBox3D]) -> list[int]:
    return [i for i, box in enumerate(gt) if box.label == VEHICLE_CLASS]


def _greedy_match(detections: Sequence[Detection], gt: Sequence[BoundingBox3D],
                  conf_thresh: float, iou_thresh: float) -> set[int]:
    """GT indices matched one-to-one by confidence-descending greedy best-IoU."""
    candidates = _vehicle_gt_indices(gt)
    order = sorted((i for i, d in enumerate(detections)
                    if d.confidence > conf_thresh and d.box.label == VEHICLE_CLASS),
                   key=lambda i: (-detections[i].confidence, i))
    matched: set[int] = set()
    for di in order:
        best, best_iou = None, iou_thresh
        for gi in candidates:
            if gi in matched:
                continue
            iou = iou3d(detections[di].box, gt[gi])
            if iou > best_iou:
                best, best_iou = gi, iou
        if best is not None:
            matched.add(best)
    return matched


@dataclass(frozen=True)
class AttackResult:
    """Per-vehicle outcomes for one baseline/adversarial frame pair."""

    vehicle_flags: tuple[tuple[int, bool], ...]   # (gt index, attack succeeded)
    detected: int
    successes: int

    @property
    def asr(self) -> float | None:
        if self.detected == 0:
            return None
        return self.successes / self.detected


def attack_success(baseline: DetectionSet, adversarial: DetectionSet,
                   gt: Sequence[BoundingBox3D], conf_thresh: float = CONF_THRESH,
                   iou_thresh: float = IOU_THRESH) -> AttackResult:
    """Score one frame pair; adversarial frame ids may carry a `_<k>` suffix.

    A GT vehicle is initially detected iff a baseline detection clears both
    thresholds for it under greedy matching; the attack succeeds on it iff no
    adversarial detection clears both thresholds against it.
    """
    if (baseline.frame_id != adversarial.frame_id
            and not adversarial.frame_id.startswith(baseline.frame_id + "_")):
        raise ValueError(f"frame mismatch: {baseline.frame_id!r} vs "
                         f"{adversarial.frame_id!r}")
    initially = sorted(_greedy_match(baseline.detections, gt, conf_thresh, iou_thresh))
    flags = []
    successes = 0
    for gi in initially:
        still = any(d.confidence > conf_thresh and d.box.label == VEHICLE_CLASS
                    and iou3d(d.box, gt[gi]) > iou_thresh
                    for d in adversarial.detections)
        flags.append((gi, not still))
        successes += not still
    return AttackResult(tuple(flags), len(initially), successes)


def occlusion_ratio(before: PointCloud, after: PointCloud, box: BoundingBox3D,
                    margin: float = 0.0) -> float:
    """1 - (points in box after) / (points in box before), clamped to [0, 1]."""
    n_before = len(crop_to_box(before, box, margin))
    if n_before == 0:
        raise ValueError("no points inside the box before occlusion")
    n_after = len(crop_to_box(after, box, margin))
    return min(1.0, max(0.0, 1.0 - n_after / n_before))


# --- detectors -------------------------------------------------------------------------

# A detector maps (frame cloud, frame id, GT boxes) to a DetectionSet.
Detector = Callable[[PointCloud, str, Sequence[BoundingBox3D]], DetectionSet]


def mock_detector(threshold: int = 20, margin: float = 0.0,
                  name: str = "mock") -> Detector:
    """Point-count detector: a GT box is detected iff it holds >= threshold
    points, with confidence min(1, points / (2 * threshold))."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")

    def detect(cloud: PointCloud, frame_id: str,
               gt: Sequence[BoundingBox3D]) -> DetectionSet:
        dets = []
        for box in gt:
            n = len(crop_to_box(cloud, box, margin))
            if n >= threshold:
                dets.append(Detection(box, min(1.0, n / (2.0 * threshold))))
        return DetectionSet(frame_id, tuple(dets), name)

    return detect


def file_detector(directory) -> Detector:
    """Serve pre-computed interchange files named `<frame_id>.json`."""
    root = Path(directory)

    def detect(cloud: PointCloud, frame_id: str,
               gt: Sequence[BoundingBox3D]) -> DetectionSet:
        path = root / f"{frame_id}.json"
        if not path.exists():
            raise ValueError(f"missing detection file for frame {frame_id!r}: {path}")
        return read_detections(path)

    return detect


# --- detection interchange files -------------------------------------------------------

_BOX_KEYS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "score", "class")


def read_detections(path) -> DetectionSet:
    """Parse one interchange JSON file; unknown box fields only warn."""
    data = json.loads(Path(path).read_text())
    for key in ("frame_id", "detector", "boxes"):
        if key not in data:
            raise ValueError(f"{path}: missing {key!r}")
    dets = []
    for i, rec in enumerate(data["boxes"]):
        missing = [k for k in _BOX_KEYS if k not in rec]
        if missing:
            raise ValueError(f"{path}: box {i} missing {missing}")
        extra = sorted(set(rec) - set(_BOX_KEYS))
        if extra:
            warnings.warn(f"{path}: box {i} has unknown fields {extra}")
        yaw = float(rec["yaw"])
        if not (-np.pi < yaw <= np.pi):
            warnings.warn(f"{path}: box {i} yaw {yaw} normalized into (-pi, pi]")
            yaw = float((yaw - np.pi) % (-2 * np.pi) + np.pi)
        box = BoundingBox3D((float(rec["cx"]), float(rec["cy"]), float(rec["cz"])),
                            (float(rec["l"]), float(rec["w"]), float(rec["h"])),
                            yaw, str(rec["class"]))
        dets.append(Detection(box, float(rec["score"])))
    return DetectionSet(str(data["frame_id"]), tuple(dets), str(data["detector"]))


def write_detections(path, ds: DetectionSet) -> None:
    boxes = []
    for d in ds.detections:
        cx, cy, cz = d.box.center
        l, w, h = d.box.dims
        boxes.append({"cx": cx, "cy": cy, "cz": cz, "l": l, "w": w, "h": h,
                      "yaw": d.box.yaw, "score": d.confidence, "class": d.box.label})
    payload = {"frame_id": ds.frame_id, "detector": ds.detector_name, "boxes": boxes}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# --- parameter sweep -------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    """Axes of the fusion-parameter grid, iterated mode-major."""

    modes: tuple[str, ...]
    d_hs: tuple[float, ...]
    d_vs: tuple[float, ...]
    angles_deg: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if not (self.modes and self.d_hs and self.d_vs and self.angles_deg):
            raise ValueError("every grid axis needs at least one value")

    def cells(self):
        for mode in self.modes:
            for d_h in self.d_hs:
                for d_v in self.d_vs:
                    for angle in self.angles_deg:
                        yield FusionConfig(mode, d_h, d_v, angle)


@dataclass(frozen=True)
class SweepCell:
    """One grid cell's pooled outcome."""

    mode: str
    d_h: float
    d_v: float
    angle_deg: float
    frames: int
    detected: int
    successes: int

    @property
    def asr(self) -> float | None:
        if self.detected == 0:
            return None
        return self.successes / self.detected


@dataclass(frozen=True)
class SweepResult:
    cells: tuple[SweepCell, ...]

    @property
    def argmax_cell(self) -> SweepCell | None:
        """First cell attaining the maximum defined ASR; None if all undefined."""
        best = None
        for cell in self.cells:
            if cell.asr is not None and (best is None or cell.asr > best.asr):
                best = cell
        return best

    def to_csv(self) -> str:
        lines = ["mode,d_h,d_v,angle_deg,frames,detected,successes,asr"]
        for c in self.cells:
            asr = "NA" if c.asr is None else f"{c.asr:.6f}"
            lines.append(f"{c.mode},{c.d_h:g},{c.d_v:g},{c.angle_deg:g},"
                         f"{c.frames},{c.detected},{c.successes},{asr}")
        return "\n".join(lines) + "\n"


def sweep(scenes: Sequence[PointCloud], seq: SequenceSample,
          boxes: Mapping[str, BoundingBox3D], grid: SweepGrid, detector: Detector,
          model: LaserModel, azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN,
          conf_thresh: float = CONF_THRESH, iou_thresh: float = IOU_THRESH) -> SweepResult:
    """Fuse and score every grid cell over all scene frames and sequence frames.

    Baselines are the re-rendered scenes (project -> backproject), so a benign
    fusion compares bit-identical geometry.  Frames whose target box makes a
    mode infeasible are skipped for that cell.
    """
    for scene in scenes:
        if scene.frame_id not in boxes:
            raise ValueError(f"no target box for frame {scene.frame_id!r}")
    rendered = {s.frame_id: backproject(project(s, model, azimuth_origin))
                for s in scenes}
    rendered = {fid: PointCloud(c.xyz, c.intensity, fid, c.ring)
                for fid, c in rendered.items()}
    baselines = {fid: detector(rendered[fid], fid, [boxes[fid]]) for fid in rendered}

    cells = []
    for cfg in grid.cells():
        frames = detected = successes = 0
        for scene in scenes:
            fid = scene.frame_id
            box = boxes[fid]
            try:
                anchor_set = select_anchor(box, (0.0, 0.0, 0.0), cfg.mode)
            except InfeasibleModeError:
                continue
            for k, obj in enumerate(seq.frames):
                fused = fuse_frame(scene, obj, box, cfg, model, azimuth_origin,
                                   anchor_set).cloud
                adv_id = f"{fid}_{k}"
                adv = detector(PointCloud(fused.xyz, fused.intensity, adv_id,
                                          fused.ring), adv_id, [box])
                result = attack_success(baselines[fid], adv, [box],
                                        conf_thresh, iou_thresh)
                frames += 1
                detected += result.detected
                successes += result.successes
        cells.append(SweepCell(cfg.mode, cfg.d_h, cfg.d_v, cfg.spray_angle_deg,
                               frames, detected, successes))
    return SweepResult(tuple(cells))
