"""K-frame random-object (water mist / smoke) point-cloud sequences.

Sequences either come from recorded captures (load_rolid) or from a procedural
surrogate generator that keeps the content/motion split: a content seed fixes
the invariant shape traits (extent jitter, plume orientation, drift direction)
while a motion seed drives the per-frame resampling, advection and dispersion.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mistfuse.cloudcore import PointCloud, chamfer, hausdorff, read_frame, yaw_matrix

KINDS = ("water_mist", "smoke")


@dataclass(frozen=True)
class GeneratorLatents:
    """Seeds and lengths: content fixes the sequence's invariants, motion its evolution."""

    content_seed: int
    motion_seed: int
    K: int = 3
    N: int = 16   # pre-reduction sampling length, carried as metadata

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.N < self.K:
            raise ValueError("N must be >= K")


@dataclass(frozen=True)
class PlumeParams:
    """Shape and motion statistics of a generated plume."""

    base_extent: tuple[float, float, float]
    point_count: int = 1024
    drift_velocity: float = 0.15      # m/frame
    dispersion_rate: float = 0.05     # m/frame extent growth
    density_falloff: float = 1.0      # 0 = plain Gaussian, larger = core-heavy

    def __post_init__(self):
        if min(self.base_extent) <= 0:
            raise ValueError("extents must be strictly positive")
        if self.point_count < 64:
            raise ValueError("point_count must be >= 64")
        if self.drift_velocity < 0 or self.dispersion_rate < 0 or self.density_falloff < 0:
            raise ValueError("rates must be non-negative")


@dataclass(frozen=True)
class SequenceSample:
    """K object-only frames plus the object kind.

    Generator and ingestion outputs always carry non-empty frames; empty
    frames are tolerated by the type so benign (no-object) runs can reuse
    the same pipeline.
    """

    frames: tuple[PointCloud, ...]
    kind: str = "water_mist"

    def __post_init__(self):
        if not self.frames:
            raise ValueError("sequence needs at least one frame")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        object.__setattr__(self, "frames", tuple(self.frames))

    @property
    def K(self) -> int:
        return len(self.frames)


def default_params(kind: str) -> PlumeParams:
    """Per-kind defaults: smoke spreads wider, drifts slower, and is sparser."""
    if kind == "water_mist":
        return PlumeParams(base_extent=(1.0, 0.5, 0.4), point_count=1024,
                           drift_velocity=0.15, dispersion_rate=0.05,
                           density_falloff=1.0)
    if kind == "smoke":
        return PlumeParams(base_extent=(1.5, 1.0, 0.8), point_count=768,
                           drift_velocity=0.08, dispersion_rate=0.08,
                           density_falloff=0.5)
    raise ValueError(f"kind must be one of {KINDS}")


def sample_sequence(latents: GeneratorLatents, params: PlumeParams,
                    kind: str = "water_mist") -> SequenceSample:
    """Draw a K-frame plume sequence; identical inputs reproduce it bit-for-bit.

    Frame 1 is an anisotropic Gaussian blob (axes and drift direction fixed by
    the content seed) concentrated toward its core by the density falloff;
    frame k adds (k-1) steps of drift along the content direction and of
    extent growth, resampled from the running motion stream.
    """
    content = np.random.default_rng(latents.content_seed)
    drift_angle = content.uniform(-math.pi, math.pi)
    drift_dir = np.array([math.cos(drift_angle), math.sin(drift_angle), 0.0])
    extent = np.asarray(params.base_extent) * content.uniform(0.85, 1.15, size=3)
    plume_yaw = content.uniform(-math.pi, math.pi)

    motion = np.random.default_rng(latents.motion_seed)
    frames = []
    for k in range(latents.K):
        sigma = extent + params.dispersion_rate * k
        raw = motion.normal(0.0, 1.0, size=(params.point_count, 3))
        if params.density_falloff > 0:
            shrink = motion.uniform(0.0, 1.0, size=(params.point_count, 1))
            raw = raw * shrink ** params.density_falloff
        pts = (raw * sigma) @ yaw_matrix(plume_yaw).T
        pts += params.drift_velocity * k * drift_dir
        inten = motion.uniform(0.05, 0.35, size=params.point_count)
        frames.append(PointCloud(pts, inten, frame_id=f"gen_{k}"))
    return SequenceSample(tuple(frames), kind)


_FRAME_RE = re.compile(r"^frame_\d{6}\.bin$")


def _read_meta(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"{path}: unreadable metadata ({exc})") from exc
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed metadata line {line!r}")
        kv[key.strip()] = value.strip()
    for key in ("kind", "pressure_mpa", "distance_m"):
        if key not in kv:
            raise ValueError(f"{path}: missing metadata key {key!r}")
    if kv["kind"] not in KINDS:
        raise ValueError(f"{path}: kind must be one of {KINDS}")
    float(kv["pressure_mpa"])
    float(kv["distance_m"])
    return kv


def load_rolid(path) -> SequenceSample:
    """Load `frame_%06d.bin` files plus `meta.txt` from a recording directory.

    Frames are taken in filename order and each is re-centered to its own
    centroid; empty frames and unreadable metadata are rejected by filename.
    """
    root = Path(path)
    frame_paths = sorted(p for p in root.iterdir() if _FRAME_RE.match(p.name))
    if not frame_paths:
        raise ValueError(f"{root}: no frame_*.bin files")
    meta = _read_meta(root / "meta.txt")
    frames = []
    for p in frame_paths:
        pc = read_frame(p)
        if len(pc) == 0:
            raise ValueError(f"{p}: empty frame")
        frames.append(pc.with_xyz(pc.xyz - pc.centroid()))
    return SequenceSample(tuple(frames), meta["kind"])


@dataclass(frozen=True)
class RealismReport:
    """Per-frame (hausdorff, chamfer) pairs between generated and reference."""

    rows: tuple[tuple[float, float], ...]

    @property
    def mean_hausdorff(self) -> float:
        return float(np.mean([r[0] for r in self.rows]))

    @property
    def mean_chamfer(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    def as_table(self) -> str:
        lines = ["frame\thausdorff\tchamfer"]
        for i, (h, c) in enumerate(self.rows):
            lines.append(f"{i}\t{h:.4f}\t{c:.4f}")
        lines.append(f"mean\t{self.mean_hausdorff:.4f}\t{self.mean_chamfer:.4f}")
        return "\n".join(lines)


def realism_report(generated: SequenceSample, reference: SequenceSample) -> RealismReport:
    """Frame-by-frame shape agreement between two equal-length sequences."""
    if generated.K != reference.K:
        raise ValueError(f"sequence lengths differ: {generated.K} vs {reference.K}")
    rows = tuple((hausdorff(g, r), chamfer(g, r))
                 for g, r in zip(generated.frames, reference.frames))
    return RealismReport(rows)
