"""Range-image rendering of spinning-LiDAR scans with a per-laser repair model.

Each laser ring i is a beam of fixed inclination theta_i whose origin sits at
height h_i on the sensor axis, so a point on ring i satisfies
z = tan(theta_i) * d_xy + h_i.  Projection assigns every point to the ring with
the smallest residual against that line, bins azimuth into W columns, and keeps
the nearest return per cell.  Back-projection inverts the stored range d either
with a shared-origin approximation (all h_i treated as 0) or with the full
per-ring model

    d' = sqrt(d^2 - h_i^2 cos(theta_i)) - h_i sin(theta_i)
    x = d' cos(theta_i) cos(phi),  y = d' cos(theta_i) sin(phi),
    z = d' sin(theta_i) + h_i

where the radicand term cos(theta_i) can optionally be replaced by
cos^2(theta_i), which is the form that makes the round trip exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mistfuse.cloudcore import PointCloud

DEFAULT_AZIMUTH_BINS = 2048
DEFAULT_AZIMUTH_ORIGIN = -math.pi
MIN_RANGE = 0.1
# Guard for points constructed exactly on a bin boundary: atan2 round-off may
# land an on-beam azimuth infinitesimally below its column edge.
_BIN_EPS = 1e-9


class UnfittableRingError(ValueError):
    """A ring has too few points or no spread in d_xy to fit a laser line."""


@dataclass(frozen=True)
class LaserModel:
    """Per-ring (theta_i, h_i) beam table plus azimuth resolution and flags.

    Rings are ordered by strictly decreasing inclination (row 0 = top beam).
    `use_corrected_backprojection` off means back-projection ignores h_i
    entirely (shared-origin form); on means the per-ring equations above.
    `corrected_radicand` swaps the radicand's cos(theta) for cos^2(theta).
    """

    rings: tuple[tuple[float, float], ...]
    azimuth_bins: int = DEFAULT_AZIMUTH_BINS
    use_corrected_backprojection: bool = False
    corrected_radicand: bool = False

    def __post_init__(self):
        rings = tuple((float(t), float(h)) for t, h in self.rings)
        if not rings:
            raise ValueError("model needs at least one ring")
        thetas = [t for t, _ in rings]
        if len(thetas) > 1 and not all(a > b for a, b in zip(thetas, thetas[1:])):
            raise ValueError("ring inclinations must be strictly decreasing")
        if any(abs(h) >= 1.0 for _, h in rings):
            raise ValueError("|h_i| must be < 1 m")
        if self.azimuth_bins < 16:
            raise ValueError("azimuth_bins must be >= 16")
        object.__setattr__(self, "rings", rings)

    @property
    def ring_count(self) -> int:
        return len(self.rings)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([t for t, _ in self.rings])

    @property
    def heights(self) -> np.ndarray:
        return np.array([h for _, h in self.rings])

    @property
    def azimuth_pitch(self) -> float:
        return 2.0 * math.pi / self.azimuth_bins

    def ring_pitches(self) -> np.ndarray:
        """Local inter-ring inclination gap per ring (nearest-neighbor gap)."""
        th = self.thetas
        if len(th) == 1:
            return np.array([math.pi])
        gaps = np.abs(np.diff(th))
        out = np.empty(len(th))
        out[0] = gaps[0]
        out[-1] = gaps[-1]
        if len(th) > 2:
            out[1:-1] = np.minimum(gaps[:-1], gaps[1:])
        return out


@dataclass(frozen=True)
class RangeImage:
    """H x W range grid: depth in meters (0 = empty) and winning point index (-1 = empty)."""

    depth: np.ndarray
    source_index: np.ndarray
    model: LaserModel
    azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN
    dropped_count: int = 0

    def __post_init__(self):
        shape = (self.model.ring_count, self.model.azimuth_bins)
        if self.depth.shape != shape or self.source_index.shape != shape:
            raise ValueError(f"grids must have shape {shape}")
        filled = self.source_index >= 0
        if np.any(self.depth[filled] <= 0):
            raise ValueError("non-empty cells must store positive depth")
        if np.any(self.depth[~filled] != 0):
            raise ValueError("empty cells must store the 0 sentinel")
        d = np.asarray(self.depth, dtype=np.float64).copy()
        s = np.asarray(self.source_index, dtype=np.int64).copy()
        d.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "source_index", s)

    @property
    def filled_mask(self) -> np.ndarray:
        return self.source_index >= 0

    @property
    def filled_count(self) -> int:
        return int(self.filled_mask.sum())


def _spherical(xyz: np.ndarray):
    d = np.linalg.norm(xyz, axis=1)
    d_xy = np.hypot(xyz[:, 0], xyz[:, 1])
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    return d, d_xy, phi


def assign_rings(xyz: np.ndarray, model: LaserModel):
    """Row index per point by minimal |z - (tan(theta_i) d_xy + h_i)| residual.

    Returns (rows, keep_mask): points whose beam-relative inclination deviates
    from the assigned ring by more than one local ring pitch are flagged out.
    """
    _, d_xy, _ = _spherical(xyz)
    z = xyz[:, 2]
    th, hs = model.thetas, model.heights
    # (N, R) residuals against each ring's z = tan(theta) d_xy + h line
    pred = np.tan(th)[None, :] * d_xy[:, None] + hs[None, :]
    rows = np.argmin(np.abs(z[:, None] - pred), axis=1)
    elev = np.arctan2(z - hs[rows], d_xy)
    keep = np.abs(elev - th[rows]) <= model.ring_pitches()[rows]
    return rows, keep


def azimuth_cols(phi: np.ndarray, model: LaserModel,
                 azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN) -> np.ndarray:
    w = model.azimuth_bins
    frac = np.mod(phi - azimuth_origin, 2.0 * math.pi)
    return np.floor(frac * w / (2.0 * math.pi) + _BIN_EPS).astype(np.int64) % w


def project(cloud: PointCloud, model: LaserModel,
            azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN) -> RangeImage:
    """Render a cloud to a range image, keeping the nearest return per cell.

    Depth ties keep the lowest input index.  Points farther than one ring
    pitch from every beam are dropped and counted, not rendered.
    """
    if len(cloud) == 0:
        raise ValueError("cannot project an empty cloud")
    d, _, phi = _spherical(cloud.xyz)
    if d.min() <= MIN_RANGE:
        raise ValueError(f"all points must lie at range > {MIN_RANGE} m")
    rows, keep = assign_rings(cloud.xyz, model)
    cols = azimuth_cols(phi, model, azimuth_origin)
    dropped = int((~keep).sum())

    idx = np.nonzero(keep)[0]
    cells = rows[idx] * model.azimuth_bins + cols[idx]
    # stable winner per cell: nearest depth, then lowest input index
    order = np.lexsort((idx, d[idx], cells))
    cells, idx = cells[order], idx[order]
    first = np.ones(len(cells), dtype=bool)
    first[1:] = cells[1:] != cells[:-1]

    depth = np.zeros((model.ring_count, model.azimuth_bins))
    source = np.full((model.ring_count, model.azimuth_bins), -1, dtype=np.int64)
    win_cells, win_idx = cells[first], idx[first]
    depth.flat[win_cells] = d[win_idx]
    source.flat[win_cells] = win_idx
    return RangeImage(depth, source, model, azimuth_origin, dropped)


def backproject(image: RangeImage) -> PointCloud:
    """One point per filled cell, in row-major cell order; ring = row index.

    Intensity is not modeled by the range image, so output intensity is zero.
    """
    model = image.model
    rows, cols = np.nonzero(image.filled_mask)
    d = image.depth[rows, cols]
    if d.size and d.min() <= 0:
        raise ValueError("filled cells must have positive depth")
    th = model.thetas[rows]
    phi = image.azimuth_origin + cols * model.azimuth_pitch
    if model.use_corrected_backprojection:
        h = model.heights[rows]
        cos_term = np.cos(th) ** 2 if model.corrected_radicand else np.cos(th)
        # radicand can dip below 0 only for returns closer than the ring offset
        radicand = np.maximum(d * d - h * h * cos_term, 0.0)
        d_prime = np.sqrt(radicand) - h * np.sin(th)
        x = d_prime * np.cos(th) * np.cos(phi)
        y = d_prime * np.cos(th) * np.sin(phi)
        z = d_prime * np.sin(th) + h
    else:
        x = d * np.cos(th) * np.cos(phi)
        y = d * np.cos(th) * np.sin(phi)
        z = d * np.sin(th)
    xyz = np.column_stack([x, y, z])
    return PointCloud(xyz, np.zeros(len(xyz)), ring=rows.astype(np.int32))


def scan_unfold(cloud: PointCloud) -> PointCloud:
    """Tag capture-ordered points with ring indices at azimuth wraparounds.

    A new ring starts wherever the azimuth jumps backward by more than pi
    (the sweep wrapping from +pi to -pi).  Already-tagged clouds pass through.
    """
    if cloud.ring is not None:
        return cloud
    if len(cloud) == 0:
        raise ValueError("cannot unfold an empty cloud")
    phi = np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0])
    wraps = np.diff(phi) < -math.pi
    ring = np.concatenate([[0], np.cumsum(wraps)]).astype(np.int32)
    return PointCloud(cloud.xyz, cloud.intensity, cloud.frame_id, ring)


def fit_laser_model(cloud: PointCloud, azimuth_bins: int = DEFAULT_AZIMUTH_BINS,
                    use_corrected_backprojection: bool = True,
                    corrected_radicand: bool = True) -> LaserModel:
    """Least-squares (theta_i, h_i) per ring from z = tan(theta) d_xy + h.

    The cloud must be ring-tagged (see scan_unfold).  Rings with fewer than
    10 points or no d_xy spread raise UnfittableRingError.
    """
    if cloud.ring is None:
        raise ValueError("cloud must be ring-tagged; run scan_unfold first")
    d_xy = np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1])
    z = cloud.xyz[:, 2]
    fitted = []
    for ring_id in np.unique(cloud.ring):
        sel = cloud.ring == ring_id
        if sel.sum() < 10:
            raise UnfittableRingError(f"ring {ring_id}: only {int(sel.sum())} points")
        if np.ptp(d_xy[sel]) < 1e-12:
            raise UnfittableRingError(f"ring {ring_id}: all points at one d_xy")
        slope, intercept = np.polyfit(d_xy[sel], z[sel], 1)
        fitted.append((math.atan(slope), float(intercept)))
    fitted.sort(key=lambda th_h: -th_h[0])
    return LaserModel(tuple(fitted), azimuth_bins,
                      use_corrected_backprojection, corrected_radicand)


def roundtrip_loss(cloud: PointCloud, model: LaserModel,
                   azimuth_origin: float = DEFAULT_AZIMUTH_ORIGIN):
    """(lost_count, lost_fraction) of points that do not survive projection."""
    if len(cloud) == 0:
        return 0, 0.0
    image = project(cloud, model, azimuth_origin)
    lost = len(cloud) - image.filled_count
    return lost, lost / len(cloud)


# --- model and debug-image files ------------------------------------------------------

def save_model(path, model: LaserModel) -> None:
    """Flat key=value sidecar: ring table plus resolution and flags."""
    lines = [
        f"rings={model.ring_count}",
        f"azimuth_bins={model.azimuth_bins}",
        f"use_corrected_backprojection={'true' if model.use_corrected_backprojection else 'false'}",
        f"corrected_radicand={'true' if model.corrected_radicand else 'false'}",
    ]
    for i, (theta, h) in enumerate(model.rings):
        lines.append(f"theta_{i}={theta!r}")
        lines.append(f"h_{i}={h!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> LaserModel:
    kv = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        count = int(kv["rings"])
        rings = tuple((float(kv[f"theta_{i}"]), float(kv[f"h_{i}"])) for i in range(count))
        return LaserModel(
            rings,
            azimuth_bins=int(kv.get("azimuth_bins", DEFAULT_AZIMUTH_BINS)),
            use_corrected_backprojection=kv.get("use_corrected_backprojection", "false") == "true",
            corrected_radicand=kv.get("corrected_radicand", "false") == "true",
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing model key {exc}") from exc


def write_range_pgm(path, image: RangeImage) -> None:
    """16-bit binary PGM of depth in centimeters; 0 marks empty cells."""
    cm = np.round(image.depth * 100.0)
    cm[~image.filled_mask] = 0
    grid = np.clip(cm, 0, 65535).astype(">u2")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(grid.tobytes())
