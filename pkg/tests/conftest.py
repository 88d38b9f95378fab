"""Shared synthetic fixtures: beam-exact clouds and a KITTI-like laser model."""

import math

import numpy as np

from mistfuse.cloudcore import PointCloud
from mistfuse.rangesim import DEFAULT_AZIMUTH_ORIGIN, LaserModel


def kitti_like_model(rings=64, azimuth_bins=2048, h_max=0.2, seed=0,
                     use_corrected_backprojection=True, corrected_radicand=True):
    """Uniform inclination fan from +2 deg down to -24.8 deg with random h_i."""
    rng = np.random.default_rng(seed)
    thetas = np.linspace(math.radians(2.0), math.radians(-24.8), rings)
    hs = rng.uniform(-h_max, h_max, size=rings)
    return LaserModel(tuple(zip(thetas, hs)), azimuth_bins,
                      use_corrected_backprojection, corrected_radicand)


def beam_point(model, ring, col, s, azimuth_origin=DEFAULT_AZIMUTH_ORIGIN):
    """Point at beam-length s along ring `ring` through column `col`'s azimuth."""
    theta, h = model.rings[ring]
    phi = azimuth_origin + col * model.azimuth_pitch
    return (s * math.cos(theta) * math.cos(phi),
            s * math.cos(theta) * math.sin(phi),
            h + s * math.sin(theta))


def beam_cloud(model, points_per_ring, rng, s_range=(5.0, 80.0),
               azimuth_origin=DEFAULT_AZIMUTH_ORIGIN):
    """Cloud generated exactly on beams, one point per distinct (ring, col) cell."""
    xyz = []
    rings = []
    for ring in range(model.ring_count):
        cols = rng.choice(model.azimuth_bins, size=points_per_ring, replace=False)
        ss = rng.uniform(*s_range, size=points_per_ring)
        for col, s in zip(cols, ss):
            xyz.append(beam_point(model, ring, int(col), float(s), azimuth_origin))
            rings.append(ring)
    return PointCloud(np.array(xyz), np.zeros(len(xyz)),
                      ring=np.array(rings, dtype=np.int32))


def curtain_object(half_width, height=1.3, y_step=0.015, z_step=0.05):
    """Thin vertical curtain in the y-z plane, dense enough to own every cell it
    overlaps; its principal horizontal axis is y, so head/tail alignment is a no-op."""
    ys = np.arange(-half_width, half_width + 1e-9, y_step)
    zs = np.arange(0.0, height + 1e-9, z_step)
    yy, zz = np.meshgrid(ys, zs)
    xyz = np.column_stack([np.zeros(yy.size), yy.ravel(), zz.ravel()])
    return PointCloud(xyz, np.full(len(xyz), 0.1))
