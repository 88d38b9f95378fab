"""Anchor selection, placement, spray rotation, density gating and fusion tests."""

import math

import numpy as np
import pytest
from conftest import curtain_object, kitti_like_model

from mistfuse.cloudcore import BoundingBox3D, PointCloud, crop_to_box
from mistfuse.fusion import (
    AnchorSet,
    FusionConfig,
    InfeasibleModeError,
    MODES,
    check_config_for_dataset,
    density_gate,
    feasible_modes,
    fuse,
    fuse_frame,
    load_config,
    place_object,
    rotate_spray,
    save_config,
    select_anchor,
)
from mistfuse.objectgen import SequenceSample
from mistfuse.rangesim import backproject, project


def cloud(xyz, **kw):
    xyz = np.atleast_2d(np.asarray(xyz, dtype=float))
    return PointCloud(xyz, np.zeros(len(xyz)), **kw)


# --- oracles ---------------------------------------------------------------------------

def oracle_facing(box, sensor):
    """Per-face outward-normal dot product test via explicit trig."""
    cx, cy, _ = box.center
    l, w, _ = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    normals = {0: (c, s), 1: (-c, -s), 2: (-s, c), 3: (s, -c)}
    halves = {0: l / 2, 1: l / 2, 2: w / 2, 3: w / 2}
    out = []
    for face, (nx, ny) in normals.items():
        fx, fy = cx + nx * halves[face], cy + ny * halves[face]
        tx, ty = sensor[0] - fx, sensor[1] - fy
        norm = math.hypot(tx, ty) or 1.0
        if (nx * tx + ny * ty) / norm > 1e-12:
            out.append(face)
    return out


def principal_angle(xy):
    centered = xy - xy.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered)
    v = evecs[:, -1]
    return math.atan2(v[1], v[0])


def on_top_rectangle(box, p, tol=1e-9):
    local = box.to_box_frame(np.asarray(p))[0]
    l, w, h = box.dims
    on_top = abs(local[2] - h / 2) <= tol
    on_x_edge = abs(abs(local[0]) - l / 2) <= tol and abs(local[1]) <= w / 2 + tol
    on_y_edge = abs(abs(local[1]) - w / 2) <= tol and abs(local[0]) <= l / 2 + tol
    return on_top and (on_x_edge or on_y_edge)


# --- select_anchor ---------------------------------------------------------------------

def test_head_tail_anchor_axis_aligned():
    box = BoundingBox3D((10.0, 0.0, 0.0), (4.0, 1.8, 1.5), 0.0)
    got = select_anchor(box, (0.0, 0.0, 0.0), "head_tail_side")
    assert got.facing_faces == (1,)
    assert np.allclose(got.anchors[0], (8.0, 0.0, 0.75), atol=1e-12)


def test_yawed_45_box_has_two_facing_faces_and_shared_corner():
    box = BoundingBox3D((10.0, 0.0, 0.0), (4.0, 1.8, 1.5), math.pi / 4)
    got = select_anchor(box, (0.0, 0.0, 0.0), "corner_point")
    assert sorted(got.facing_faces) == oracle_facing(box, (0.0, 0.0))
    assert len(got.facing_faces) == 2
    # shared corner: rear (-x) and left (+y) in the box frame
    local = box.to_box_frame(np.asarray(got.anchors[0]))[0]
    assert np.allclose(local, (-2.0, 0.9, 0.75), atol=1e-9)


def test_side_on_feasibility():
    box = BoundingBox3D((0.0, 10.0, 0.0), (4.0, 1.8, 1.5), 0.0)
    assert feasible_modes(box, (0, 0, 0)) == ("body_side",)
    got = select_anchor(box, (0, 0, 0), "body_side")
    assert got.facing_faces == (3,)
    assert np.allclose(got.anchors[0], (0.0, 9.1, 0.75), atol=1e-12)
    for mode in ("head_tail_side", "two_sides", "corner_point"):
        with pytest.raises(InfeasibleModeError):
            select_anchor(box, (0, 0, 0), mode)


def test_head_on_feasibility():
    box = BoundingBox3D((12.0, 0.0, -0.4), (4.0, 1.8, 1.5), 0.0)
    assert feasible_modes(box, (0, 0, 0)) == ("head_tail_side",)


def test_facing_matches_oracle_random():
    rng = np.random.default_rng(70)
    for _ in range(50):
        box = BoundingBox3D(tuple(rng.uniform(-20, 20, 3)),
                            tuple(rng.uniform(1, 5, 3)), rng.uniform(-3, 3))
        sensor = rng.uniform(-30, 30, 3)
        local = box.to_box_frame(sensor)[0]
        if np.all(np.abs(local) <= np.asarray(box.dims) / 2 + 0.5):
            continue  # keep clearly outside
        try:
            got = select_anchor(box, sensor, "two_sides")
        except InfeasibleModeError:
            assert len(oracle_facing(box, sensor)) < 2
            continue
        assert sorted(got.facing_faces) == oracle_facing(box, sensor)
        for anchor in got.anchors:
            assert on_top_rectangle(box, anchor)


def test_two_sides_anchor_order_and_top_rectangle():
    box = BoundingBox3D((10.0, 5.0, 0.0), (4.0, 1.8, 1.5), 0.3)
    got = select_anchor(box, (0, 0, 0), "two_sides")
    assert len(got.anchors) == 2
    # first anchor on a front/rear edge, second on a lateral edge
    loc0 = box.to_box_frame(np.asarray(got.anchors[0]))[0]
    loc1 = box.to_box_frame(np.asarray(got.anchors[1]))[0]
    assert abs(abs(loc0[0]) - 2.0) < 1e-9 and abs(loc0[1]) < 1e-9
    assert abs(abs(loc1[1]) - 0.9) < 1e-9 and abs(loc1[0]) < 1e-9


def test_sensor_inside_box_rejected():
    box = BoundingBox3D((0.0, 0.0, 0.0), (4.0, 4.0, 4.0), 0.0)
    with pytest.raises(ValueError):
        select_anchor(box, (0.5, 0.5, 0.5), "head_tail_side")


def test_facing_scale_invariance():
    rng = np.random.default_rng(71)
    for _ in range(20):
        center = rng.uniform(-15, 15, 3)
        dims = rng.uniform(1, 4, 3)
        yaw = rng.uniform(-3, 3)
        sensor = rng.uniform(-25, 25, 3)
        faces = None
        for scale in (1.0, 3.0, 17.0):
            box = BoundingBox3D(tuple(center * scale), tuple(dims * scale), yaw)
            local = box.to_box_frame(sensor * scale)[0]
            if np.any(np.abs(local) <= np.asarray(box.dims) / 2):
                break
            try:
                got = select_anchor(box, sensor * scale, "two_sides")
                now = sorted(got.facing_faces)
            except InfeasibleModeError:
                now = "infeasible"
            assert faces is None or now == faces
            faces = now


# --- place_object ----------------------------------------------------------------------

def test_delta_z_is_half_extent():
    obj = cloud([[0, 0, 1.0], [0.5, 0, 3.0], [1, 0.2, 2.0]])
    placed = place_object(obj, (5.0, 5.0, 5.0), 0.0)
    # A = centroid + (0,0,1) must land exactly on B
    assert np.allclose(placed.centroid() + [0, 0, 1.0], [5, 5, 5], atol=1e-12)


def test_topmost_point_hits_anchor_height_for_symmetric_cloud():
    rng = np.random.default_rng(80)
    half = rng.uniform(-1, 1, size=(200, 3))
    xyz = np.vstack([half, -half])  # symmetric in all axes about origin
    placed = place_object(cloud(xyz), (3.0, -2.0, 4.0), 0.7)
    assert placed.xyz[:, 2].max() == pytest.approx(4.0, abs=1e-9)


def test_alignment_to_target_direction():
    rng = np.random.default_rng(81)
    xyz = np.column_stack([rng.normal(0, 2.0, 400), rng.normal(0, 0.2, 400),
                           rng.normal(0, 0.3, 400)])
    target = 0.7
    placed = place_object(cloud(xyz), (10.0, 0.0, 1.0), target)
    got = principal_angle(placed.xyz[:, :2])
    assert min(abs(got - target), abs(abs(got - target) - math.pi)) < 1e-6


def test_alignment_is_minimal_rotation():
    # already aligned modulo pi: no rotation, placement is a pure translation
    rng = np.random.default_rng(82)
    xyz = np.column_stack([rng.normal(0, 2.0, 300), rng.normal(0, 0.1, 300),
                           rng.normal(0, 0.1, 300)])
    obj = cloud(xyz)
    ang = principal_angle(xyz[:, :2])
    placed = place_object(obj, (4.0, 4.0, 4.0), ang + math.pi)
    shift = placed.xyz - obj.xyz
    assert np.allclose(shift, shift[0], atol=1e-9)


def test_placement_inverse_translation_recovers_original():
    rng = np.random.default_rng(83)
    xyz = np.column_stack([rng.normal(0, 2.0, 100), rng.normal(0, 0.3, 100),
                           rng.normal(0, 0.5, 100)])
    obj = cloud(xyz)
    anchor = np.array([7.0, -1.0, 2.5])
    placed = place_object(obj, anchor, principal_angle(xyz[:, :2]))
    centroid = obj.centroid()
    dz = 0.5 * (xyz[:, 2].max() - xyz[:, 2].min())
    back = placed.xyz - (anchor - (centroid + [0, 0, dz]))
    assert np.allclose(back, xyz, atol=1e-12)


def test_single_point_and_flat_objects():
    placed = place_object(cloud([[1.0, 2.0, 3.0]]), (5.0, 6.0, 7.0), 0.3)
    assert np.allclose(placed.xyz, [[5.0, 6.0, 7.0]], atol=1e-12)  # dz = 0
    flat = cloud([[0, 0, 1.0], [1, 0, 1.0], [0, 1, 1.0]])
    placed = place_object(flat, (0.0, 0.0, 0.0), 0.0)
    # all z equal: dz = 0, so the centroid plane itself lands on the anchor
    assert placed.xyz[:, 2] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        place_object(PointCloud(np.zeros((0, 3)), np.zeros(0)), (0, 0, 0), 0.0)


# --- rotate_spray ----------------------------------------------------------------------

def test_rotate_spray_identity_and_inverse():
    rng = np.random.default_rng(84)
    obj = cloud(rng.uniform(-2, 2, size=(50, 3)))
    assert rotate_spray(obj, 0.0) is obj
    back = rotate_spray(rotate_spray(obj, 40.0), -40.0)
    assert np.allclose(back.xyz, obj.xyz, atol=1e-12)


def test_rotate_spray_preserves_centroid_and_distances():
    rng = np.random.default_rng(85)
    obj = cloud(rng.uniform(-3, 3, size=(60, 3)) + [5, 5, 0])
    rot = rotate_spray(obj, 20.0)
    assert np.allclose(rot.centroid(), obj.centroid(), atol=1e-12)
    d0 = np.linalg.norm(obj.xyz[:, None] - obj.xyz[None, :], axis=-1)
    d1 = np.linalg.norm(rot.xyz[:, None] - rot.xyz[None, :], axis=-1)
    assert np.allclose(d0, d1, atol=1e-9)
    assert len(rot) == len(obj)


def test_rotate_spray_range_check():
    obj = cloud([[1, 1, 1]])
    with pytest.raises(ValueError):
        rotate_spray(obj, 41.0)
    with pytest.raises(ValueError):
        rotate_spray(obj, -90.0)


# --- density_gate ----------------------------------------------------------------------

def offset_point(model, ring, col, dv, dh, r=15.0):
    """Point at angular offsets (dv, dh) from beam (ring, col), seen from its origin."""
    theta, h = model.rings[ring]
    phi = -math.pi + col * model.azimuth_pitch + dh
    elev = theta + dv
    return (r * math.cos(elev) * math.cos(phi),
            r * math.cos(elev) * math.sin(phi),
            h + r * math.sin(elev))


def test_density_gate_matches_offset_oracle():
    # shared-origin uniform fan so the expected decision is pure angle arithmetic
    model = kitti_like_model(rings=16, azimuth_bins=256, seed=90, h_max=0.0)
    pitch_az = model.azimuth_pitch
    pitch_v = model.ring_pitches()[0]
    rng = np.random.default_rng(91)
    pts, expected = [], []
    for _ in range(500):
        ring = int(rng.integers(0, 16))
        col = int(rng.integers(0, 256))
        dv = rng.uniform(-0.6, 0.6) * pitch_v
        dh = rng.uniform(0, 1) * pitch_az
        pts.append(offset_point(model, ring, col, dv, dh))
        # nearest beam vertically: own ring, or the adjacent one when |dv|
        # overshoots half the fan pitch (edge rings have one neighbor only)
        dev_v = abs(dv)
        has_neighbor = (ring > 0 and dv > 0) or (ring < 15 and dv < 0)
        if has_neighbor:
            dev_v = min(dev_v, pitch_v - dev_v)
        expected.append(dev_v <= 0.25 * pitch_v
                        and min(dh, pitch_az - dh) <= 0.3 * pitch_az)
    gated = density_gate(cloud(pts), model, d_h=0.3, d_v=0.25)
    got = set(map(tuple, gated.xyz))
    for p, keep in zip(pts, expected):
        assert (tuple(p) in got) == keep


def test_density_gate_zero_tolerance_empty_for_random_cloud():
    model = kitti_like_model(rings=8, azimuth_bins=64, seed=92)
    rng = np.random.default_rng(93)
    pc = cloud(rng.uniform(-20, 20, size=(300, 3)) + [30, 0, 0])
    assert len(density_gate(pc, model, 0.0, 0.0)) == 0


def test_density_gate_full_bin_keeps_in_pitch_points():
    model = kitti_like_model(rings=8, azimuth_bins=64, seed=94)
    rng = np.random.default_rng(95)
    pc = cloud(rng.uniform(-20, 20, size=(400, 3)) + [30, 0, 0])
    kept = density_gate(pc, model, 0.5, 0.5)
    # oracle: vertical deviation to the angularly nearest ring within half pitch
    ring_pitch = model.ring_pitches()
    want = 0
    for p in pc.xyz:
        d_xy = math.hypot(p[0], p[1])
        devs = [abs(math.atan2(p[2] - h, d_xy) - t) for t, h in model.rings]
        i = int(np.argmin(devs))
        if devs[i] <= 0.5 * ring_pitch[i]:
            want += 1
    assert len(kept) == want


def test_density_gate_nested_and_monotone():
    model = kitti_like_model(rings=16, azimuth_bins=128, seed=96)
    rng = np.random.default_rng(97)
    pc = cloud(rng.uniform(-15, 15, size=(1000, 3)) + [25, 0, 0])
    grid = [0.0, 0.1, 0.25, 0.5]
    prev_sets = {}
    for d_v in grid:
        for d_h in grid:
            kept = density_gate(pc, model, d_h, d_v)
            key = set(map(tuple, kept.xyz))
            for (ph, pv), pset in prev_sets.items():
                if ph <= d_h and pv <= d_v:
                    assert pset <= key
            prev_sets[(d_h, d_v)] = key


def test_density_gate_empty_input_ok():
    model = kitti_like_model(rings=4, azimuth_bins=32, seed=98)
    empty = PointCloud(np.zeros((0, 3)), np.zeros(0))
    assert len(density_gate(empty, model, 0.3, 0.3)) == 0


# --- config ----------------------------------------------------------------------------

def test_fusion_config_validation():
    FusionConfig("two_sides", 0.5, 0.5, -40.0)
    with pytest.raises(ValueError):
        FusionConfig("sideways", 0.1, 0.1)
    with pytest.raises(ValueError):
        FusionConfig("body_side", 0.6, 0.1)
    with pytest.raises(ValueError):
        FusionConfig("body_side", 0.1, -0.1)
    with pytest.raises(ValueError):
        FusionConfig("body_side", 0.1, 0.1, 50.0)


def test_dataset_clamp():
    check_config_for_dataset(FusionConfig("body_side", 0.5, 0.004), "kitti")
    with pytest.raises(ValueError):
        check_config_for_dataset(FusionConfig("body_side", 0.5, 0.005), "kitti")
    check_config_for_dataset(FusionConfig("body_side", 0.5, 0.5), "nuscenes")
    with pytest.raises(ValueError):
        check_config_for_dataset(FusionConfig("body_side", 0.1, 0.1), "waymo")


def test_config_file_round_trip(tmp_path):
    cfg = FusionConfig("corner_point", 0.3, 0.002, -10.0)
    path = tmp_path / "attack.cfg"
    save_config(path, cfg)
    assert load_config(path) == cfg
    path.write_text("mode=two_sides\n")
    with pytest.raises(ValueError):
        load_config(path)


# --- fuse ------------------------------------------------------------------------------

def scene_with_car(model, n_background=400, seed=100):
    """Sensor-facing rear face of a car at 10 m plus scattered background."""
    box = BoundingBox3D((10.0, 0.0, -0.5), (4.0, 1.8, 1.5), 0.0)
    ys = np.linspace(-0.85, 0.85, 35)
    zs = np.linspace(-1.2, 0.2, 25)
    yy, zz = np.meshgrid(ys, zs)
    face = np.column_stack([np.full(yy.size, 8.02), yy.ravel(), zz.ravel()])
    rng = np.random.default_rng(seed)
    bg = rng.uniform(-1, 1, size=(n_background, 3)) * [8, 20, 1.5] + [28, 0, -1.0]
    scene = PointCloud(np.vstack([face, bg]), np.zeros(face.shape[0] + n_background),
                       frame_id="scene0")
    return scene, box


def mist_sequence(k=2, n=1024, seed=101, sx=0.8, sy=0.25, sz=0.3):
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(k):
        xyz = rng.normal(0, 1, size=(n, 3)) * [sx, sy, sz]
        frames.append(PointCloud(xyz, np.full(n, 0.1)))
    return SequenceSample(tuple(frames), "water_mist")


def test_fuse_emits_k_frames_and_occludes_vehicle():
    model = kitti_like_model(rings=64, azimuth_bins=2048, seed=102)
    scene, box = scene_with_car(model)
    seq = mist_sequence(k=3)
    cfg = FusionConfig("head_tail_side", 0.5, 0.5, 0.0)
    assert len(fuse(scene, seq, box, cfg, model)) == 3
    # line-of-sight fixture: mist volume 2 m in front of the facing face, so the
    # crop box sees only vehicle returns and their disappearance is pure occlusion
    forward = AnchorSet(((6.0, 0.0, 0.25),), (1,))
    baseline = backproject(project(scene, model))
    n_before = len(crop_to_box(baseline, box))
    assert n_before > 100
    for obj in seq.frames:
        out = fuse_frame(scene, obj, box, cfg, model, anchor_set=forward).cloud
        n_after = len(crop_to_box(out, box))
        assert n_after < n_before


def test_fuse_no_invention_and_gate_accounting():
    model = kitti_like_model(rings=64, azimuth_bins=2048, seed=103)
    scene, box = scene_with_car(model)
    obj = mist_sequence(k=1).frames[0]
    cfg = FusionConfig("head_tail_side", 0.5, 0.5, 0.0)
    res = fuse_frame(scene, obj, box, cfg, model)
    assert res.scene_point_count == len(scene)
    assert res.object_points_pre_gate == len(obj)
    assert 0 < res.object_points_post_gate <= len(obj)
    idx = res.image.source_index[res.image.filled_mask]
    assert idx.min() >= 0
    assert idx.max() < len(scene) + res.object_points_post_gate
    assert (idx >= res.scene_point_count).sum() > 0  # some mist cells won


def test_fuse_two_sides_uses_independent_copies():
    model = kitti_like_model(rings=64, azimuth_bins=2048, seed=104)
    box = BoundingBox3D((10.0, 6.0, -0.5), (4.0, 1.8, 1.5), 0.0)
    scene = PointCloud(np.array([[30.0, 0.0, 0.0]]), np.zeros(1), frame_id="s")
    obj = mist_sequence(k=1, n=512).frames[0]
    cfg = FusionConfig("two_sides", 0.5, 0.5, 0.0)
    res = fuse_frame(scene, obj, box, cfg, model)
    assert res.object_points_pre_gate == 2 * len(obj)


def test_fuse_zero_density_is_benign_rerender():
    model = kitti_like_model(rings=32, azimuth_bins=512, seed=105)
    scene, box = scene_with_car(model)
    seq = mist_sequence(k=2)
    cfg = FusionConfig("head_tail_side", 0.0, 0.0, 0.0)
    with pytest.warns(UserWarning, match="gated out"):
        outs = fuse(scene, seq, box, cfg, model)
    rerender = backproject(project(scene, model))
    for out in outs:
        assert out.xyz.tobytes() == rerender.xyz.tobytes()
        assert np.array_equal(out.ring, rerender.ring)


def test_fuse_empty_object_sequence_is_benign():
    model = kitti_like_model(rings=32, azimuth_bins=512, seed=106)
    scene, box = scene_with_car(model)
    empty = PointCloud(np.zeros((0, 3)), np.zeros(0))
    seq = SequenceSample((empty, empty, empty), "water_mist")
    outs = fuse(scene, seq, box, FusionConfig("head_tail_side"), model)
    assert len(outs) == 3
    rerender = backproject(project(scene, model))
    for out in outs:
        assert out.xyz.tobytes() == rerender.xyz.tobytes()


def test_fuse_propagates_infeasible_mode():
    model = kitti_like_model(rings=16, azimuth_bins=256, seed=107)
    scene, box = scene_with_car(model)  # head-on: only head_tail_side feasible
    seq = mist_sequence(k=1)
    with pytest.raises(InfeasibleModeError):
        fuse(scene, seq, box, FusionConfig("two_sides"), model)


def test_fuse_deterministic():
    model = kitti_like_model(rings=32, azimuth_bins=1024, seed=108)
    scene, box = scene_with_car(model)
    seq = mist_sequence(k=2)
    cfg = FusionConfig("head_tail_side", 0.4, 0.3, 10.0)
    a = fuse(scene, seq, box, cfg, model)
    b = fuse(scene, seq, box, cfg, model)
    for fa, fb in zip(a, b):
        assert fa.xyz.tobytes() == fb.xyz.tobytes()


def test_fuse_spray_angle_reduces_curtain_coverage():
    # thin mist curtain 2 m before the face: side-on it shadows the whole face,
    # rotated away its far edge leaves boundary columns uncovered
    model = kitti_like_model(rings=64, azimuth_bins=2048, seed=109)
    scene, box = scene_with_car(model)
    obj = curtain_object(half_width=0.7)
    forward = AnchorSet(((6.0, 0.0, 0.25),), (1,))
    cfg0 = FusionConfig("head_tail_side", 0.5, 0.5, 0.0)
    cfg40 = FusionConfig("head_tail_side", 0.5, 0.5, 40.0)
    out0 = fuse_frame(scene, obj, box, cfg0, model, anchor_set=forward).cloud
    out40 = fuse_frame(scene, obj, box, cfg40, model, anchor_set=forward).cloud
    assert out0.xyz.tobytes() != out40.xyz.tobytes()
    baseline = backproject(project(scene, model))
    n0 = len(crop_to_box(baseline, box))
    occ0 = 1 - len(crop_to_box(out0, box)) / n0
    occ40 = 1 - len(crop_to_box(out40, box)) / n0
    assert occ0 > 0.5
    assert occ40 < occ0
