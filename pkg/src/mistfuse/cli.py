"""Batch front door: fit, gen, fuse, eval, sweep, roundtrip-audit.

Experiments are described by a flat key=value manifest so a run is reproducible
from one file plus one 64-bit seed.  Exit codes: 0 success, 1 evaluation
undefined (no vehicle was ever initially detected), 2 input error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from mistfuse.cloudcore import PointCloud, read_frame, read_labels, write_frame
from mistfuse.evalharness import (
    VEHICLE_CLASS,
    SweepGrid,
    file_detector,
    mock_detector,
    sweep,
)
from mistfuse.fusion import (
    MODES,
    FusionConfig,
    InfeasibleModeError,
    fuse_frame,
    load_config,
    select_anchor,
)
from mistfuse.objectgen import (
    GeneratorLatents,
    default_params,
    sample_sequence,
)
from mistfuse.rangesim import (
    backproject,
    fit_laser_model,
    load_model,
    project,
    roundtrip_loss,
    save_model,
    scan_unfold,
)


class InputError(Exception):
    """Anything wrong with the inputs; mapped to exit code 2."""


# --- manifests -------------------------------------------------------------------------

_MANIFEST_KEYS = {"dataset_root", "frames", "config", "output_dir", "seed",
                  "model", "kind", "k", "points", "mock_threshold", "detections_dir"}


@dataclass(frozen=True)
class RunManifest:
    dataset_root: Path
    frames: tuple[str, ...]
    config_path: Path
    seed: int
    output_dir: Path
    model_path: Path | None = None
    kind: str = "water_mist"
    k: int = 3
    points: int | None = None
    mock_threshold: int = 20
    detections_dir: Path | None = None


def _parse_kv(path: Path) -> dict[str, str]:
    kv = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    return kv


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    kv = _parse_kv(path)
    unknown = sorted(set(kv) - _MANIFEST_KEYS)
    if unknown:
        raise InputError(f"{path}: unknown manifest keys {unknown}")
    for key in ("dataset_root", "frames", "config", "output_dir", "seed"):
        if key not in kv:
            raise InputError(f"{path}: missing manifest key {key!r}")
    root = Path(kv["dataset_root"])
    if not root.is_dir():
        raise InputError(f"dataset_root is not a directory: {root}")
    config = Path(kv["config"])
    if not config.is_file():
        raise InputError(f"config not found: {config}")
    if kv["frames"] == "all":
        frames = tuple(sorted(p.stem for p in root.glob("*.bin")))
        if not frames:
            raise InputError(f"no .bin frames under {root}")
    else:
        frames = tuple(f.strip() for f in kv["frames"].split(",") if f.strip())
        if not frames:
            raise InputError(f"{path}: empty frame list")
    model = Path(kv["model"]) if "model" in kv else None
    if model is not None and not model.is_file():
        raise InputError(f"model not found: {model}")
    detections = Path(kv["detections_dir"]) if "detections_dir" in kv else None
    if detections is not None and not detections.is_dir():
        raise InputError(f"detections_dir is not a directory: {detections}")
    try:
        seed = int(kv["seed"])
        k = int(kv.get("k", "3"))
        points = int(kv["points"]) if "points" in kv else None
        mock_threshold = int(kv.get("mock_threshold", "20"))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return RunManifest(root, frames, config, seed, Path(kv["output_dir"]), model,
                       kv.get("kind", "water_mist"), k, points, mock_threshold,
                       detections)


# --- shared plumbing -------------------------------------------------------------------

def _sequence_for(man: RunManifest):
    # one seed drives both generator streams
    state = np.random.SeedSequence(man.seed).generate_state(2, dtype=np.uint64)
    latents = GeneratorLatents(int(state[0]), int(state[1]), K=man.k,
                               N=max(16, man.k))
    params = default_params(man.kind)
    if man.points is not None:
        params = replace(params, point_count=man.points)
    return sample_sequence(latents, params, man.kind)


def _load_cfg(man: RunManifest, args) -> FusionConfig:
    cfg = load_config(man.config_path)
    overrides = {}
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "dh", None) is not None:
        overrides["d_h"] = args.dh
    if getattr(args, "dv", None) is not None:
        overrides["d_v"] = args.dv
    if getattr(args, "angle", None) is not None:
        overrides["spray_angle_deg"] = args.angle
    return replace(cfg, **overrides) if overrides else cfg


def _load_model(man: RunManifest, args):
    path = getattr(args, "model", None) or man.model_path
    if path is None:
        raise InputError("no laser model: pass --model or set model= in the manifest")
    path = Path(path)
    if not path.is_file():
        raise InputError(f"model not found: {path}")
    return load_model(path)


def _load_scene(man: RunManifest, fid: str):
    scan = man.dataset_root / f"{fid}.bin"
    labels = man.dataset_root / f"{fid}.txt"
    if not scan.is_file():
        raise InputError(f"missing scan: {scan}")
    if not labels.is_file():
        raise InputError(f"missing labels: {labels}")
    scene = read_frame(scan)
    cars = [b for b in read_labels(labels) if b.label == VEHICLE_CLASS]
    if not cars:
        raise InputError(f"{labels}: no {VEHICLE_CLASS} box")
    return scene, cars[0]


def _apply_seed(man: RunManifest, args) -> RunManifest:
    if getattr(args, "seed", None) is not None:
        return replace(man, seed=args.seed)
    return man


def _detector_for(man: RunManifest, args):
    if getattr(args, "mock", False) or man.detections_dir is None:
        return mock_detector(man.mock_threshold)
    return file_detector(man.detections_dir)


# --- subcommands -----------------------------------------------------------------------

def cmd_fit(args) -> int:
    clouds = []
    for name in args.scans:
        path = Path(name)
        if not path.is_file():
            raise InputError(f"missing scan: {path}")
        clouds.append(scan_unfold(read_frame(path)))
    xyz = np.vstack([c.xyz for c in clouds])
    inten = np.concatenate([c.intensity for c in clouds])
    ring = np.concatenate([c.ring for c in clouds])
    merged = PointCloud(xyz, inten, "fit", ring)
    model = fit_laser_model(merged, azimuth_bins=args.bins)
    save_model(args.out, model)
    print(f"fit {model.ring_count} rings from {len(clouds)} scan(s) -> {args.out}")
    return 0


def cmd_gen(args) -> int:
    state = np.random.SeedSequence(args.seed).generate_state(2, dtype=np.uint64)
    latents = GeneratorLatents(int(state[0]), int(state[1]), K=args.k,
                               N=max(16, args.k))
    params = default_params(args.kind)
    if args.points is not None:
        params = replace(params, point_count=args.points)
    seq = sample_sequence(latents, params, args.kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cloud in seq.frames:
        write_frame(out / f"{cloud.frame_id}.bin", cloud)
    print(f"wrote {seq.K} {args.kind} frames -> {out}")
    return 0


def _fuse_one(man, cfg, model, seq, fid):
    scene, box = _load_scene(man, fid)
    try:
        anchor_set = select_anchor(box, (0.0, 0.0, 0.0), cfg.mode)
    except InfeasibleModeError as exc:
        return [f"frame={fid} mode={cfg.mode} status=infeasible reason={exc}"]
    lines = []
    for k, obj in enumerate(seq.frames):
        fused = fuse_frame(scene, obj, box, cfg, model, anchor_set=anchor_set)
        write_frame(man.output_dir / f"{fid}_{k}.bin", fused.cloud)
        lines.append(f"frame={fid} k={k} mode={cfg.mode} "
                     f"pre_gate={fused.object_points_pre_gate} "
                     f"post_gate={fused.object_points_post_gate}")
    return lines


def cmd_fuse(args) -> int:
    man = _apply_seed(load_manifest(args.manifest), args)
    cfg = _load_cfg(man, args)
    model = _load_model(man, args)
    seq = _sequence_for(man)
    man.output_dir.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            blocks = list(pool.map(lambda f: _fuse_one(man, cfg, model, seq, f),
                                   man.frames))
    else:
        blocks = [_fuse_one(man, cfg, model, seq, fid) for fid in man.frames]
    lines = [line for block in blocks for line in block]
    log = man.output_dir / "provenance.log"
    log.write_text("\n".join(lines) + "\n")
    print(f"fused {len(man.frames)} frame(s) x K={seq.K} -> {man.output_dir}")
    return 0


def _run_cells(man: RunManifest, args, grid: SweepGrid, csv_name: str) -> int:
    model = _load_model(man, args)
    seq = _sequence_for(man)
    scenes, boxes = [], {}
    for fid in man.frames:
        scene, box = _load_scene(man, fid)
        scenes.append(scene)
        boxes[fid] = box
    result = sweep(scenes, seq, boxes, grid, _detector_for(man, args), model)
    man.output_dir.mkdir(parents=True, exist_ok=True)
    out = man.output_dir / csv_name
    out.write_text(result.to_csv())
    print(f"wrote {len(result.cells)} cell(s) -> {out}")
    if all(cell.asr is None for cell in result.cells):
        print("evaluation undefined: no vehicle initially detected", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    man = _apply_seed(load_manifest(args.manifest), args)
    cfg = _load_cfg(man, args)
    grid = SweepGrid((cfg.mode,), (cfg.d_h,), (cfg.d_v,), (cfg.spray_angle_deg,))
    return _run_cells(man, args, grid, "eval.csv")


_SWEEP_AXES = {
    "angle": lambda cfg: SweepGrid((cfg.mode,), (cfg.d_h,), (cfg.d_v,),
                                   tuple(float(a) for a in range(-40, 41, 10))),
    "density": lambda cfg: SweepGrid((cfg.mode,), (0.1, 0.2, 0.3, 0.4, 0.5),
                                     (cfg.d_v,), (cfg.spray_angle_deg,)),
    "mode": lambda cfg: SweepGrid(MODES, (cfg.d_h,), (cfg.d_v,),
                                  (cfg.spray_angle_deg,)),
}


def cmd_sweep(args) -> int:
    man = _apply_seed(load_manifest(args.manifest), args)
    cfg = _load_cfg(man, args)
    grid = _SWEEP_AXES[args.axis](cfg)
    return _run_cells(man, args, grid, f"sweep_{args.axis}.csv")


def cmd_roundtrip_audit(args) -> int:
    path = Path(args.model)
    if not path.is_file():
        raise InputError(f"model not found: {path}")
    model = load_model(path)
    for name in args.scans:
        scan = Path(name)
        if not scan.is_file():
            raise InputError(f"missing scan: {scan}")
        cloud = read_frame(scan)
        image = project(cloud, model)
        back = backproject(image)
        kept = image.source_index[image.filled_mask]
        err = float(np.abs(back.xyz - cloud.xyz[kept]).max()) if len(back) else 0.0
        lost, frac = roundtrip_loss(cloud, model)
        print(f"frame={scan.stem} points={len(cloud)} lost={lost} "
              f"lost_frac={frac:.6f} max_err={err:.3e}")
    return 0


# --- argument parsing ------------------------------------------------------------------

def _add_overrides(sub, jobs=False):
    sub.add_argument("--model", help="laser model file (overrides the manifest)")
    sub.add_argument("--mode", choices=MODES, help="fusion mode override")
    sub.add_argument("--dh", type=float, help="horizontal density override")
    sub.add_argument("--dv", type=float, help="vertical density override")
    sub.add_argument("--angle", type=float, help="spray angle override (degrees)")
    sub.add_argument("--seed", type=int, help="seed override")
    if jobs:
        sub.add_argument("--jobs", type=int, default=1, help="parallel frame workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mistfuse",
                                     description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("fit", help="fit a per-ring laser model from scans")
    sub.add_argument("scans", nargs="+")
    sub.add_argument("--out", required=True)
    sub.add_argument("--bins", type=int, default=2048, help="azimuth bins")
    sub.set_defaults(func=cmd_fit)

    sub = subs.add_parser("gen", help="sample a plume sequence to .bin frames")
    sub.add_argument("--out", required=True)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--kind", default="water_mist",
                     choices=("water_mist", "smoke"))
    sub.add_argument("--k", type=int, default=3, help="sequence length")
    sub.add_argument("--points", type=int, help="points per frame")
    sub.set_defaults(func=cmd_gen)

    sub = subs.add_parser("fuse", help="fuse a plume onto each manifest frame")
    sub.add_argument("manifest")
    _add_overrides(sub, jobs=True)
    sub.set_defaults(func=cmd_fuse)

    sub = subs.add_parser("eval", help="score one fusion config")
    sub.add_argument("manifest")
    _add_overrides(sub)
    sub.add_argument("--mock-detector", dest="mock", action="store_true",
                     help="force the built-in point-count detector")
    sub.set_defaults(func=cmd_eval)

    sub = subs.add_parser("sweep", help="score a one-axis parameter sweep")
    sub.add_argument("manifest")
    sub.add_argument("--axis", choices=sorted(_SWEEP_AXES), required=True)
    _add_overrides(sub)
    sub.add_argument("--mock-detector", dest="mock", action="store_true",
                     help="force the built-in point-count detector")
    sub.set_defaults(func=cmd_sweep)

    sub = subs.add_parser("roundtrip-audit",
                          help="report projection round-trip loss per scan")
    sub.add_argument("scans", nargs="+")
    sub.add_argument("--model", required=True)
    sub.set_defaults(func=cmd_roundtrip_audit)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
