"""Command line entry point: ``ssgrasp <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
import time
from pathlib import Path


from . import io
from .classifier import ClassifierModel, TrainConfig, evaluate, train, write_history_csv
from .dataset import (DEFAULT_RADII, DatasetConfig, check_dataset, dataset_accuracy, generate_dataset,
                      load_manifest, load_split)
from .force_closure import MU_LIST, TH_BAD, TH_GOOD
from .geom_core import CameraIntrinsics, InputError
from .grasp_sampling import GripperModel, read_grasps_csv, sample_candidates, score_and_label, write_grasps_csv
from .planner import WorkspaceConfig, plan_from_depth
from .sensor_sim import Scene, SceneError, hemisphere_poses, randomize_scene, render_depth
from .tsdf import FusionConfig, TsdfVolume, extract_surface, integrate

log = logging.getLogger("ssgrasp")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None


def _require(args, name):
    if getattr(args, name) is None:
        raise InputError(f"--{name.replace('_', '-')} is required")
    return getattr(args, name)


def _gripper(cfg: dict) -> GripperModel:
    return GripperModel(**cfg.get("gripper", {}))


# --------------------------------------------------------------------------

def cmd_render(args, cfg):
    out = Path(_require(args, "out"))
    if args.scene:
        scene = Scene.load(args.scene)
    else:
        from .dataset import default_templates
        scene = randomize_scene(default_templates()[0], args.seed)
    if "intrinsics" in cfg:
        fx, fy, u0, v0, w, h = cfg["intrinsics"]
        K = CameraIntrinsics(fx, fy, u0, v0, int(w), int(h))
    else:
        K = CameraIntrinsics.default()
    table = 0.0 if scene.table_height is None else scene.table_height
    center = cfg.get("view_center", [0.0, 0.0, table + 0.03])
    poses = hemisphere_poses(center, cfg.get("view_radius", 0.35), args.views,
                             cfg.get("elevations", (30.0, 45.0, 60.0)))
    (out / "views").mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    noise = cfg.get("noise_sigma", 0.0)
    for k, T in enumerate(poses):
        d = render_depth(scene, K, T, cfg.get("max_range", 0.6), noise, [args.seed, k])
        io.write_pgm(out / "views" / f"view_{k}.pgm", d)
    io.write_poses(out / "views" / "poses.txt", poses)
    io.write_intrinsics(out / "intrinsics.txt", K)
    print(f"rendered {len(poses)} views to {out}")


def _frame_files(frames_dir: Path):
    files = list(frames_dir.glob("*.pgm"))
    key = lambda p: [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)]  # noqa: E731
    return sorted(files, key=key)


def cmd_fuse(args, cfg):
    frames_dir = Path(_require(args, "frames"))
    files = _frame_files(frames_dir)
    poses = io.read_poses(_require(args, "poses"))
    K = io.read_intrinsics(_require(args, "intrinsics"))
    if len(files) != len(poses):
        raise InputError(f"{len(files)} depth frames but {len(poses)} poses")
    if not files:
        raise InputError(f"no .pgm frames in {frames_dir}")
    fc = FusionConfig(voxel_size=cfg.get("voxel_size", args.voxel_size),
                      bounds=tuple(tuple(b) for b in cfg.get("bounds", FusionConfig().bounds)))
    vol = TsdfVolume.from_bounds(fc.bounds, fc.voxel_size, fc.trunc_factor, fc.w_max)
    for f, T in zip(files, poses):
        integrate(vol, io.read_pgm(f), K, T)
    cloud = extract_surface(vol)
    io.write_ply(_require(args, "out"), cloud)
    if args.volume_out:
        vol.save(args.volume_out)
    print(f"fused {len(files)} frames into {len(cloud)} points")


def cmd_dataset(args, cfg):
    if args.action == "gen":
        dcfg = DatasetConfig.from_json(cfg)
        man = generate_dataset(dcfg, args.seed, _require(args, "out"))
        print(f"{len(man['samples'])} samples from {len(man['scenes'])} scenes "
              f"({len(man['skipped'])} skipped)")
    elif args.action == "check":
        root = args.dir or args.out
        if root is None:
            raise InputError("dataset check needs a directory")
        problems = check_dataset(root)
        for p in problems:
            print(p)
        print("OK" if not problems else f"{len(problems)} problem(s)")
        return 0 if not problems else 1
    else:
        root = args.dir
        if root is None:
            raise InputError("dataset acc needs a directory")
        rows = dataset_accuracy(root, args.radii or DEFAULT_RADII)
        text = "radius_m,acc_match\n" + "".join(f"{r!r},{a!r}\n" for r, a in rows)
        if args.out:
            Path(args.out).write_text(text)
        sys.stdout.write(text)
    return 0


def cmd_sample(args, cfg):
    cloud = io.read_ply(_require(args, "cloud"))
    if cloud.normals is None:
        raise InputError("sampling needs a PLY with nx/ny/nz")
    cands = sample_candidates(cloud, _gripper(cfg), args.n, args.table_z, args.seed,
                              partner=args.partner)
    write_grasps_csv(_require(args, "out"), cands, args.scene_id)
    print(f"{len(cands)} candidates" + ("" if cands else " (empty result)"))


def cmd_label(args, cfg):
    rows = read_grasps_csv(_require(args, "grasps"))
    cloud = io.read_ply(_require(args, "cloud"))
    scene_id = rows[0][0] if rows else args.scene_id
    scored = score_and_label([g for _, g in rows], cloud, cfg.get("list_mu", MU_LIST),
                             cfg.get("th_good", TH_GOOD), cfg.get("th_bad", TH_BAD))
    write_grasps_csv(_require(args, "out"), scored, scene_id)
    print(f"labeled {len(scored)} of {len(rows)} candidates")


def _train_config(args, cfg) -> TrainConfig:
    kw = {k: cfg[k] for k in ("lr", "momentum", "batch_size", "epochs") if k in cfg}
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    return TrainConfig(seed=args.seed, **kw)


def cmd_train(args, cfg):
    root = _require(args, "dataset")
    man = load_manifest(root)
    X, y, _ = load_split(root, man, "train")
    Xt, yt, _ = load_split(root, man, "test")
    model, history = train(X, y, _train_config(args, cfg), Xt, yt)
    model.save(_require(args, "out"))
    if args.log:
        write_history_csv(args.log, history)
    last = history[-1] if history else {}
    print(f"trained on {len(y)} samples; final test accuracy {last.get('test_acc', float('nan')):.4f}")


def cmd_eval(args, cfg):
    root = _require(args, "dataset")
    man = load_manifest(root)
    model = ClassifierModel.load(_require(args, "model"))
    X, y, rows = load_split(root, man, args.split)
    res = evaluate(model, X, y)
    summary = {"split": args.split, "n": len(y), "accuracy": res.accuracy,
               "precision": list(res.precision), "recall": list(res.recall)}
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["file", "label", "score"])
            for r, s in zip(rows, res.scores):
                w.writerow([r["file"], r["label"], repr(float(s))])


PLAN_COLUMNS = ["rank", "grasp_id", "gx", "gy", "gz", "rax", "ray", "raz", "score", "pt_ms"]


def cmd_plan(args, cfg):
    t0 = time.perf_counter()
    depth = io.read_pgm(_require(args, "depth"))
    K = io.read_intrinsics(_require(args, "intrinsics"))
    poses = io.read_poses(_require(args, "pose"))
    if not 0 <= args.pose_index < len(poses):
        raise InputError(f"pose index {args.pose_index} out of range")
    model = ClassifierModel.load(_require(args, "model"))
    ws = WorkspaceConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in cfg.get("workspace", {}).items()})
    res = plan_from_depth(depth, K, poses[args.pose_index], model, _gripper(cfg), ws, args.k,
                          args.seed, cfg.get("n_candidates", args.n_candidates), t_start=t0)
    pt_ms = res.prep_time * 1000.0
    lines = [",".join(PLAN_COLUMNS)]
    for i, rg in enumerate(res.grasps):
        f = rg.candidate.frame
        vals = [*f.translation, *f.rotvec()]
        lines.append(",".join([str(i), str(rg.candidate.grasp_id)] + [repr(float(v)) for v in vals]
                              + [repr(rg.score), f"{pt_ms:.3f}"]))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    if not res.grasps:
        print(f"no viable grasp ({res.status})", file=sys.stderr)


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (unsigned 64-bit)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ssgrasp", description="Self-supervised 6-DOF grasp data and planning")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", parents=[common], help="ray-cast a scene from hemisphere views")
    r.add_argument("--scene", help="scene JSON (default: randomized built-in scene)")
    r.add_argument("--views", type=int, default=20)
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fuse", parents=[common], help="TSDF-fuse depth frames into a PLY cloud")
    f.add_argument("--frames", help="directory of PGM depth frames")
    f.add_argument("--poses", help="pose file (one 4x4 row-major per line)")
    f.add_argument("--intrinsics", help="intrinsics file")
    f.add_argument("--voxel-size", type=float, default=0.002)
    f.add_argument("--volume-out", help="also dump the TSDF volume")
    f.set_defaults(func=cmd_fuse)

    d = sub.add_parser("dataset", parents=[common], help="generate, check or score a dataset")
    d.add_argument("action", choices=["gen", "check", "acc"])
    d.add_argument("dir", nargs="?")
    d.add_argument("--radii", type=float, nargs="+")
    d.set_defaults(func=cmd_dataset)

    s = sub.add_parser("sample", parents=[common], help="sample antipodal grasp candidates")
    s.add_argument("--cloud", help="PLY with normals")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--table-z", type=float)
    s.add_argument("--partner", choices=["random", "best"], default="random")
    s.add_argument("--scene-id", default="0")
    s.set_defaults(func=cmd_sample)

    lb = sub.add_parser("label", parents=[common], help="score and label grasps on a complete cloud")
    lb.add_argument("--grasps", help="grasp CSV")
    lb.add_argument("--cloud", help="complete PLY with normals")
    lb.add_argument("--scene-id", default="0")
    lb.set_defaults(func=cmd_label)

    t = sub.add_parser("train", parents=[common], help="train the grasp quality classifier")
    t.add_argument("--dataset", help="dataset directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--log", help="training log CSV")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a model on a dataset split")
    e.add_argument("--dataset")
    e.add_argument("--model")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plan", parents=[common], help="rank grasps for one depth image")
    pl.add_argument("--depth", help="PGM depth image")
    pl.add_argument("--intrinsics")
    pl.add_argument("--pose", help="pose file")
    pl.add_argument("--pose-index", type=int, default=0)
    pl.add_argument("--model")
    pl.add_argument("--k", type=int, default=10)
    pl.add_argument("--n-candidates", type=int, default=600)
    pl.set_defaults(func=cmd_plan)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        cfg = _load_config(args.config)
        rc = args.func(args, cfg)
    except (InputError, SceneError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
