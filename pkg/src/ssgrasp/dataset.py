"""Self-supervised grasp dataset generation, on-disk layout and the
single-view vs complete cloud matching accuracy."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .force_closure import MU_LIST, TH_BAD, TH_GOOD, GraspLabel
from .geom_core import CameraIntrinsics, InputError, PointCloud, backproject, build_kdtree, radius_count
from .grasp_sampling import (CRC_POINTS, GripperModel, InsufficientSupport, extract_closing_region,
                             read_grasps_csv, sample_candidates, score_and_label, write_grasps_csv)
from .sensor_sim import Primitive, Scene, SceneError, hemisphere_poses, randomize_scene, render_depth
from .tsdf import FusionConfig, fuse_views

log = logging.getLogger(__name__)

MANIFEST_VERSION = "ssg-dataset-1"
DEFAULT_RADII = (0.001, 0.002, 0.004, 0.008)


# --------------------------------------------------------------------------
# matching accuracy

def acc_match(single_view: PointCloud, complete: PointCloud, r: float, tree=None) -> float:
    """Fraction of single-view points with a complete-cloud point within ``r``."""
    if len(single_view) == 0:
        raise InputError("single-view cloud is empty")
    if r <= 0:
        raise InputError("radius must be positive")
    if len(complete) == 0:
        return 0.0
    if tree is None:
        tree = build_kdtree(complete.points)
    counts = radius_count(tree, single_view.points, r)
    return float(np.count_nonzero(counts) / len(single_view))


def accuracy_sweep(single_views, complete: PointCloud, radii=DEFAULT_RADII) -> list[tuple[float, float]]:
    """Mean ``acc_match`` over all views for each radius."""
    radii = [float(r) for r in radii]
    if any(r <= 0 for r in radii) or any(b < a for a, b in zip(radii, radii[1:])):
        raise InputError("radii must be positive and ascending")
    tree = build_kdtree(complete.points) if len(complete) else None
    rows = []
    for r in radii:
        accs = [acc_match(v, complete, r, tree) for v in single_views]
        rows.append((r, float(np.mean(accs))))
    return rows


# --------------------------------------------------------------------------
# configuration

def default_templates() -> list[Scene]:
    """Four hand-set starting scenes of fruit/box/column stand-ins."""
    up = (0.0, 0.0, 1.0)
    return [
        Scene((Primitive.sphere((0, 0, 0.025), 0.025),
               Primitive.box((0, 0, 0.03), (0.02, 0.035, 0.03)),
               Primitive.cylinder((0, 0, 0.05), 0.018, 0.05, up)), 0.0),
        Scene((Primitive.sphere((0, 0, 0.03), 0.03),
               Primitive.box((0, 0, 0.025), (0.015, 0.03, 0.025)),
               Primitive.cylinder((0, 0, 0.04), 0.025, 0.04, up)), 0.0),
        Scene((Primitive.sphere((0, 0, 0.02), 0.02),
               Primitive.box((0, 0, 0.02), (0.025, 0.025, 0.02)),
               Primitive.cylinder((0, 0, 0.035), 0.015, 0.035, up),
               Primitive.cylinder((0, 0, 0.02), 0.02, 0.045, (1.0, 0.0, 0.0))), 0.0),
        Scene((Primitive.box((0, 0, 0.04), (0.012, 0.04, 0.04)),
               Primitive.sphere((0, 0, 0.028), 0.028),
               Primitive.cylinder((0, 0, 0.045), 0.022, 0.045, up)), 0.0),
    ]


@dataclass
class DatasetConfig:
    n_scenes: int = 24
    templates: list = field(default_factory=default_templates)
    workspace: tuple = ((-0.1, 0.1), (-0.1, 0.1))
    n_views: int = 8
    view_radius: float = 0.35
    elevations: tuple = (30.0, 45.0, 60.0)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.default)
    max_range: float = 0.6
    voxel_size: float = 0.002
    fusion_margin: float = 0.05
    candidates_per_scene: int = 800
    max_samples_per_class: int = 50
    gripper: GripperModel = field(default_factory=GripperModel)
    list_mu: tuple = MU_LIST
    th_good: float = TH_GOOD
    th_bad: float = TH_BAD
    max_snap: float = 0.005
    test_fraction: float = 0.2

    def fusion_config(self, table_height: float) -> FusionConfig:
        (x0, x1), (y0, y1) = self.workspace
        m = self.fusion_margin
        return FusionConfig(voxel_size=self.voxel_size,
                            bounds=((x0 - m, x1 + m), (y0 - m, y1 + m),
                                    (table_height - 0.01, table_height + 0.16)))

    def view_center(self, table_height: float) -> np.ndarray:
        (x0, x1), (y0, y1) = self.workspace
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2, table_height + 0.03])

    def to_json(self) -> dict:
        K = self.intrinsics
        return {
            "n_scenes": self.n_scenes,
            "templates": [t.to_json() for t in self.templates],
            "workspace": [list(w) for w in self.workspace],
            "n_views": self.n_views,
            "view_radius": self.view_radius,
            "elevations": list(self.elevations),
            "intrinsics": [K.fx, K.fy, K.u0, K.v0, K.width, K.height],
            "max_range": self.max_range,
            "voxel_size": self.voxel_size,
            "fusion_margin": self.fusion_margin,
            "candidates_per_scene": self.candidates_per_scene,
            "max_samples_per_class": self.max_samples_per_class,
            "gripper": {k: getattr(self.gripper, k) for k in GripperModel.__dataclass_fields__},
            "list_mu": list(self.list_mu),
            "th_good": self.th_good,
            "th_bad": self.th_bad,
            "max_snap": self.max_snap,
            "test_fraction": self.test_fraction,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        kw = {}
        if "templates" in d:
            kw["templates"] = [Scene.from_json(t) for t in d.pop("templates")]
        if "intrinsics" in d:
            fx, fy, u0, v0, w, h = d.pop("intrinsics")
            kw["intrinsics"] = CameraIntrinsics(fx, fy, u0, v0, int(w), int(h))
        if "gripper" in d:
            kw["gripper"] = GripperModel(**d.pop("gripper"))
        if "workspace" in d:
            kw["workspace"] = tuple(tuple(w) for w in d.pop("workspace"))
        for key in ("elevations", "list_mu"):
            if key in d:
                kw[key] = tuple(d.pop(key))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown dataset config keys: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)


# --------------------------------------------------------------------------
# generation

def _scene_seeds(seed: int, scene_index: int) -> list[int]:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(scene_index),))
    return [int(s) for s in ss.generate_state(4, dtype=np.uint64)]


def _write_crc(path, pts: np.ndarray):
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_crc(path) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size % 3:
        raise InputError(f"{path}: size is not a multiple of 3 floats")
    return raw.reshape(-1, 3).astype(np.float64)


def generate_scene(cfg: DatasetConfig, seed: int, scene_index: int, root: Path) -> dict:
    """Run the acquisition loop for one scene and write its files.

    Returns the scene record with its retained (balanced) samples, which
    may be empty. Raises SceneError when fusion or sampling yields nothing.
    """
    scene_id = f"{scene_index:04d}"
    s_place, s_sample, s_crc, s_balance = _scene_seeds(seed, scene_index)
    template = cfg.templates[scene_index % len(cfg.templates)]
    scene = randomize_scene(template, s_place, cfg.workspace)
    table = 0.0 if scene.table_height is None else float(scene.table_height)
    K = cfg.intrinsics
    poses = hemisphere_poses(cfg.view_center(table), cfg.view_radius, cfg.n_views, cfg.elevations)
    depths = [render_depth(scene, K, T, cfg.max_range) for T in poses]
    fused = fuse_views(zip(depths, poses), K, cfg.fusion_config(table))
    if len(fused) == 0:
        raise SceneError("fusion produced an empty cloud")
    cands = sample_candidates(fused, cfg.gripper, cfg.candidates_per_scene, table, s_sample)
    if not cands:
        raise SceneError("no grasp candidates")
    scored = score_and_label(cands, fused, cfg.list_mu, cfg.th_good, cfg.th_bad, cfg.max_snap)

    views = [backproject(d, K, T) for d, T in zip(depths, poses)]
    trees = [build_kdtree(v.points) for v in views]
    samples = {GraspLabel.POSITIVE: [], GraspLabel.NEGATIVE: []}
    for g in scored:
        if g.label not in samples:
            continue
        for k, (view, tree) in enumerate(zip(views, trees)):
            if len(view) == 0:
                continue
            try:
                pts = extract_closing_region(view, g, cfg.gripper, [s_crc, g.grasp_id, k], tree=tree)
            except InsufficientSupport:
                continue
            samples[g.label].append((g.grasp_id, k, pts))
    n = min(len(samples[GraspLabel.POSITIVE]), len(samples[GraspLabel.NEGATIVE]),
            cfg.max_samples_per_class)
    if n == 0:
        # the scene's files are still valid; it just adds nothing to the balanced set
        log.warning("scene %s: one class is empty, no samples retained", scene_id)
    rng = np.random.default_rng(s_balance)
    kept = []
    for lab in (GraspLabel.POSITIVE, GraspLabel.NEGATIVE) if n else ():
        group = samples[lab]
        pick = np.sort(rng.choice(len(group), n, replace=False))
        kept += [(lab,) + group[i] for i in pick]
    kept.sort(key=lambda s: (s[1], s[2]))

    sdir = root / "scenes" / scene_id
    (sdir / "views").mkdir(parents=True, exist_ok=True)
    (sdir / "crc").mkdir(exist_ok=True)
    scene.save(sdir / "scene.json")
    view_files = []
    for k, d in enumerate(depths):
        io.write_pgm(sdir / "views" / f"view_{k}.pgm", d)
        view_files.append(f"scenes/{scene_id}/views/view_{k}.pgm")
    io.write_poses(sdir / "views" / "poses.txt", poses)
    io.write_intrinsics(sdir / "intrinsics.txt", K)
    io.write_ply(sdir / "fused.ply", fused)
    write_grasps_csv(sdir / "grasps.csv", scored, scene_id)
    sample_rows = []
    for lab, gid, k, pts in kept:
        rel = f"scenes/{scene_id}/crc/{scene_id}_{gid}_{k}.crc"
        _write_crc(root / rel, pts)
        sample_rows.append({"file": rel, "scene_id": scene_id, "grasp_id": int(gid),
                            "view_id": int(k), "label": int(lab)})
    record = {
        "scene_id": scene_id,
        "scene": f"scenes/{scene_id}/scene.json",
        "views": view_files,
        "poses": f"scenes/{scene_id}/views/poses.txt",
        "intrinsics": f"scenes/{scene_id}/intrinsics.txt",
        "fused": f"scenes/{scene_id}/fused.ply",
        "grasps": f"scenes/{scene_id}/grasps.csv",
        "crc_index": [s["file"] for s in sample_rows],
    }
    return {"record": record, "samples": sample_rows}


def assign_split(labels, test_fraction: float, rng_seed) -> list[str]:
    """Stratified train/test assignment (per-label shuffles)."""
    labels = np.asarray(labels)
    split = np.array(["train"] * len(labels), dtype=object)
    rng = np.random.default_rng(rng_seed)
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        n_test = int(round(test_fraction * len(idx)))
        split[rng.permutation(idx)[:n_test]] = "test"
    return split.tolist()


def generate_dataset(cfg: DatasetConfig, rng_seed: int, out_dir) -> dict:
    """Generate scenes, write all files and ``manifest.json``; return the manifest."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records, samples, skipped = [], [], []
    for i in range(cfg.n_scenes):
        try:
            res = generate_scene(cfg, rng_seed, i, root)
        except (SceneError, InputError) as exc:
            log.warning("skipping scene %04d: %s", i, exc)
            skipped.append({"scene_id": f"{i:04d}", "reason": str(exc)})
            continue
        records.append(res["record"])
        samples += res["samples"]
        log.info("scene %04d: %d samples", i, len(res["samples"]))
    split_seed = np.random.SeedSequence(entropy=int(rng_seed), spawn_key=(2**31,)).generate_state(1)[0]
    for s, part in zip(samples, assign_split([s["label"] for s in samples], cfg.test_fraction,
                                             int(split_seed))):
        s["split"] = part
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(rng_seed),
        "config": cfg.to_json(),
        "scenes": records,
        "skipped": skipped,
        "samples": samples,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------
# reading and validation

def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise InputError(f"{path} does not exist")
    return json.loads(path.read_text())


def load_split(root, manifest: dict, split: str):
    """Stack the closing-region clouds of one split: ``(X, y, rows)``."""
    rows = [s for s in manifest["samples"] if s["split"] == split]
    X = np.empty((len(rows), CRC_POINTS, 3))
    for i, s in enumerate(rows):
        X[i] = read_crc(Path(root) / s["file"])
    y = np.array([s["label"] for s in rows], dtype=np.int64)
    return X, y, rows


def check_dataset(root) -> list[str]:
    """Validate files and invariants; returns a list of problems (empty if OK)."""
    root = Path(root)
    problems = []
    try:
        man = load_manifest(root)
    except (InputError, json.JSONDecodeError) as exc:
        return [str(exc)]
    if man.get("version") != MANIFEST_VERSION:
        problems.append(f"unexpected manifest version {man.get('version')!r}")
    missing = [k for k in ("config", "scenes", "samples") if k not in man]
    if missing:
        return problems + [f"manifest lacks {', '.join(missing)}"]
    for rec in man["scenes"]:
        sid = rec["scene_id"]
        try:
            Scene.load(root / rec["scene"])
            K = io.read_intrinsics(root / rec["intrinsics"])
            poses = io.read_poses(root / rec["poses"])
            if len(poses) != len(rec["views"]):
                problems.append(f"scene {sid}: {len(poses)} poses for {len(rec['views'])} views")
            for v in rec["views"]:
                io.read_pgm(root / v).check_matches(K)
            io.read_ply(root / rec["fused"])
            grasps = read_grasps_csv(root / rec["grasps"])
            ids = [g.grasp_id for _, g in grasps]
            if len(ids) != len(set(ids)):
                problems.append(f"scene {sid}: duplicate grasp ids")
        except (OSError, InputError, ValueError, KeyError) as exc:
            problems.append(f"scene {sid}: {exc}")
        for f in rec["crc_index"]:
            if not (root / f).exists():
                problems.append(f"scene {sid}: missing {f}")
    samples = man["samples"]
    for s in samples:
        p = root / s["file"]
        if not p.exists():
            problems.append(f"missing sample {s['file']}")
            continue
        n = read_crc(p).shape[0]
        if n != CRC_POINTS:
            problems.append(f"{s['file']}: {n} points, expected {CRC_POINTS}")
        if s["label"] not in (0, 1):
            problems.append(f"{s['file']}: label {s['label']} not in {{0, 1}}")
        if s.get("split") not in ("train", "test"):
            problems.append(f"{s['file']}: bad split {s.get('split')!r}")
    files = [s["file"] for s in samples]
    if len(files) != len(set(files)):
        problems.append("a sample is listed more than once")
    labels = [s["label"] for s in samples]
    if labels.count(1) != labels.count(0):
        problems.append(f"unbalanced labels: {labels.count(1)} positive vs {labels.count(0)} negative")
    n_test = sum(s.get("split") == "test" for s in samples)
    frac = man["config"].get("test_fraction", 0.2)
    if abs(n_test - round(frac * len(samples))) > 1:
        problems.append(f"test split has {n_test} of {len(samples)} samples")
    return problems


def dataset_accuracy(root, radii=DEFAULT_RADII) -> list[tuple[float, float]]:
    """Accuracy sweep of every stored single view against its fused cloud.

    Single views are cropped to the fusion volume first; points outside it
    were never reconstructed.
    """
    root = Path(root)
    man = load_manifest(root)
    cfg = DatasetConfig.from_json(man["config"])
    per_scene = []
    for rec in man["scenes"]:
        scene = Scene.load(root / rec["scene"])
        table = 0.0 if scene.table_height is None else scene.table_height
        lo, hi = np.array(cfg.fusion_config(table).bounds).T
        K = io.read_intrinsics(root / rec["intrinsics"])
        poses = io.read_poses(root / rec["poses"])
        fused = io.read_ply(root / rec["fused"])
        views = []
        for v, T in zip(rec["views"], poses):
            pc = backproject(io.read_pgm(root / v), K, T)
            pc = pc.subset(np.all((pc.points >= lo) & (pc.points <= hi), axis=1))
            if len(pc):
                views.append(pc)
        if views:
            per_scene.append((len(views), accuracy_sweep(views, fused, radii)))
    if not per_scene:
        raise InputError("dataset has no usable views")
    total = sum(n for n, _ in per_scene)
    return [(r, sum(n * rows[i][1] for n, rows in per_scene) / total)
            for i, r in enumerate(float(x) for x in radii)]


def config_copy(cfg: DatasetConfig, **changes) -> DatasetConfig:
    new = copy.deepcopy(cfg)
    for k, v in changes.items():
        setattr(new, k, v)
    return new
