"""Acceptance criteria, one test each.

Every test records a one-line verdict; the lines are printed together at
the end of the pytest run (see ``conftest.py``). Run just this file with
``pytest tests/test_acceptance.py -v``.
"""
import csv
import io as stdio
import json
import math
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from conftest import random_rotation, record
from oracles import (acc_match_brute, contact_angles_oracle, cylinder_normal, finite_difference_check,
                     line_cylinder_contacts, pointnet_loss)
from ssgrasp import io
from ssgrasp.classifier import LAYER_SIZES, ClassifierModel, forward, loss_and_grad
from ssgrasp.cli import main
from ssgrasp.dataset import acc_match, accuracy_sweep, check_dataset, load_manifest
from ssgrasp.force_closure import MU_LIST, ContactPair, GraspLabel, force_closure_test, label
from ssgrasp.geom_core import CameraIntrinsics, PointCloud, RigidTransform, backproject, build_kdtree
from ssgrasp.sensor_sim import Primitive, Scene, hemisphere_poses, look_at, render_depth
from ssgrasp.tsdf import FusionConfig, fuse_views


def _verdict(n, name, ok, detail):
    record(n, name, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------- AC1

def _sphere_contact(rng, center, r):
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    return center + r * n, n


def _box_contact(rng, center, R, he):
    face = rng.integers(3)
    sign = rng.choice([-1.0, 1.0])
    local = rng.uniform(-1, 1, 3) * he
    local[face] = sign * he[face]
    n_local = np.zeros(3)
    n_local[face] = sign
    return center + R @ local, R @ n_local


def test_ac1_force_closure_oracle():
    rng = np.random.default_rng(2024)
    pairs = []
    while len(pairs) < 1000:
        if len(pairs) % 2 == 0:
            c, r = rng.uniform(-0.1, 0.1, 3), rng.uniform(0.01, 0.05)
            (p1, n1), (p2, n2) = _sphere_contact(rng, c, r), _sphere_contact(rng, c, r)
        else:
            c, R, he = rng.uniform(-0.1, 0.1, 3), random_rotation(rng), rng.uniform(0.005, 0.04, 3)
            (p1, n1), (p2, n2) = _box_contact(rng, c, R, he), _box_contact(rng, c, R, he)
        if np.linalg.norm(p2 - p1) > 1e-6:
            pairs.append((p1, p2, n1, n2))
    expected = []
    for p1, p2, n1, n2 in pairs:
        a1, a2 = contact_angles_oracle(p1, p2, n1, n2)
        expected.append([a1 < math.atan(mu) and a2 < math.atan(mu) for mu in MU_LIST])
    t0 = time.perf_counter()
    got = [[force_closure_test(ContactPair(*p), mu) for mu in MU_LIST] for p in pairs]
    elapsed = time.perf_counter() - t0
    disagree = int(np.sum(np.array(got) != np.array(expected)))
    n_pass = int(np.sum(expected))
    _verdict(1, "force-closure oracle (1000 pairs x 15 mu)", disagree == 0 and elapsed < 1.0,
             f"{disagree} disagreements, {n_pass} passing tests, {elapsed:.3f} s")


# ---------------------------------------------------------------- AC2

def test_ac2_label_table():
    table = {0.3: GraspLabel.POSITIVE, 0.4: GraspLabel.POSITIVE,
             0.5: GraspLabel.DISCARDED, 0.6: GraspLabel.DISCARDED, 0.7: GraspLabel.DISCARDED}
    table.update({mu: GraspLabel.NEGATIVE for mu in (0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.7, 2.0, 3.0)})
    ok = len(MU_LIST) == 15 and set(MU_LIST) == set(table)
    wrong = [mu for mu in MU_LIST if label(mu) != table[mu]]
    _verdict(2, "label table over the 15 friction values", ok and not wrong,
             f"{15 - len(wrong)}/15 match" + (f", wrong: {wrong}" if wrong else ""))


# ---------------------------------------------------------------- AC3

def test_ac3_force_closure_properties():
    rng = np.random.default_rng(7)
    violations = {"monotone": 0, "symmetry": 0, "scale": 0}
    for _ in range(10_000):
        p1 = rng.normal(size=3) * 0.05
        p2 = p1 + rng.normal(size=3) * 0.05
        n1, n2 = rng.normal(size=(2, 3))
        n1 /= np.linalg.norm(n1)
        n2 /= np.linalg.norm(n2)
        c = ContactPair(p1, p2, n1, n2)
        mu = float(rng.uniform(0.05, 4.0))
        res = force_closure_test(c, mu)
        if res and not force_closure_test(c, mu * float(rng.uniform(1.0, 3.0))):
            violations["monotone"] += 1
        if force_closure_test(c.swapped(), mu) != res:
            violations["symmetry"] += 1
        s = float(np.exp(rng.uniform(-3, 3)))
        m = 0.5 * (p1 + p2)
        if force_closure_test(ContactPair(m + s * (p1 - m), m + s * (p2 - m), n1, n2), mu) != res:
            violations["scale"] += 1
    total = sum(violations.values())
    _verdict(3, "monotonicity/symmetry/scale (10000 cases)", total == 0,
             ", ".join(f"{k} {v}" for k, v in violations.items()) + " violations")


# ---------------------------------------------------------------- AC4

def test_ac4_tsdf_sphere():
    K = CameraIntrinsics.default()
    center, r, vox = np.array([0.0, 0.0, 0.05]), 0.05, 0.002
    scene = Scene((Primitive.sphere(center, r),), None)
    poses = hemisphere_poses(center, 0.35, 20)
    t0 = time.perf_counter()
    depths = [render_depth(scene, K, T) for T in poses]
    cfg = FusionConfig(voxel_size=vox, bounds=((-0.07, 0.07), (-0.07, 0.07), (-0.02, 0.12)))
    fused = fuse_views(zip(depths, poses), K, cfg)
    elapsed = time.perf_counter() - t0
    err = np.abs(np.linalg.norm(fused.points - center, axis=1) - r)
    within = float(np.mean(err <= 0.002))
    tree = build_kdtree(fused.points)
    accs = [acc_match(backproject(d, K, T), fused, 0.004, tree) for d, T in zip(depths, poses)]
    ok = within >= 0.95 and min(accs) >= 0.95 and elapsed < 60
    _verdict(4, "TSDF sphere reconstruction", ok,
             f"{within:.4f} of {len(fused)} points within 2 mm, min acc_match@4mm {min(accs):.4f}, "
             f"{elapsed:.1f} s")


# ---------------------------------------------------------------- AC5

def test_ac5_acc_match_brute_force():
    rng = np.random.default_rng(99)
    mismatches, nonmono = 0, 0
    for _ in range(100):
        single = rng.random((int(rng.integers(1, 300)), 3)) * 0.05
        complete = rng.random((int(rng.integers(1, 300)), 3)) * 0.05
        radii = np.sort(rng.uniform(1e-4, 0.02, 5))
        for rr in radii:
            if acc_match(PointCloud(single), PointCloud(complete), rr) != acc_match_brute(single, complete, rr):
                mismatches += 1
        vals = [a for _, a in accuracy_sweep([PointCloud(single)], PointCloud(complete), radii)]
        nonmono += any(b < a for a, b in zip(vals, vals[1:]))
    _verdict(5, "acc_match vs brute force (100 fixtures)", mismatches == 0 and nonmono == 0,
             f"{mismatches} mismatches, {nonmono} non-monotone sweeps")


# ---------------------------------------------------------------- AC6

def test_ac6_gradient_check_and_permutation():
    worst, kinks = 0.0, 0
    for seed in range(10):
        m = ClassifierModel.initialize(LAYER_SIZES, rng_seed=seed)
        rng = np.random.default_rng(seed + 1000)
        for k in ("b1", "b2", "b3", "b4"):
            m.params[k][:] = rng.normal(scale=0.1, size=m.params[k].shape)
        X = rng.normal(size=(2, 8, 3))
        y = np.array([0, 1])
        _, grads = loss_and_grad(m, X, y)
        w, kk = finite_difference_check(lambda: pointnet_loss(m.params, X, y), m.params, grads, h=1e-5)
        worst, kinks = max(worst, w), kinks + kk
    rng = np.random.default_rng(3)
    m = ClassifierModel.initialize(rng_seed=3)
    pts = rng.normal(size=(1024, 3)) * 0.3
    base, _ = forward(m, pts)
    perm_ok = all(np.array_equal(forward(m, pts[rng.permutation(1024)])[0], base) for _ in range(20))
    n_params = sum(w.size for w in m.params.values())
    _verdict(6, "gradient check (10 seeds) + permutation invariance", worst < 1e-3 and perm_ok,
             f"worst rel err {worst:.2e} over {10 * n_params} coords ({kinks} kink coords skipped), "
             f"permutation exact: {perm_ok}")


# ---------------------------------------------------------------- AC7 / AC8 share the trained model

@pytest.fixture(scope="session")
def learned(tmp_path_factory):
    root = tmp_path_factory.mktemp("ac7")
    t0 = time.perf_counter()
    with redirect_stdout(stdio.StringIO()):
        rc_gen = main(["dataset", "gen", "--seed", "7", "--out", str(root / "ds")])
        t_gen = time.perf_counter() - t0
        rc_train = main(["train", "--dataset", str(root / "ds"), "--seed", "7",
                         "--out", str(root / "model.gqn"), "--log", str(root / "log.csv")])
    total = time.perf_counter() - t0
    return {"root": root, "rc": (rc_gen, rc_train), "t_gen": t_gen, "total": total}


def test_ac7_end_to_end_learning(learned):
    root = learned["root"]
    man = load_manifest(root / "ds")
    problems = check_dataset(root / "ds")
    labels = [s["label"] for s in man["samples"]]
    n_test = sum(s["split"] == "test" for s in man["samples"])
    kinds = {p.kind for rec in man["scenes"] for p in Scene.load(root / "ds" / rec["scene"]).primitives}
    with open(root / "log.csv") as f:
        hist = list(csv.DictReader(f))
    acc = float(hist[-1]["test_acc"])
    ok = (learned["rc"] == (0, 0) and not problems and len(man["scenes"]) >= 20 and len(labels) >= 2000
          and labels.count(0) == labels.count(1) and abs(n_test - round(0.2 * len(labels))) <= 1
          and kinds == {"sphere", "box", "cylinder"} and acc >= 0.80 and learned["total"] < 900)
    _verdict(7, "dataset gen + train", ok,
             f"{len(man['scenes'])} scenes, {len(labels)} samples ({labels.count(1)} pos), test {n_test}, "
             f"held-out acc {acc:.4f}, gen {learned['t_gen']:.0f} s, total {learned['total']:.0f} s"
             + (f", problems: {problems[:3]}" if problems else ""))


def cylinder_scene(seed):
    rng = np.random.default_rng(seed)
    cyl = Primitive.cylinder((rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.04), 0.02, 0.04)
    el, az = np.radians(rng.uniform(35, 60)), rng.uniform(0, 2 * np.pi)
    eye = cyl.center + 0.35 * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Scene((cyl,), 0.0), cyl, look_at(eye, cyl.center)


def test_ac8_planning(learned, tmp_path):
    K = CameraIntrinsics.default()
    io.write_intrinsics(tmp_path / "k.txt", K)
    passed, pts, details = 0, [], []
    beta = math.atan(0.45)
    for seed in range(10):
        scene, cyl, T = cylinder_scene(seed)
        io.write_pgm(tmp_path / f"d{seed}.pgm", render_depth(scene, K, T))
        io.write_poses(tmp_path / f"p{seed}.txt", [T])
        buf = stdio.StringIO()
        with redirect_stdout(buf):
            rc = main(["plan", "--depth", str(tmp_path / f"d{seed}.pgm"), "--intrinsics", str(tmp_path / "k.txt"),
                       "--pose", str(tmp_path / f"p{seed}.txt"), "--model", str(learned["root"] / "model.gqn"),
                       "--k", "1", "--seed", str(seed)])
        rows = list(csv.DictReader(stdio.StringIO(buf.getvalue())))
        if rc != 0 or not rows:
            details.append(f"{seed}:none")
            continue
        top = rows[0]
        pts.append(float(top["pt_ms"]))
        frame = RigidTransform.from_rotvec([float(top[c]) for c in ("gx", "gy", "gz")],
                                           [float(top[c]) for c in ("rax", "ray", "raz")])
        hit = line_cylinder_contacts(frame.translation, frame.rotation[:, 1], cyl.center, cyl.rotation,
                                     cyl.size[0], cyl.size[1])
        if hit is None:
            details.append(f"{seed}:miss")
            continue
        p1, p2 = hit
        n1 = cylinder_normal(p1, cyl.center, cyl.rotation, cyl.size[0], cyl.size[1])
        n2 = cylinder_normal(p2, cyl.center, cyl.rotation, cyl.size[0], cyl.size[1])
        a1, a2 = contact_angles_oracle(p1, p2, n1, n2)
        good = a1 < beta and a2 < beta
        passed += good
        details.append(f"{seed}:{math.degrees(max(a1, a2)):.0f}deg")
    worst_pt = max(pts) if pts else float("inf")
    _verdict(8, "single-view cylinder planning", passed >= 8 and worst_pt < 5000,
             f"{passed}/10 top-1 grasps pass at mu=0.45, max PT {worst_pt:.0f} ms [{' '.join(details)}]")


# ---------------------------------------------------------------- AC9

def _run(argv):
    buf = stdio.StringIO()
    with redirect_stdout(buf):
        rc = main(argv)
    return rc, buf.getvalue()


def _snapshot(d: Path):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _drop_pt(text):
    return "\n".join(",".join(line.split(",")[:-1]) for line in text.splitlines())


def _pipeline(work: Path):
    """Run every subcommand once with fixed seeds; returns stdout per command."""
    work.mkdir(parents=True)
    (work / "cfg.json").write_text(json.dumps({"n_scenes": 2, "n_views": 4, "candidates_per_scene": 300,
                                               "max_samples_per_class": 8}))
    cfg = str(work / "cfg.json")
    out = {}
    r = work / "render"
    out["render"] = _run(["render", "--seed", "5", "--views", "6", "--out", str(r)])
    out["fuse"] = _run(["fuse", "--frames", str(r / "views"), "--poses", str(r / "views" / "poses.txt"),
                        "--intrinsics", str(r / "intrinsics.txt"), "--out", str(work / "cloud.ply"),
                        "--volume-out", str(work / "vol.tsdf")])
    out["sample"] = _run(["sample", "--seed", "5", "--cloud", str(work / "cloud.ply"), "--n", "60",
                          "--table-z", "0", "--out", str(work / "grasps.csv")])
    out["label"] = _run(["label", "--grasps", str(work / "grasps.csv"), "--cloud", str(work / "cloud.ply"),
                         "--out", str(work / "labeled.csv")])
    out["dataset gen"] = _run(["dataset", "gen", "--seed", "5", "--config", cfg, "--out", str(work / "ds")])
    out["dataset check"] = _run(["dataset", "check", str(work / "ds")])
    out["dataset acc"] = _run(["dataset", "acc", str(work / "ds"), "--out", str(work / "acc.csv")])
    ds_cfg = work / "train.json"
    ds_cfg.write_text(json.dumps({"epochs": 2}))
    out["train"] = _run(["train", "--seed", "5", "--config", str(ds_cfg), "--dataset", str(work / "ds"),
                         "--out", str(work / "model.gqn"), "--log", str(work / "train.csv")])
    out["eval"] = _run(["eval", "--dataset", str(work / "ds"), "--model", str(work / "model.gqn"),
                        "--out", str(work / "scores.csv")])
    rc, text = _run(["plan", "--seed", "5", "--depth", str(r / "views" / "view_2.pgm"),
                     "--intrinsics", str(r / "intrinsics.txt"), "--pose", str(r / "views" / "poses.txt"),
                     "--pose-index", "2", "--model", str(work / "model.gqn"), "--k", "5",
                     "--n-candidates", "100", "--out", str(work / "plan.csv")])
    out["plan"] = (rc, _drop_pt(text))
    (work / "plan.csv").write_text(_drop_pt((work / "plan.csv").read_text()))
    # the two runs write to different directories
    return {cmd: (rc, text.replace(str(work), "<work>")) for cmd, (rc, text) in out.items()}


def test_ac9_cli_determinism(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    fa, fb = _snapshot(tmp_path / "a"), _snapshot(tmp_path / "b")
    bad = [cmd for cmd in a if a[cmd] != b[cmd] or a[cmd][0] != 0]
    bad += [f for f in fa if fa[f] != fb.get(f)]
    bad += [f for f in fb if f not in fa]
    _verdict(9, "CLI determinism (two runs, all subcommands)", not bad,
             f"{len(a)} commands, {len(fa)} output files identical"
             + (f"; differing: {bad[:5]}" if bad else " (plan compared without pt_ms)"))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
