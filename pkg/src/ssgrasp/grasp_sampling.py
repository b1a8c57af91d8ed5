"""Antipodal grasp candidates and the closing-region point cloud.

Grasp frame convention: origin at the contact midpoint, x = approach
direction, y = closing axis (p1 -> p2), z = x cross y.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .force_closure import MU_LIST, TH_BAD, TH_GOOD, ContactPair, GraspLabel, contact_angles, force_closure_batch, label, sweep_scores
from .geom_core import InputError, PointCloud, RigidTransform, build_kdtree

log = logging.getLogger(__name__)

CRC_POINTS = 1024
MIN_SUPPORT = 16
N_APPROACHES = 8
PREFILTER_MU = 3.0


class InsufficientSupport(ValueError):
    """Too few cloud points inside the gripper's closing region."""


@dataclass(frozen=True)
class GripperModel:
    max_width: float = 0.07
    finger_depth: float = 0.04
    finger_thickness: float = 0.01
    region_depth: float = 0.04  # along the approach axis
    region_width: float = 0.07  # along the closing axis
    region_height: float = 0.02

    def __post_init__(self):
        if min(self.max_width, self.finger_depth, self.finger_thickness,
               self.region_depth, self.region_width, self.region_height) <= 0:
            raise InputError("gripper dimensions must be positive")
        if self.region_width > self.max_width:
            raise InputError("closing width exceeds the gripper opening")

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * np.array([self.region_depth, self.region_width, self.region_height])


@dataclass(frozen=True)
class GraspCandidate:
    grasp_id: int
    contacts: ContactPair
    frame: RigidTransform
    score: float = math.nan  # nan until scored; inf means unstable
    label: GraspLabel | None = None

    @property
    def closing_axis(self) -> np.ndarray:
        return self.frame.rotation[:, 1]

    @property
    def approach(self) -> np.ndarray:
        return self.frame.rotation[:, 0]


def grasp_frame(p1, p2, approach) -> RigidTransform:
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    y = (p2 - p1) / np.linalg.norm(p2 - p1)
    x = np.asarray(approach, dtype=np.float64)
    x = x - y * (x @ y)
    x /= np.linalg.norm(x)
    return RigidTransform(np.column_stack([x, y, np.cross(x, y)]), 0.5 * (p1 + p2))


def approach_directions(closing_axis, n: int = N_APPROACHES) -> np.ndarray:
    """``n`` unit approach vectors evenly rotated about the closing axis,
    starting from the most top-down one."""
    y = np.asarray(closing_axis, dtype=np.float64)
    ref = np.array([0.0, 0.0, -1.0])
    if np.linalg.norm(ref - y * (ref @ y)) < 1e-6:
        ref = np.array([1.0, 0.0, 0.0])
    x0 = ref - y * (ref @ y)
    x0 /= np.linalg.norm(x0)
    x1 = np.cross(y, x0)
    th = 2.0 * np.pi * np.arange(n) / n
    return np.cos(th)[:, None] * x0 + np.sin(th)[:, None] * x1


def _clears_table(frame: RigidTransform, gripper: GripperModel, table_z) -> bool:
    if table_z is None:
        return True
    he = gripper.half_extents + gripper.finger_thickness
    # lowest corner of the dilated box
    lowest = frame.translation[2] - np.abs(frame.rotation[2]) @ he
    return bool(lowest >= table_z)


def sample_candidates(cloud: PointCloud, gripper: GripperModel = GripperModel(),
                      n_target: int = 100, table_z: float | None = None, rng_seed: int = 0,
                      max_attempts: int | None = None, table_clearance: float = 0.005,
                      prefilter_mu: float = PREFILTER_MU, partner: str = "random") -> list[GraspCandidate]:
    """Draw antipodal contact pairs from ``cloud`` and expand each into up to
    eight approach directions. Returns an empty list if nothing survives."""
    if cloud.normals is None or len(cloud) == 0:
        raise InputError("sampling needs a non-empty cloud with normals")
    if n_target < 1:
        raise InputError("n_target must be at least 1")
    eligible = cloud.normal_valid
    if table_z is not None:
        eligible &= cloud.points[:, 2] > table_z + table_clearance
    idx = np.flatnonzero(eligible)
    if len(idx) < 2:
        log.warning("no eligible points to sample grasps from")
        return []
    pts, nrm = cloud.points[idx], cloud.normals[idx]
    tree = build_kdtree(pts)
    rng = np.random.default_rng(rng_seed)
    budget = max_attempts if max_attempts is not None else 20 * n_target
    out: list[GraspCandidate] = []
    for _ in range(budget):
        i = int(rng.integers(len(pts)))
        nbrs = np.asarray(sorted(tree.query_ball_point(pts[i], gripper.max_width)), dtype=np.int64)
        nbrs = nbrs[np.linalg.norm(pts[nbrs] - pts[i], axis=1) > 1e-6]
        if not len(nbrs):
            continue
        ok = force_closure_batch(pts[i], pts[nbrs], nrm[i], nrm[nbrs], prefilter_mu)
        good = nbrs[ok]
        if not len(good):
            continue
        if partner == "best":
            a1, a2 = contact_angles(pts[i], pts[good], nrm[i], nrm[good])
            j = int(good[np.argmin(np.maximum(a1, a2))])
        else:
            j = int(good[rng.integers(len(good))])
        contacts = ContactPair(pts[i], pts[j], nrm[i], nrm[j])
        for a in approach_directions(pts[j] - pts[i]):
            frame = grasp_frame(pts[i], pts[j], a)
            if not _clears_table(frame, gripper, table_z):
                continue
            out.append(GraspCandidate(len(out), contacts, frame))
            if len(out) >= n_target:
                return out
    if not out:
        log.warning("no grasp candidates found within the attempt budget")
    return out


def closing_region_indices(cloud: PointCloud, frame: RigidTransform, gripper: GripperModel,
                           tree=None) -> np.ndarray:
    """Indices of cloud points inside the closing-region box of ``frame``."""
    he = gripper.half_extents
    if tree is not None:
        cand = np.asarray(sorted(tree.query_ball_point(frame.translation, float(np.linalg.norm(he)) + 1e-9)),
                          dtype=np.int64)
    else:
        cand = np.arange(len(cloud))
    local = (cloud.points[cand] - frame.translation) @ frame.rotation
    inside = np.all(np.abs(local) <= he, axis=1)
    return cand[inside]


def extract_closing_region(cloud: PointCloud, g: GraspCandidate | RigidTransform,
                           gripper: GripperModel = GripperModel(), rng_seed=0,
                           n_points: int = CRC_POINTS, tree=None) -> np.ndarray:
    """Points in the closing region, in grasp coordinates divided by the
    gripper opening, resampled to exactly ``n_points`` rows.

    Raises InsufficientSupport when fewer than 16 points fall in the region.
    """
    if len(cloud) == 0:
        raise InputError("cloud is empty")
    frame = g.frame if isinstance(g, GraspCandidate) else g
    inside = closing_region_indices(cloud, frame, gripper, tree)
    m = len(inside)
    if m < MIN_SUPPORT:
        raise InsufficientSupport(f"{m} points in closing region (need {MIN_SUPPORT})")
    local = (cloud.points[inside] - frame.translation) @ frame.rotation
    rng = np.random.default_rng(rng_seed)
    if m >= n_points:
        pick = rng.choice(m, n_points, replace=False)
    else:
        pick = rng.permutation(np.concatenate([np.arange(m), rng.integers(m, size=n_points - m)]))
    return local[pick] / gripper.max_width


def score_and_label(candidates, complete_cloud: PointCloud, list_mu=MU_LIST,
                    th_good: float = TH_GOOD, th_bad: float = TH_BAD,
                    max_snap: float = 0.005, tree=None) -> list[GraspCandidate]:
    """Snap contacts onto the complete cloud, then score and label them.

    Candidates whose contacts move more than ``max_snap`` are dropped; the
    order of the rest is preserved.
    """
    candidates = list(candidates)
    if complete_cloud.normals is None:
        raise InputError("complete cloud needs normals")
    if not candidates:
        return []
    if tree is None:
        tree = build_kdtree(complete_cloud.points)
    P1 = np.array([c.contacts.p1 for c in candidates])
    P2 = np.array([c.contacts.p2 for c in candidates])
    d1, i1 = tree.query(P1)
    d2, i2 = tree.query(P2)
    keep = (d1 <= max_snap) & (d2 <= max_snap) & (i1 != i2)
    pts, nrm = complete_cloud.points, complete_cloud.normals
    scores = sweep_scores(pts[i1], pts[i2], nrm[i1], nrm[i2], list_mu)
    out = []
    for k, c in enumerate(candidates):
        if not keep[k]:
            continue
        contacts = ContactPair(pts[i1[k]], pts[i2[k]], nrm[i1[k]], nrm[i2[k]])
        s = float(scores[k])
        out.append(replace(c, contacts=contacts, score=s, label=label(s, th_good, th_bad)))
    return out


GRASP_CSV_COLUMNS = (
    ["scene_id", "grasp_id"]
    + [f"{p}{a}" for p in ("p1", "p2", "n1", "n2") for a in "xyz"]
    + ["gx", "gy", "gz", "rax", "ray", "raz", "mu_score", "label"]
)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_grasps_csv(path_or_file, candidates, scene_id="0"):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(GRASP_CSV_COLUMNS)
        for c in candidates:
            ct = c.contacts
            row = [scene_id, c.grasp_id]
            row += [_fmt(v) for v in np.concatenate([ct.p1, ct.p2, ct.n1, ct.n2])]
            row += [_fmt(v) for v in np.concatenate([c.frame.translation, c.frame.rotvec()])]
            row.append("" if math.isnan(c.score) else ("inf" if math.isinf(c.score) else _fmt(c.score)))
            row.append("" if c.label is None else int(c.label))
            w.writerow(row)
    finally:
        if own:
            f.close()


def read_grasps_csv(path) -> list[tuple[str, GraspCandidate]]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            v = {k: row[k] for k in GRASP_CSV_COLUMNS}
            vec = lambda p: np.array([float(v[f"{p}{a}"]) for a in "xyz"])  # noqa: E731
            contacts = ContactPair(vec("p1"), vec("p2"), vec("n1"), vec("n2"))
            frame = RigidTransform.from_rotvec([float(v["gx"]), float(v["gy"]), float(v["gz"])],
                                               [float(v["rax"]), float(v["ray"]), float(v["raz"])])
            score = math.nan if v["mu_score"] == "" else float(v["mu_score"])
            lab = None if v["label"] == "" else GraspLabel(int(v["label"]))
            out.append((v["scene_id"], GraspCandidate(int(v["grasp_id"]), contacts, frame, score, lab)))
    return out
