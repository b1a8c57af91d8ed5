"""Single-view grasp planning: depth preprocessing, candidate sampling,
closing-region classification and ranking."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierModel, predict_scores
from .geom_core import (CameraIntrinsics, DepthImage, InputError, PointCloud, RigidTransform,
                        backproject, build_kdtree, estimate_normals)
from .grasp_sampling import (GraspCandidate, GripperModel, InsufficientSupport,
                             extract_closing_region, sample_candidates)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkspaceConfig:
    depth_range: tuple = (0.0, 0.6)
    x_range: tuple = (-0.2, 0.2)
    y_range: tuple = (-0.2, 0.5)
    ransac_iterations: int = 200
    inlier_threshold: float = 0.003
    table_clearance: float = 0.005
    max_plane_tilt_deg: float = 20.0
    min_plane_fraction: float = 0.2
    normal_k: int = 30

    def __post_init__(self):
        for name in ("depth_range", "x_range", "y_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InputError(f"{name} is empty")
        if self.inlier_threshold <= 0 or self.ransac_iterations < 1 or self.table_clearance < 0:
            raise InputError("RANSAC settings must be positive")


@dataclass
class PreprocessResult:
    cloud: PointCloud
    plane: np.ndarray | None  # (a, b, c, d), unit normal pointing up
    table_z: float | None

    @property
    def plane_found(self) -> bool:
        return self.plane is not None

    @property
    def empty(self) -> bool:
        return len(self.cloud) == 0


def fit_plane_ransac(points, iterations=200, threshold=0.003, max_tilt_deg=20.0, rng_seed=0):
    """Dominant near-horizontal plane by RANSAC.

    Returns ``(plane, inlier_mask)`` with ``plane = (a, b, c, d)``,
    ``a x + b y + c z + d = 0`` and ``c > 0``; ``(None, None)`` if no
    admissible plane was hypothesized.
    """
    P = np.asarray(points, dtype=np.float64)
    if len(P) < 3:
        return None, None
    rng = np.random.default_rng(rng_seed)
    cos_tilt = np.cos(np.radians(max_tilt_deg))
    best, best_count = None, -1
    for _ in range(iterations):
        a, b, c = P[rng.choice(len(P), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        if n[2] < 0:
            n = -n
        if n[2] < cos_tilt:
            continue
        count = int(np.count_nonzero(np.abs(P @ n - n @ a) <= threshold))
        if count > best_count:
            best, best_count = np.append(n, -n @ a), count
    if best is None:
        return None, None
    return best, np.abs(P @ best[:3] + best[3]) <= threshold


def preprocess(depth: DepthImage, K: CameraIntrinsics, T_wc: RigidTransform,
               ws: WorkspaceConfig = WorkspaceConfig(), rng_seed: int = 0) -> PreprocessResult:
    """Depth clamp, back-projection, workspace crop, table removal, normals."""
    lo, hi = ws.depth_range
    d = depth.data
    clamped = DepthImage(np.where((d > lo) & (d <= hi), d, 0.0))
    pc = backproject(clamped, K, T_wc)
    x, y = pc.points[:, 0], pc.points[:, 1]
    keep = (x > ws.x_range[0]) & (x < ws.x_range[1]) & (y > ws.y_range[0]) & (y < ws.y_range[1])
    pc = pc.subset(keep)
    plane, inliers = fit_plane_ransac(pc.points, ws.ransac_iterations, ws.inlier_threshold,
                                      ws.max_plane_tilt_deg, rng_seed)
    table_z = None
    if plane is not None and np.count_nonzero(inliers) >= ws.min_plane_fraction * len(pc):
        height = pc.points @ plane[:3] + plane[3]
        table_z = float(np.mean(pc.points[inliers, 2]))
        pc = pc.subset(~inliers & (height > ws.table_clearance))
    else:
        if len(pc):
            log.warning("no table plane found; keeping all points")
        plane = None
    if len(pc) < 3:
        return PreprocessResult(PointCloud.empty(with_normals=True), plane, table_z)
    pc = estimate_normals(pc, min(ws.normal_k, len(pc) - 1), T_wc.translation)
    return PreprocessResult(pc, plane, table_z)


@dataclass(frozen=True)
class RankedGrasp:
    candidate: GraspCandidate
    score: float


@dataclass
class PlanResult:
    grasps: list
    n_candidates: int
    prep_time: float  # seconds

    @property
    def status(self) -> str:
        return "ok" if self.grasps else "no_viable_grasp"


def rank(candidates, scores) -> list[RankedGrasp]:
    """Sort by score descending, ties by grasp id ascending."""
    pairs = sorted(zip(candidates, scores), key=lambda cs: (-cs[1], cs[0].grasp_id))
    return [RankedGrasp(c, float(s)) for c, s in pairs]


def plan(cloud: PointCloud, model: ClassifierModel, gripper: GripperModel = GripperModel(),
         k: int = 10, rng_seed: int = 0, table_z: float | None = None,
         n_candidates: int = 600, t_start: float | None = None) -> PlanResult:
    """Top-``k`` grasps on a single-view cloud, scored by the classifier.

    ``t_start`` (a ``time.perf_counter`` value) lets the caller start the
    preparation-time clock earlier, e.g. before loading the depth image.
    """
    t0 = time.perf_counter() if t_start is None else t_start
    if len(cloud) == 0:
        raise InputError("cloud is empty")
    cands = sample_candidates(cloud, gripper, n_candidates, table_z, rng_seed, partner="best")
    tree = build_kdtree(cloud.points)
    ok, regions = [], []
    for c in cands:
        try:
            regions.append(extract_closing_region(cloud, c, gripper, [rng_seed, c.grasp_id], tree=tree))
        except InsufficientSupport:
            continue
        ok.append(c)
    if not ok:
        return PlanResult([], len(cands), time.perf_counter() - t0)
    scores = predict_scores(model, np.stack(regions))
    ranked = rank(ok, scores)[:max(k, 0)]
    return PlanResult(ranked, len(cands), time.perf_counter() - t0)


def plan_from_depth(depth: DepthImage, K: CameraIntrinsics, T_wc: RigidTransform,
                    model: ClassifierModel, gripper: GripperModel = GripperModel(),
                    ws: WorkspaceConfig = WorkspaceConfig(), k: int = 10, rng_seed: int = 0,
                    n_candidates: int = 600, t_start: float | None = None) -> PlanResult:
    t0 = time.perf_counter() if t_start is None else t_start
    pre = preprocess(depth, K, T_wc, ws, rng_seed)
    if pre.empty:
        return PlanResult([], 0, time.perf_counter() - t0)
    return plan(pre.cloud, model, gripper, k, rng_seed, pre.table_z, n_candidates, t0)
