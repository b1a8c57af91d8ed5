"""Rigid transforms, the pinhole camera, point clouds and spatial queries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


class InputError(ValueError):
    """Raised when an operation receives malformed or inconsistent input."""


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``x -> R x + t`` (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise InputError(f"expected a 4x4 matrix, got shape {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, x, y=None, z=None) -> "RigidTransform":
        t = np.asarray(x, dtype=np.float64) if y is None else np.array([x, y, z], dtype=np.float64)
        return cls(np.eye(3), t)

    @classmethod
    def rot_z(cls, angle: float) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))

    @classmethod
    def from_rotvec(cls, position, rotvec) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), position)

    def rotvec(self) -> np.ndarray:
        """Axis-angle vector of the rotation (angle in radians times unit axis)."""
        return Rotation.from_matrix(self.rotation).as_rotvec()

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and np.linalg.det(R) > 0
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=np.float64)
        return P @ self.rotation.T + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T


def compose_camera_pose(T_we: RigidTransform, T_ec: RigidTransform) -> RigidTransform:
    """World-from-camera pose from the arm pose and the hand-eye transform."""
    return T_we.compose(T_ec)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    u0: float
    v0: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise InputError("principal point must lie inside the image")

    @classmethod
    def default(cls) -> "CameraIntrinsics":
        return cls(277.0, 277.0, 160.0, 120.0, 320, 240)

    def project(self, points_cam) -> np.ndarray:
        """Pixel coordinates ``(u, v)`` of camera-frame points."""
        P = np.asarray(points_cam, dtype=np.float64)
        u = self.fx * P[..., 0] / P[..., 2] + self.u0
        v = self.fy * P[..., 1] / P[..., 2] + self.v0
        return np.stack([u, v], axis=-1)

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray per pixel, row-major, scaled so that z == 1."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (u - self.u0) / self.fx
        rays[..., 1] = (v - self.v0) / self.fy
        rays[..., 2] = 1.0
        return rays


@dataclass
class DepthImage:
    """Per-pixel camera-frame depth in meters; 0 marks an invalid pixel."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise InputError("depth data must be 2-D (height, width)")
        if np.any(~np.isfinite(d)) or np.any(d < 0):
            raise InputError("depth values must be finite and non-negative")
        self.data = d

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def check_matches(self, K: CameraIntrinsics):
        if (self.width, self.height) != (K.width, K.height):
            raise InputError(
                f"depth is {self.width}x{self.height} but intrinsics are {K.width}x{K.height}")


@dataclass
class PointCloud:
    """``points`` is (N, 3); ``normals`` is (N, 3) or None.

    Rows of ``normals`` that could not be estimated hold NaN.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise InputError("normals and points must have the same count")
            norms = np.linalg.norm(self.normals, axis=1)
            ok = np.isfinite(norms)
            if np.any(np.abs(norms[ok] - 1.0) > 1e-6):
                raise InputError("normals must be unit length")

    def __len__(self):
        return len(self.points)

    @property
    def normal_valid(self) -> np.ndarray:
        if self.normals is None:
            return np.zeros(len(self.points), dtype=bool)
        return np.all(np.isfinite(self.normals), axis=1)

    def transformed(self, T: RigidTransform) -> "PointCloud":
        normals = None if self.normals is None else T.apply_vectors(self.normals)
        return PointCloud(T.apply(self.points), normals)

    def subset(self, mask) -> "PointCloud":
        normals = None if self.normals is None else self.normals[mask]
        return PointCloud(self.points[mask], normals)

    @classmethod
    def empty(cls, with_normals: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)) if with_normals else None)


def backproject(depth: DepthImage, K: CameraIntrinsics, T_wc: RigidTransform) -> PointCloud:
    """Lift valid depth pixels into world-frame points (row-major pixel order)."""
    depth.check_matches(K)
    rays = K.pixel_rays().reshape(-1, 3)
    z = depth.data.reshape(-1)
    valid = z > 0
    cam = rays[valid] * z[valid, None]
    return PointCloud(T_wc.apply(cam))


def build_kdtree(points) -> cKDTree:
    """Exact KD-tree with median splits."""
    return cKDTree(np.asarray(points, dtype=np.float64).reshape(-1, 3),
                   balanced_tree=True, compact_nodes=True)


def radius_count(tree: cKDTree, query, r: float) -> int | np.ndarray:
    """Number of indexed points within distance ``r`` (inclusive) of ``query``.

    ``query`` may be a single 3-vector or an (M, 3) array.
    """
    if r <= 0:
        raise InputError("radius must be positive")
    q = np.asarray(query, dtype=np.float64)
    counts = tree.query_ball_point(q, r, return_length=True)
    if q.ndim == 1:
        return int(counts)
    return np.asarray(counts, dtype=np.int64)


def estimate_normals(cloud: PointCloud, k: int = 30, viewpoint=(0.0, 0.0, 0.0),
                     tree: cKDTree | None = None) -> PointCloud:
    """PCA normals over the ``k`` nearest neighbors, flipped toward ``viewpoint``.

    Neighborhoods whose covariance has rank < 2 get a NaN normal.
    """
    n = len(cloud)
    if k < 3:
        raise InputError("k must be at least 3")
    if n < 3:
        raise InputError("not enough points for normal estimation")
    kk = min(k + 1, n)
    if tree is None:
        tree = build_kdtree(cloud.points)
    _, idx = tree.query(cloud.points, k=kk)
    nbrs = cloud.points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 1] <= 1e-10 * scale) | (evals[:, 2] <= 0)
    to_view = np.asarray(viewpoint, dtype=np.float64) - cloud.points
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = np.nan
    return PointCloud(cloud.points, normals)
