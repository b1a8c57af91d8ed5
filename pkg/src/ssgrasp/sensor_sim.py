"""Synthetic tabletop scenes and a closed-form depth ray caster.

Stands in for the wrist camera: scenes are built from spheres, boxes and
cylinders resting on a table plane, and depth images are produced by exact
ray/primitive intersection.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._accel import njit, use_numba
from .geom_core import CameraIntrinsics, DepthImage, InputError, RigidTransform

SPHERE, BOX, CYLINDER = 0, 1, 2
_KIND_CODES = {"sphere": SPHERE, "box": BOX, "cylinder": CYLINDER}
_EPS_T = 1e-9


class SceneError(RuntimeError):
    """Scene cannot be (re)arranged, e.g. too crowded for the workspace."""


def _frame_from_axis(axis) -> np.ndarray:
    """Rotation whose third column is ``axis``."""
    z = np.asarray(axis, dtype=np.float64)
    z = z / np.linalg.norm(z)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = ref - z * (ref @ z)
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(z, x), z])


@dataclass(frozen=True)
class Primitive:
    """One solid. ``size`` holds (radius, -, -) for spheres, half-extents for
    boxes and (radius, half_height, -) for cylinders. ``rotation`` maps the
    local frame to the world; a cylinder's axis is the local z axis."""

    kind: str
    center: np.ndarray
    size: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise InputError(f"unknown primitive type {self.kind!r}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        n_dims = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if np.any(self.size[:n_dims] <= 0):
            raise InputError(f"{self.kind} dimensions must be positive")

    @classmethod
    def sphere(cls, center, radius):
        return cls("sphere", center, [radius, 0.0, 0.0])

    @classmethod
    def box(cls, center, half_extents, rotation=None):
        return cls("box", center, half_extents, np.eye(3) if rotation is None else rotation)

    @classmethod
    def cylinder(cls, center, radius, half_height, axis=(0.0, 0.0, 1.0)):
        return cls("cylinder", center, [radius, half_height, 0.0], _frame_from_axis(axis))

    @property
    def axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def vertical_extent(self) -> float:
        """Half of the primitive's extent along world z."""
        R = self.rotation
        if self.kind == "sphere":
            return float(self.size[0])
        if self.kind == "box":
            return float(np.abs(R[2]) @ self.size)
        az = abs(R[2, 2])
        return float(az * self.size[1] + self.size[0] * np.sqrt(max(0.0, 1.0 - az * az)))

    def footprint_radius(self) -> float:
        """Radius of a circle (about the center) enclosing the xy projection."""
        R = self.rotation
        if self.kind == "sphere":
            return float(self.size[0])
        if self.kind == "box":
            signs = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).reshape(3, -1).T
            corners = (signs * self.size) @ R.T
            return float(np.max(np.linalg.norm(corners[:, :2], axis=1)))
        return float(np.linalg.norm(R[:2, 2]) * self.size[1] + self.size[0])

    def signed_distance(self, points) -> np.ndarray:
        """Exact signed distance (negative inside)."""
        q = (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - self.size
        else:
            d = np.stack([np.linalg.norm(q[..., :2], axis=-1) - self.size[0],
                          np.abs(q[..., 2]) - self.size[1]], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside

    def outward_normal(self, points) -> np.ndarray:
        """Analytic outward unit normal at (near-)surface points."""
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        q = (P - self.center) @ self.rotation
        if self.kind == "sphere":
            n = q
        elif self.kind == "box":
            d = np.abs(q) - self.size
            face = np.argmax(d, axis=1)
            n = np.zeros_like(q)
            n[np.arange(len(q)), face] = np.sign(q[np.arange(len(q)), face])
        else:
            radial = np.linalg.norm(q[:, :2], axis=1) - self.size[0]
            cap = np.abs(q[:, 2]) - self.size[1]
            n = np.zeros_like(q)
            side = radial >= cap
            n[side, :2] = q[side, :2]
            n[~side, 2] = np.sign(q[~side, 2])
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n @ self.rotation.T

    def to_json(self) -> dict:
        out = {"type": self.kind, "center": self.center.tolist()}
        if self.kind == "sphere":
            out["radius"] = float(self.size[0])
        elif self.kind == "box":
            out["half_extents"] = self.size.tolist()
            out["rotation"] = self.rotation.tolist()
        else:
            out["radius"] = float(self.size[0])
            out["half_height"] = float(self.size[1])
            out["axis"] = self.axis.tolist()
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Primitive":
        kind = d.get("type")
        if kind == "sphere":
            return cls.sphere(d["center"], d["radius"])
        if kind == "box":
            return cls.box(d["center"], d["half_extents"], d.get("rotation"))
        if kind == "cylinder":
            return cls.cylinder(d["center"], d["radius"], d["half_height"], d.get("axis", (0, 0, 1)))
        raise InputError(f"unknown primitive type {kind!r}")


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()
    table_height: float | None = 0.0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if self.table_height is not None:
            for p in self.primitives:
                if p.center[2] - p.vertical_extent() < self.table_height - 1e-6:
                    raise InputError(f"{p.kind} at {p.center.tolist()} dips below the table")

    def surface_distance(self, points) -> np.ndarray:
        """Unsigned distance to the nearest primitive surface or the table plane."""
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d = np.full(len(P), np.inf)
        for p in self.primitives:
            d = np.minimum(d, np.abs(p.signed_distance(P)))
        if self.table_height is not None:
            d = np.minimum(d, np.abs(P[:, 2] - self.table_height))
        return d

    def to_json(self) -> dict:
        return {"table_height": self.table_height,
                "primitives": [p.to_json() for p in self.primitives]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(tuple(Primitive.from_json(p) for p in d.get("primitives", [])),
                   d.get("table_height", 0.0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_json(json.loads(Path(path).read_text()))


def _pack(scene: Scene):
    n = len(scene.primitives)
    kinds = np.array([_KIND_CODES[p.kind] for p in scene.primitives], dtype=np.int64)
    centers = np.array([p.center for p in scene.primitives]).reshape(n, 3)
    rots = np.array([p.rotation for p in scene.primitives]).reshape(n, 3, 3)
    sizes = np.array([p.size for p in scene.primitives]).reshape(n, 3)
    return kinds, centers, rots, sizes


@njit(cache=True)
def _hit_primitive(kind, ox, oy, oz, dx, dy, dz, s0, s1, s2):
    """Smallest t > eps along the local-frame ray, or inf."""
    best = np.inf
    if kind == 0:
        a = dx * dx + dy * dy + dz * dz
        b = 2.0 * (ox * dx + oy * dy + oz * dz)
        c = ox * ox + oy * oy + oz * oz - s0 * s0
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = np.sqrt(disc)
            t0 = (-b - sq) / (2.0 * a)
            t1 = (-b + sq) / (2.0 * a)
            if t0 > 1e-9:
                best = t0
            elif t1 > 1e-9:
                best = t1
    elif kind == 1:
        tmin = -np.inf
        tmax = np.inf
        o = (ox, oy, oz)
        d = (dx, dy, dz)
        h = (s0, s1, s2)
        for i in range(3):
            if abs(d[i]) < 1e-15:
                if abs(o[i]) > h[i]:
                    return np.inf
            else:
                ta = (-h[i] - o[i]) / d[i]
                tb = (h[i] - o[i]) / d[i]
                if ta > tb:
                    ta, tb = tb, ta
                if ta > tmin:
                    tmin = ta
                if tb < tmax:
                    tmax = tb
        if tmax >= tmin and tmax > 1e-9:
            best = tmin if tmin > 1e-9 else tmax
    else:
        a = dx * dx + dy * dy
        if a > 1e-18:
            b = 2.0 * (ox * dx + oy * dy)
            c = ox * ox + oy * oy - s0 * s0
            disc = b * b - 4.0 * a * c
            if disc >= 0.0:
                sq = np.sqrt(disc)
                for t in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
                    if t > 1e-9 and t < best and abs(oz + t * dz) <= s1:
                        best = t
        if abs(dz) > 1e-18:
            for zc in (-s1, s1):
                t = (zc - oz) / dz
                if t > 1e-9 and t < best:
                    x = ox + t * dx
                    y = oy + t * dy
                    if x * x + y * y <= s0 * s0:
                        best = t
    return best


@njit(cache=True)
def _raycast_numba(origin, dirs, kinds, centers, rots, sizes, has_table, table_h, max_range):
    m = dirs.shape[0]
    out = np.zeros(m)
    for i in range(m):
        dwx, dwy, dwz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = np.inf
        for p in range(kinds.shape[0]):
            rx = origin[0] - centers[p, 0]
            ry = origin[1] - centers[p, 1]
            rz = origin[2] - centers[p, 2]
            R = rots[p]
            ox = R[0, 0] * rx + R[1, 0] * ry + R[2, 0] * rz
            oy = R[0, 1] * rx + R[1, 1] * ry + R[2, 1] * rz
            oz = R[0, 2] * rx + R[1, 2] * ry + R[2, 2] * rz
            dx = R[0, 0] * dwx + R[1, 0] * dwy + R[2, 0] * dwz
            dy = R[0, 1] * dwx + R[1, 1] * dwy + R[2, 1] * dwz
            dz = R[0, 2] * dwx + R[1, 2] * dwy + R[2, 2] * dwz
            t = _hit_primitive(kinds[p], ox, oy, oz, dx, dy, dz,
                               sizes[p, 0], sizes[p, 1], sizes[p, 2])
            if t < best:
                best = t
        if has_table and abs(dwz) > 1e-18:
            t = (table_h - origin[2]) / dwz
            if t > 1e-9 and t < best:
                best = t
        if best <= max_range:
            out[i] = best
    return out


def _hit_numpy(kind, o, d, size):
    """Vectorized counterpart of ``_hit_primitive`` for one primitive, many rays."""
    m = len(d)
    best = np.full(m, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == SPHERE:
            a = np.einsum("ij,ij->i", d, d)
            b = 2.0 * (d @ o)
            c = o @ o - size[0] ** 2
            disc = b * b - 4.0 * a * c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = (-b - sq) / (2.0 * a)
            t1 = (-b + sq) / (2.0 * a)
            t = np.where(t0 > _EPS_T, t0, np.where(t1 > _EPS_T, t1, np.inf))
            best = np.where(ok, t, np.inf)
        elif kind == BOX:
            tmin = np.full(m, -np.inf)
            tmax = np.full(m, np.inf)
            miss = np.zeros(m, dtype=bool)
            for i in range(3):
                par = np.abs(d[:, i]) < 1e-15
                miss |= par & (abs(o[i]) > size[i])
                ta = (-size[i] - o[i]) / d[:, i]
                tb = (size[i] - o[i]) / d[:, i]
                lo = np.where(par, -np.inf, np.minimum(ta, tb))
                hi = np.where(par, np.inf, np.maximum(ta, tb))
                tmin = np.maximum(tmin, lo)
                tmax = np.minimum(tmax, hi)
            ok = (~miss) & (tmax >= tmin) & (tmax > _EPS_T)
            best = np.where(ok, np.where(tmin > _EPS_T, tmin, tmax), np.inf)
        else:
            r, hh = size[0], size[1]
            a = d[:, 0] ** 2 + d[:, 1] ** 2
            b = 2.0 * (o[0] * d[:, 0] + o[1] * d[:, 1])
            c = o[0] ** 2 + o[1] ** 2 - r * r
            disc = b * b - 4.0 * a * c
            ok = (a > 1e-18) & (disc >= 0)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            for t in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
                good = ok & (t > _EPS_T) & (t < best) & (np.abs(o[2] + t * d[:, 2]) <= hh)
                best = np.where(good, t, best)
            okz = np.abs(d[:, 2]) > 1e-18
            for zc in (-hh, hh):
                t = (zc - o[2]) / d[:, 2]
                x = o[0] + t * d[:, 0]
                y = o[1] + t * d[:, 1]
                good = okz & (t > _EPS_T) & (t < best) & (x * x + y * y <= r * r)
                best = np.where(good, t, best)
    return best


def _raycast_numpy(origin, dirs, kinds, centers, rots, sizes, has_table, table_h, max_range):
    best = np.full(len(dirs), np.inf)
    for p in range(len(kinds)):
        R = rots[p]
        o = (origin - centers[p]) @ R
        d = dirs @ R
        best = np.minimum(best, _hit_numpy(kinds[p], o, d, sizes[p]))
    if has_table:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (table_h - origin[2]) / dirs[:, 2]
        good = (np.abs(dirs[:, 2]) > 1e-18) & (t > _EPS_T) & (t < best)
        best = np.where(good, t, best)
    return np.where(best <= max_range, best, 0.0)


def render_depth(scene: Scene, K: CameraIntrinsics, T_wc: RigidTransform,
                 max_range: float = 0.6, noise_sigma: float = 0.0,
                 rng_seed: int | None = None) -> DepthImage:
    """Ray-cast ``scene`` from camera pose ``T_wc`` (world-from-camera).

    Depth is the camera-frame z of the nearest hit; misses and hits beyond
    ``max_range`` are 0. Optional Gaussian depth noise is seeded.
    """
    if max_range <= 0:
        raise InputError("max_range must be positive")
    # camera-frame rays have z == 1, so the ray parameter equals depth
    dirs = np.ascontiguousarray(K.pixel_rays().reshape(-1, 3) @ T_wc.rotation.T)
    kinds, centers, rots, sizes = _pack(scene)
    has_table = scene.table_height is not None
    table_h = float(scene.table_height) if has_table else 0.0
    kernel = _raycast_numba if use_numba() else _raycast_numpy
    depth = kernel(T_wc.translation.copy(), dirs, kinds, centers, rots, sizes,
                   has_table, table_h, float(max_range))
    if noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        valid = depth > 0
        noisy = depth + rng.normal(0.0, noise_sigma, size=depth.shape)
        depth = np.where(valid, np.clip(noisy, 1e-6, max_range), 0.0)
    return DepthImage(depth.reshape(K.height, K.width))


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera pose at ``position`` whose +z optical axis points at ``target``.

    Image x runs right and image y down relative to ``up``.
    """
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), position)


def hemisphere_poses(center, radius: float = 0.35, n: int = 20,
                     elevation_range=(30.0, 45.0, 60.0)) -> list[RigidTransform]:
    """``n`` cameras on a sphere around ``center``, all looking at it.

    Azimuths are evenly spaced; elevations (degrees) cycle through
    ``elevation_range``.
    """
    if n < 1 or radius <= 0:
        raise InputError("need n >= 1 and radius > 0")
    center = np.asarray(center, dtype=np.float64)
    elevations = np.radians(np.atleast_1d(np.asarray(elevation_range, dtype=np.float64)))
    poses = []
    for i in range(n):
        az = 2.0 * np.pi * i / n
        el = elevations[i % len(elevations)]
        offset = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(center + offset, center))
    return poses


def randomize_scene(scene: Scene, rng_seed: int,
                    workspace=((-0.1, 0.1), (-0.1, 0.1)),
                    clearance: float = 0.002, max_attempts: int = 1000) -> Scene:
    """Re-pose every primitive: random yaw, random xy in ``workspace``, resting
    on the table. Footprint circles are kept ``clearance`` apart, which
    guarantees the same clearance between the solids."""
    rng = np.random.default_rng(rng_seed)
    table = 0.0 if scene.table_height is None else float(scene.table_height)
    (x0, x1), (y0, y1) = workspace
    placed = []
    for prim in scene.primitives:
        for _ in range(max_attempts):
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            xy = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            rot = RigidTransform.rot_z(yaw).rotation @ prim.rotation
            cand = replace(prim, rotation=rot)
            rho = cand.footprint_radius()
            if all(np.linalg.norm(xy - q.center[:2]) >= rho + q.footprint_radius() + clearance
                   for q in placed):
                center = np.array([xy[0], xy[1], table + cand.vertical_extent()])
                placed.append(replace(cand, center=center))
                break
        else:
            raise SceneError(f"could not place {prim.kind} after {max_attempts} attempts; "
                             "scene is overcrowded for the workspace")
    return Scene(tuple(placed), scene.table_height)
