"""Truncated signed distance fusion of posed depth images (Curless & Levoy)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, use_numba
from .geom_core import CameraIntrinsics, DepthImage, InputError, PointCloud, RigidTransform

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = ((-0.2, 0.2), (-0.2, 0.5), (0.0, 0.3))


@dataclass
class TsdfVolume:
    """Dense voxel grid. Voxel ``(i, j, k)`` has its center at
    ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``; ``tsdf`` is stored
    normalized by ``trunc_dist``."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    trunc_dist: float
    w_max: float = 64.0
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or self.trunc_dist <= 0 or min(self.dims) < 1:
            raise InputError("voxel_size, trunc_dist and dims must be positive")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    @classmethod
    def from_bounds(cls, bounds, voxel_size=0.002, trunc_factor=4.0, w_max=64.0) -> "TsdfVolume":
        lo = np.array([b[0] for b in bounds], dtype=np.float64)
        hi = np.array([b[1] for b in bounds], dtype=np.float64)
        dims = np.ceil((hi - lo) / voxel_size - 1e-9).astype(int)
        return cls(lo, voxel_size, tuple(dims), trunc_factor * voxel_size, w_max)

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.trunc_dist,
                          self.w_max, self.tsdf.copy(), self.weight.copy())

    def voxel_centers(self, i) -> np.ndarray:
        """World coordinates of all voxel centers in x-slab ``i``, shape (ny, nz, 3)."""
        _, ny, nz = self.dims
        j, k = np.meshgrid(np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([np.full_like(j, i), j, k], axis=-1).astype(np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size

    def save(self, path):
        """One text header line, then interleaved little-endian float32 (tsdf, weight)."""
        nx, ny, nz = self.dims
        ox, oy, oz = self.origin
        header = f"TSDF1 {nx} {ny} {nz} {self.voxel_size:.9g} {ox:.9g} {oy:.9g} {oz:.9g}\n"
        body = np.stack([self.tsdf, self.weight], axis=-1).astype("<f4")
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(body.tobytes())

    @classmethod
    def load(cls, path, trunc_factor=4.0, w_max=64.0) -> "TsdfVolume":
        with open(path, "rb") as f:
            tok = f.readline().decode("ascii").split()
            if len(tok) != 8 or tok[0] != "TSDF1":
                raise InputError(f"{path}: bad TSDF header")
            dims = tuple(int(t) for t in tok[1:4])
            voxel = float(tok[4])
            body = np.frombuffer(f.read(), dtype="<f4").reshape(*dims, 2)
        return cls(np.array(tok[5:8], dtype=np.float64), voxel, dims, trunc_factor * voxel, w_max,
                   body[..., 0].astype(np.float64), body[..., 1].astype(np.float64))


@njit(cache=True)
def _integrate_numba(tsdf, weight, origin, voxel, trunc, w_max, R_cw, t_cw, depth,
                     fx, fy, u0, v0):
    nx, ny, nz = tsdf.shape
    h, w = depth.shape
    for i in range(nx):
        x = origin[0] + (i + 0.5) * voxel
        for j in range(ny):
            y = origin[1] + (j + 0.5) * voxel
            for k in range(nz):
                z = origin[2] + (k + 0.5) * voxel
                cz = R_cw[2, 0] * x + R_cw[2, 1] * y + R_cw[2, 2] * z + t_cw[2]
                if cz <= 0.0:
                    continue
                cx = R_cw[0, 0] * x + R_cw[0, 1] * y + R_cw[0, 2] * z + t_cw[0]
                cy = R_cw[1, 0] * x + R_cw[1, 1] * y + R_cw[1, 2] * z + t_cw[1]
                u = int(np.floor(fx * cx / cz + u0 + 0.5))
                v = int(np.floor(fy * cy / cz + v0 + 0.5))
                if u < 0 or u >= w or v < 0 or v >= h:
                    continue
                d = depth[v, u]
                if d <= 0.0:
                    continue
                sdf = d - cz
                if sdf <= -trunc:
                    continue
                val = min(1.0, sdf / trunc)
                wt = weight[i, j, k]
                tsdf[i, j, k] = (wt * tsdf[i, j, k] + val) / (wt + 1.0)
                weight[i, j, k] = min(wt + 1.0, w_max)


def _integrate_numpy(tsdf, weight, origin, voxel, trunc, w_max, R_cw, t_cw, depth,
                     fx, fy, u0, v0):
    nx, ny, nz = tsdf.shape
    h, w = depth.shape
    j, k = np.meshgrid(np.arange(ny), np.arange(nz), indexing="ij")
    y = origin[1] + (j + 0.5) * voxel
    z = origin[2] + (k + 0.5) * voxel
    for i in range(nx):
        x = origin[0] + (i + 0.5) * voxel
        cz = R_cw[2, 0] * x + R_cw[2, 1] * y + R_cw[2, 2] * z + t_cw[2]
        cx = R_cw[0, 0] * x + R_cw[0, 1] * y + R_cw[0, 2] * z + t_cw[0]
        cy = R_cw[1, 0] * x + R_cw[1, 1] * y + R_cw[1, 2] * z + t_cw[1]
        front = cz > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.floor(fx * cx / cz + u0 + 0.5)
            v = np.floor(fy * cy / cz + v0 + 0.5)
        ok = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        ui = np.where(ok, u, 0).astype(np.int64)
        vi = np.where(ok, v, 0).astype(np.int64)
        d = depth[vi, ui]
        sdf = d - cz
        ok &= (d > 0.0) & (sdf > -trunc)
        if not ok.any():
            continue
        val = np.minimum(1.0, sdf[ok] / trunc)
        ts, wt = tsdf[i], weight[i]
        wv = wt[ok]
        ts[ok] = (wv * ts[ok] + val) / (wv + 1.0)
        wt[ok] = np.minimum(wv + 1.0, w_max)


def integrate(vol: TsdfVolume, depth: DepthImage, K: CameraIntrinsics,
              T_wc: RigidTransform) -> TsdfVolume:
    """Fuse one posed depth frame into ``vol`` in place; returns ``vol``."""
    depth.check_matches(K)
    T_cw = T_wc.inverse()
    kernel = _integrate_numba if use_numba() else _integrate_numpy
    kernel(vol.tsdf, vol.weight, vol.origin, float(vol.voxel_size), float(vol.trunc_dist),
           float(vol.w_max), np.ascontiguousarray(T_cw.rotation), T_cw.translation.copy(),
           np.ascontiguousarray(depth.data), float(K.fx), float(K.fy), float(K.u0), float(K.v0))
    return vol


def _gradient_at(tsdf, idx):
    """Central-difference gradient (one-sided at the borders) at voxel indices (M, 3)."""
    g = np.empty(idx.shape, dtype=np.float64)
    for ax in range(3):
        n = tsdf.shape[ax]
        lo = idx.copy()
        hi = idx.copy()
        lo[:, ax] = np.maximum(idx[:, ax] - 1, 0)
        hi[:, ax] = np.minimum(idx[:, ax] + 1, n - 1)
        span = (hi[:, ax] - lo[:, ax]).astype(np.float64)
        diff = tsdf[tuple(hi.T)] - tsdf[tuple(lo.T)]
        g[:, ax] = np.where(span > 0, diff / np.maximum(span, 1.0), 0.0)
    return g


def extract_surface(vol: TsdfVolume) -> PointCloud:
    """Zero crossings along voxel edges, linearly interpolated.

    Normals follow the TSDF gradient, i.e. they point into free space.
    Points closer than ``voxel_size / 4`` are merged (first one kept).
    """
    pts, nrm = [], []
    ts, wt = vol.tsdf, vol.weight
    for ax in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax] = slice(0, -1)
        b[ax] = slice(1, None)
        t0, t1 = ts[tuple(a)], ts[tuple(b)]
        mask = (wt[tuple(a)] > 0) & (wt[tuple(b)] > 0) & ((t0 < 0) != (t1 < 0))
        idx0 = np.argwhere(mask)
        if not len(idx0):
            continue
        v0, v1 = t0[mask], t1[mask]
        frac = v0 / (v0 - v1)
        idx1 = idx0.copy()
        idx1[:, ax] += 1
        p = vol.origin + (idx0 + 0.5) * vol.voxel_size
        p[:, ax] += frac * vol.voxel_size
        g = (1.0 - frac)[:, None] * _gradient_at(ts, idx0) + frac[:, None] * _gradient_at(ts, idx1)
        pts.append(p)
        nrm.append(g)
    if not pts:
        log.warning("TSDF volume has no observed zero crossing; surface is empty")
        return PointCloud.empty(with_normals=True)
    P = np.concatenate(pts)
    N = np.concatenate(nrm)
    norm = np.linalg.norm(N, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        N = np.where(norm > 1e-12, N / norm, np.nan)
    keys = np.floor((P - vol.origin) / (vol.voxel_size / 4.0)).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    keep = np.sort(first)
    return PointCloud(P[keep], N[keep])


@dataclass
class FusionConfig:
    voxel_size: float = 0.002
    trunc_factor: float = 4.0
    w_max: float = 64.0
    bounds: tuple = field(default_factory=lambda: DEFAULT_BOUNDS)

    @classmethod
    def for_table(cls, table_height: float, **kwargs) -> "FusionConfig":
        (x, y, _) = DEFAULT_BOUNDS
        return cls(bounds=(x, y, (table_height, table_height + 0.3)), **kwargs)


def fuse_views(frames, K: CameraIntrinsics, config: FusionConfig | None = None) -> PointCloud:
    """Integrate every ``(DepthImage, T_wc)`` frame and extract the complete cloud."""
    frames = list(frames)
    if not frames:
        raise InputError("need at least one frame")
    cfg = config or FusionConfig()
    vol = TsdfVolume.from_bounds(cfg.bounds, cfg.voxel_size, cfg.trunc_factor, cfg.w_max)
    for depth, T_wc in frames:
        integrate(vol, depth, K, T_wc)
    return extract_surface(vol)
