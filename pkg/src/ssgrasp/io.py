"""Readers and writers for the on-disk formats (PLY, PGM, poses, intrinsics)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom_core import CameraIntrinsics, DepthImage, InputError, PointCloud, RigidTransform


def write_ply(path, cloud: PointCloud):
    path = Path(path)
    has_normals = cloud.normals is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z"]
    if has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines.append("end_header")
    data = np.hstack([cloud.points, cloud.normals]) if has_normals else cloud.points
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        if len(data):
            np.savetxt(f, data, fmt="%.9g")


def read_ply(path) -> PointCloud:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise InputError(f"{path}: not a PLY file")
        fmt = f.readline().split()
        if fmt[:2] != ["format", "ascii"]:
            raise InputError(f"{path}: only ASCII PLY is supported")
        count, props, in_vertex = 0, [], False
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    count = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
        data = np.loadtxt(f, ndmin=2, max_rows=count) if count else np.zeros((0, len(props)))
    if data.shape[0] != count:
        raise InputError(f"{path}: expected {count} vertices, found {data.shape[0]}")
    try:
        pts = data[:, [props.index(c) for c in "xyz"]]
    except ValueError:
        raise InputError(f"{path}: vertex element lacks x/y/z") from None
    normals = None
    if all(c in props for c in ("nx", "ny", "nz")):
        normals = data[:, [props.index(c) for c in ("nx", "ny", "nz")]]
    return PointCloud(pts, normals)


def write_pgm(path, depth: DepthImage):
    """16-bit big-endian binary PGM, depth in millimeters."""
    mm = np.rint(depth.data * 1000.0)
    if mm.max(initial=0) > 65535:
        raise InputError("depth exceeds the 16-bit millimeter range")
    header = f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(mm.astype(">u2").tobytes())


def read_pgm(path) -> DepthImage:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    pos += 1
    if fields[0] != "P5":
        raise InputError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return DepthImage(arr.astype(np.float64) / 1000.0)


def write_poses(path, poses):
    with open(path, "w") as f:
        for T in poses:
            f.write(" ".join(f"{x:.17g}" for x in T.matrix.reshape(-1)) + "\n")


def read_poses(path) -> list[RigidTransform]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 16:
            raise InputError(f"{path}:{lineno}: expected 16 values, got {len(vals)}")
        poses.append(RigidTransform.from_matrix(np.array(vals, dtype=np.float64).reshape(4, 4)))
    return poses


def write_intrinsics(path, K: CameraIntrinsics):
    Path(path).write_text(f"{K.fx:.17g} {K.fy:.17g} {K.u0:.17g} {K.v0:.17g} {K.width} {K.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    vals = Path(path).read_text().split()
    if len(vals) != 6:
        raise InputError(f"{path}: expected 'fx fy u0 v0 width height'")
    fx, fy, u0, v0 = map(float, vals[:4])
    return CameraIntrinsics(fx, fy, u0, v0, int(vals[4]), int(vals[5]))
