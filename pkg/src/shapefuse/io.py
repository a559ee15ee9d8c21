"""OBJ / PLY mesh files and landmark sidecars.

Landmarks live next to a mesh as ``<stem>.landmarks.json`` holding
``{"label": vertex_index}``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import MeshError
from .mesh import TriMesh


def landmark_path(mesh_path) -> Path:
    p = Path(mesh_path)
    return p.with_name(p.stem + ".landmarks.json")


def read_landmarks(path) -> dict[str, int]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise MeshError(f"{path}: landmark file must be a JSON object")
    return {str(k): int(v) for k, v in data.items()}


def write_landmarks(path, landmarks) -> None:
    with open(path, "w") as fh:
        json.dump({k: int(v) for k, v in sorted(landmarks.items())}, fh, indent=1)
        fh.write("\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0] not in ("v", "f"):
                continue
            try:
                if parts[0] == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                    continue
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
            if len(idx) < 3:
                raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, faces) -> None:
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for f in np.asarray(faces) + 1:
            fh.write("f {} {} {}\n".format(*map(int, f)))


def read_ply(path):
    ply = PlyData.read(str(path))
    vert = ply["vertex"].data
    vertices = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in ply:
        fdata = ply["face"].data
        name = "vertex_indices" if "vertex_indices" in fdata.dtype.names else "vertex_index"
        polys = [np.asarray(p, dtype=np.int64) for p in fdata[name]]
        tris = [[p[0], p[k], p[k + 1]] for p in polys for k in range(1, len(p) - 1)]
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return vertices, faces


def write_ply(path, vertices, faces, binary: bool = True) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    v = np.empty(len(vertices), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    v["x"], v["y"], v["z"] = vertices.T
    f = np.empty(len(faces), dtype=[("vertex_indices", "i4", (3,))])
    f["vertex_indices"] = np.asarray(faces, dtype=np.int32)
    els = [PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")]
    PlyData(els, text=not binary, byte_order="<").write(str(path))


def load_mesh(path, landmarks=None) -> TriMesh:
    """Read an OBJ or PLY file; the landmark sidecar is picked up if present."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        v, f = read_obj(path)
    elif suffix == ".ply":
        v, f = read_ply(path)
    else:
        raise MeshError(f"{path}: unsupported mesh format {suffix!r}")
    if landmarks is None:
        lp = landmark_path(path)
        landmarks = read_landmarks(lp) if lp.exists() else {}
    return TriMesh(v, f, landmarks)


def save_mesh(path, mesh: TriMesh, binary: bool = True) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh.vertices, mesh.faces)
    elif suffix == ".ply":
        write_ply(path, mesh.vertices, mesh.faces, binary=binary)
    else:
        raise MeshError(f"{path}: unsupported mesh format {suffix!r}")
    if mesh.landmarks:
        write_landmarks(landmark_path(path), mesh.landmarks)


def load_mesh_dir(directory) -> list[TriMesh]:
    """All meshes in a directory, sorted by filename."""
    directory = Path(directory)
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in (".ply", ".obj")
    )
    if not paths:
        raise MeshError(f"{directory}: no .ply/.obj meshes found")
    return [load_mesh(p) for p in paths]
