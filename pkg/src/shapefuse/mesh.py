"""Triangle meshes, closest-point queries and similarity alignment.

Vertices are stored as an ``(N, 3)`` array. Whenever a mesh is flattened the
ordering is interleaved, ``x1, y1, z1, ..., xN, yN, zN``; every matrix in the
package that is indexed by coordinates uses this ordering.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateDataError, EmbeddingError, MeshError

WEIGHT_SCHEMES = ("inverse-linear", "gaussian")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangulated surface with named landmark vertices."""

    vertices: np.ndarray
    faces: np.ndarray
    landmarks: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64)
        f = _frozen(self.faces, np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if f.size and np.any(
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        ):
            raise MeshError("degenerate face (repeated vertex index)")
        lms = {str(k): int(i) for k, i in dict(self.landmarks).items()}
        for k, i in lms.items():
            if not 0 <= i < len(v):
                raise MeshError(f"landmark {k!r} index {i} out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "landmarks", lms)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def flatten(self) -> np.ndarray:
        return self.vertices.reshape(-1).copy()

    def with_vertices(self, vertices) -> "TriMesh":
        """Same topology and landmarks, new geometry (flat or (N, 3))."""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if len(vertices) != self.n_vertices:
            raise MeshError(
                f"expected {self.n_vertices} vertices, got {len(vertices)}"
            )
        return TriMesh(vertices, self.faces, self.landmarks)

    def same_topology(self, other: "TriMesh") -> bool:
        return self.n_vertices == other.n_vertices and np.array_equal(
            self.faces, other.faces
        )

    def landmark_points(self, labels=None) -> np.ndarray:
        labels = sorted(self.landmarks) if labels is None else list(labels)
        return self.vertices[[self.landmarks[k] for k in labels]]

    @cached_property
    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(np.ptp(self.vertices, axis=0)))

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, shape (E, 2)."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Edges used by exactly one face."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        out = uniq[counts == 1]
        out.setflags(write=False)
        return out

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Vertices touching at least one unshared edge."""
        m = np.zeros(self.n_vertices, dtype=bool)
        m[self.boundary_edges.ravel()] = True
        m.setflags(write=False)
        return m

    def submesh(self, vertex_mask) -> tuple["TriMesh", np.ndarray]:
        """Faces whose three vertices are all kept, re-indexed.

        Returns the sub-mesh and the original indices of its vertices.
        """
        vertex_mask = np.asarray(vertex_mask, dtype=bool)
        keep = np.flatnonzero(vertex_mask)
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        fmask = vertex_mask[self.faces].all(axis=1)
        lms = {k: int(remap[i]) for k, i in self.landmarks.items() if vertex_mask[i]}
        return TriMesh(self.vertices[keep], remap[self.faces[fmask]], lms), keep

    def surface_position(self, sp: "SurfacePoint") -> np.ndarray:
        tri = self.vertices[self.faces[sp.face_index]]
        return np.asarray(sp.barycentric) @ tri

    @cached_property
    def _index(self) -> "_TriangleIndex":
        return _TriangleIndex(self)


@dataclass(frozen=True)
class SurfacePoint:
    """A point on a mesh given as a face and barycentric coordinates."""

    face_index: int
    barycentric: tuple

    def __post_init__(self):
        b = tuple(float(c) for c in self.barycentric)
        if len(b) != 3:
            raise MeshError("barycentric coordinates need 3 entries")
        if min(b) < 0 or abs(sum(b) - 1.0) > 1e-9:
            raise MeshError(f"invalid barycentric coordinates {b}")
        object.__setattr__(self, "barycentric", b)
        object.__setattr__(self, "face_index", int(self.face_index))


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R @ x + t`` acting on row-vector point sets."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation, np.float64).reshape(3, 3)
        t = _frozen(self.translation, np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def apply_mesh(self, mesh: TriMesh) -> TriMesh:
        return mesh.with_vertices(self.apply(mesh.vertices))

    def compose(self, inner: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ inner``."""
        return SimilarityTransform(
            self.scale * inner.scale,
            self.rotation @ inner.rotation,
            self.scale * self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(
            1.0 / self.scale, rt, -(rt @ self.translation) / self.scale
        )


# ---------------------------------------------------------------------------
# point / triangle projection


def project_to_triangles(p, a, b, c):
    """Closest points of ``p[i]`` on triangles ``(a[i], b[i], c[i])``.

    Region-based projection (vertex, edge, interior Voronoi regions); all
    inputs are ``(M, 3)``. Returns barycentric coordinates ``(M, 3)`` and
    distances ``(M,)``.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        den_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(den_bc != 0, (d4 - d3) / den_bc, 0.0)
        den = va + vb + vc
        v_in = np.where(den != 0, vb / den, 1 / 3)
        w_in = np.where(den != 0, vc / den, 1 / 3)

    one, zero = np.ones_like(d1), np.zeros_like(d1)
    choices = [
        np.stack([one, zero, zero], 1),
        np.stack([zero, one, zero], 1),
        np.stack([1 - t_ab, t_ab, zero], 1),
        np.stack([zero, zero, one], 1),
        np.stack([1 - t_ac, zero, t_ac], 1),
        np.stack([zero, 1 - t_bc, t_bc], 1),
    ]
    bary = np.stack([1 - v_in - w_in, v_in, w_in], 1)
    for mask, val in reversed(list(zip([in_a, in_b, in_ab, in_c, in_ac, in_bc], choices))):
        bary = np.where(mask[:, None], val, bary)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return bary, np.linalg.norm(p - closest, axis=1)


class _TriangleIndex:
    """Bounding-sphere candidate filter over triangle centroids."""

    def __init__(self, mesh: TriMesh):
        tri = mesh.vertices[mesh.faces]
        self.centroids = tri.mean(axis=1)
        self.radius = float(
            np.linalg.norm(tri - self.centroids[:, None], axis=2).max()
        ) if len(tri) else 0.0
        self.vertex_tree = cKDTree(mesh.vertices)
        self.centroid_tree = cKDTree(self.centroids)

    def candidates(self, queries):
        d0, _ = self.vertex_tree.query(queries)
        radii = d0 * (1 + 1e-9) + self.radius + 1e-12
        lists = self.centroid_tree.query_ball_point(
            queries, radii, return_sorted=True
        )
        counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
        q_idx = np.repeat(np.arange(len(queries)), counts)
        f_idx = (
            np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
            if counts.sum()
            else np.zeros(0, dtype=np.int64)
        )
        return q_idx, f_idx


def closest_points(mesh: TriMesh, queries, brute_force: bool = False):
    """Closest surface points for a batch of queries.

    Returns ``(face_index, barycentric, distance)`` arrays. Among faces whose
    distance ties with the minimum (to ``1e-12`` of the bounding-box
    diagonal) the lowest face index is returned.
    """
    if mesh.n_faces == 0:
        raise MeshError("closest-point query on an empty mesh")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    nq = len(queries)
    if brute_force:
        q_idx = np.repeat(np.arange(nq), mesh.n_faces)
        f_idx = np.tile(np.arange(mesh.n_faces), nq)
    else:
        q_idx, f_idx = mesh._index.candidates(queries)

    chunk = 2_000_000
    bary = np.empty((len(q_idx), 3))
    dist = np.empty(len(q_idx))
    tri = mesh.vertices[mesh.faces]
    for s in range(0, len(q_idx), chunk):
        sl = slice(s, s + chunk)
        t = tri[f_idx[sl]]
        bary[sl], dist[sl] = project_to_triangles(
            queries[q_idx[sl]], t[:, 0], t[:, 1], t[:, 2]
        )

    # q_idx is sorted; per-query minimum then lowest tied face index
    starts = np.flatnonzero(np.r_[True, q_idx[1:] != q_idx[:-1]])
    dmin = np.minimum.reduceat(dist, starts)
    tol = 1e-12 * max(mesh.bbox_diagonal, 1.0)
    counts = np.diff(np.r_[starts, len(q_idx)])
    tied = dist <= np.repeat(dmin, counts) + tol
    big = np.iinfo(np.int64).max
    best_face = np.minimum.reduceat(np.where(tied, f_idx, big), starts)
    sel = np.flatnonzero(tied & (f_idx == np.repeat(best_face, counts)))
    # one row per query: first match of each group
    sel_q = q_idx[sel]
    first = sel[np.r_[True, sel_q[1:] != sel_q[:-1]]]
    return f_idx[first], bary[first], dist[first]


def closest_point(mesh: TriMesh, query) -> tuple[SurfacePoint, float]:
    """Closest point on ``mesh`` to a single 3D point."""
    f, b, d = closest_points(mesh, np.asarray(query, dtype=np.float64)[None])
    return SurfacePoint(int(f[0]), tuple(b[0])), float(d[0])


def default_embedding_cap(mesh: TriMesh) -> float:
    return 0.05 * mesh.bbox_diagonal


def embed_points(mesh: TriMesh, queries, cap: float | None = None):
    """Batch barycentric embedding; raises if any query is farther than ``cap``."""
    cap = default_embedding_cap(mesh) if cap is None else cap
    f, b, d = closest_points(mesh, queries)
    if np.any(d > cap):
        worst = int(np.argmax(d))
        raise EmbeddingError(
            f"point {worst} is {d[worst]:.4g} from the surface (cap {cap:.4g}); "
            "check the upstream registration"
        )
    return f, b


def barycentric_embed(mesh: TriMesh, query, cap: float | None = None) -> SurfacePoint:
    f, b = embed_points(mesh, np.asarray(query, dtype=np.float64)[None], cap)
    return SurfacePoint(int(f[0]), tuple(b[0]))


def nearest_vertex_of(mesh: TriMesh, face_index, barycentric) -> np.ndarray:
    """Round surface points to the Euclidean-nearest vertex of their triangle."""
    face_index = np.atleast_1d(face_index)
    barycentric = np.atleast_2d(barycentric)
    tri = mesh.vertices[mesh.faces[face_index]]
    pts = np.einsum("ij,ijk->ik", barycentric, tri)
    d = np.linalg.norm(tri - pts[:, None], axis=2)
    return mesh.faces[face_index, np.argmin(d, axis=1)]


def on_boundary(mesh: TriMesh, face_index, barycentric, tol: float = 1e-9) -> np.ndarray:
    """True where a surface point lies on a boundary vertex or boundary edge."""
    face_index = np.atleast_1d(face_index)
    barycentric = np.atleast_2d(barycentric)
    if len(mesh.boundary_edges) == 0:
        return np.zeros(len(face_index), dtype=bool)
    tri = mesh.faces[face_index]
    bmask = mesh.boundary_mask
    support = barycentric > tol
    nsup = support.sum(axis=1)
    out = np.zeros(len(face_index), dtype=bool)
    # vertex case
    vsel = nsup == 1
    if vsel.any():
        out[vsel] = bmask[tri[vsel, np.argmax(barycentric[vsel], axis=1)]]
    # edge case: the two supporting vertices span a boundary edge
    esel = np.flatnonzero(nsup == 2)
    if len(esel):
        edges = np.sort(tri[esel][support[esel]].reshape(-1, 2), axis=1)
        bset = {tuple(e) for e in mesh.boundary_edges.tolist()}
        out[esel] = [tuple(e) in bset for e in edges.tolist()]
    return out


# ---------------------------------------------------------------------------
# alignment and weights


def _check_spread(pts, name):
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] <= 0 or s[1] <= 1e-10 * s[0]:
        raise DegenerateDataError(f"{name} points are coincident or collinear")


def procrustes_align(source, target, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity (or rigid) transform taking source onto target.

    Proper rotations only: a reflection between the sets yields the best
    rotation with a non-zero residual.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must be matching (M, 3) arrays")
    if len(src) < 3:
        raise DegenerateDataError("procrustes alignment needs at least 3 points")
    _check_spread(src, "source")
    _check_spread(dst, "target")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    u, s, vt = np.linalg.svd(xd.T @ xs)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((s * d).sum() / (xs**2).sum()) if with_scale else 1.0
    return SimilarityTransform(scale, rot, mu_d - scale * rot @ mu_s)


def alignment_residual(source, target, transform: SimilarityTransform) -> float:
    """RMS distance between transformed source and target."""
    diff = transform.apply(source) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt((diff**2).sum(axis=1).mean()))


def distance_weights(mesh: TriMesh, anchor, scheme: str = "inverse-linear", scale: float = 1.0) -> np.ndarray:
    """Per-vertex weights in [0, 1] decaying with distance from ``anchor``.

    ``gaussian``: ``exp(-d**2 / (2 scale**2))``. ``inverse-linear``:
    ``max(0, 1 - d / scale)``, so ``scale`` is the cutoff distance.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    d = np.linalg.norm(mesh.vertices - np.asarray(anchor, dtype=np.float64), axis=1)
    if scheme == "gaussian":
        return np.exp(-0.5 * (d / scale) ** 2)
    if scheme == "inverse-linear":
        return np.clip(1.0 - d / scale, 0.0, 1.0)
    raise ValueError(f"unknown weight scheme {scheme!r}; use one of {WEIGHT_SCHEMES}")
