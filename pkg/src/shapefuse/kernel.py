"""Universal covariance over a template by blending two model covariances.

For template vertices ``i, j`` embedded in triangles ``t_i, t_j`` of a model
mean mesh with barycentric coordinates ``c^i, c^j`` the blended 3x3 block is

    K^{ij} = sum_{v,k} w_vk K^{t_i[v], t_j[k]} / sum_{v,k} w_vk,
    w_vk = (c^i_v + c^j_k) / 2,         sum_{v,k} w_vk = 3.

Over all pairs this equals ``(X + X^T) / 6`` with ``X = A K S^T``, where
``A`` interpolates with barycentric weights and ``S`` sums the three
triangle vertices (both expanded to coordinates). Pairs of face vertices mix
head and face blocks with ``rho_ij = (rho_i + rho_j) / 2``; every other pair
uses the head block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DenseCapError, UserInputError
from .mesh import TriMesh, closest_points, embed_points, SurfacePoint
from .pdm import ShapeModel, model_from_covariance, sign_normalize, EIGENVALUE_FLOOR
from .store import read_artifact, write_artifact

DENSE_VERTEX_CAP = 2000


@dataclass(frozen=True, eq=False)
class RegionLabels:
    face: np.ndarray
    nose_tip_distance: np.ndarray
    rho: np.ndarray

    @property
    def n_face(self) -> int:
        return int(self.face.sum())

    def with_rho(self, rho) -> "RegionLabels":
        rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), self.rho.shape).copy()
        return RegionLabels(self.face, self.nose_tip_distance, rho)


def classify_vertices(template: TriMesh, registered_face_mean: TriMesh, cap: float, nose_tip: str = "nose_tip") -> RegionLabels:
    """FACE where a template vertex is within ``cap`` of the registered face mean."""
    if nose_tip not in template.landmarks:
        raise UserInputError(f"template lacks the {nose_tip!r} landmark")
    _, _, d = closest_points(registered_face_mean, template.vertices)
    face = d <= cap
    nd = np.linalg.norm(template.vertices - template.vertices[template.landmarks[nose_tip]], axis=1)
    dmax = nd[face].max() if face.any() else 0.0
    rho = np.clip(nd / dmax, 0.0, 1.0) if dmax > 0 else np.ones_like(nd)
    return RegionLabels(face, nd, rho)


def blend_weights(bary_i, bary_j) -> np.ndarray:
    """3x3 weights ``(c_i[v] + c_j[k]) / 2``."""
    return 0.5 * (np.asarray(bary_i)[:, None] + np.asarray(bary_j)[None, :])


def blended_block(model_cov: np.ndarray, faces: np.ndarray, emb_i: SurfacePoint, emb_j: SurfacePoint) -> np.ndarray:
    """Blended 3x3 covariance block for two embedded points (direct 9-term sum)."""
    faces = np.asarray(faces)
    nf = len(faces)
    for e in (emb_i, emb_j):
        if not 0 <= e.face_index < nf:
            raise UserInputError(f"embedding references face {e.face_index}, mesh has {nf}")
    w = blend_weights(emb_i.barycentric, emb_j.barycentric)
    ti, tj = faces[emb_i.face_index], faces[emb_j.face_index]
    out = np.zeros((3, 3))
    for v in range(3):
        for k in range(3):
            a, b = 3 * ti[v], 3 * tj[k]
            out += w[v, k] * model_cov[a:a + 3, b:b + 3]
    return out / w.sum()


def _interp_mats(face_idx, bary, faces, n_model):
    """Coordinate-expanded barycentric (A) and vertex-sum (S) matrices."""
    n = len(face_idx)
    tri = faces[face_idx]
    rows = np.repeat(np.arange(n), 3)
    A = sp.csr_matrix((bary.ravel(), (rows, tri.ravel())), shape=(n, n_model))
    S = sp.csr_matrix((np.ones(3 * n), (rows, tri.ravel())), shape=(n, n_model))
    eye = sp.identity(3, format="csr")
    return sp.kron(A, eye, format="csr"), sp.kron(S, eye, format="csr")


def blended_covariance(model: ShapeModel, face_idx, bary) -> np.ndarray:
    """All-pairs blended covariance of ``model`` at embedded points."""
    A3, S3 = _interp_mats(np.asarray(face_idx), np.asarray(bary), model.faces, model.n_vertices)
    L = model.basis * np.sqrt(model.eigenvalues)
    X = np.asarray(A3 @ L) @ np.asarray(S3 @ L).T
    return (X + X.T) / 6.0


def psd_repair(matrix: np.ndarray):
    """Nearest (Frobenius) PSD matrix by eigenvalue clipping.

    Returns the repaired matrix and the clipped-mass ratio
    ``sum|negative eigenvalues| / sum|eigenvalues|``. PSD input is returned
    unchanged.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if not np.allclose(m, m.T, atol=1e-8 * max(1.0, np.abs(m).max())):
        raise UserInputError("psd_repair needs a symmetric matrix")
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    if w.min() >= 0:
        return m, 0.0
    total = np.abs(w).sum()
    clipped = float(-w[w < 0].sum() / total) if total > 0 else 0.0
    out = (v * np.clip(w, 0.0, None)) @ v.T
    return 0.5 * (out + out.T), clipped


@dataclass(frozen=True, eq=False)
class UniversalCovariance:
    matrix: np.ndarray
    template: TriMesh
    labels: RegionLabels | None = None
    provenance: dict = field(default_factory=dict)
    clipped_mass: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3 * self.template.n_vertices,) * 2:
            raise UserInputError("covariance size does not match the template")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @cached_property
    def eig(self):
        """Eigenpairs, largest first, sign-normalised; tiny ones dropped."""
        w, v = np.linalg.eigh(self.matrix)
        order = np.argsort(w)[::-1]
        w, v = w[order], v[:, order]
        keep = int((w > EIGENVALUE_FLOOR * max(w[0], 0.0)).sum()) if w[0] > 0 else 0
        return w[:keep], sign_normalize(v[:, :keep])

    @property
    def rank(self) -> int:
        return self.eig[0].size

    def factor(self, rank: int | None = None) -> np.ndarray:
        """``L`` with ``L L^T`` the covariance truncated to ``rank`` components."""
        w, v = self.eig
        k = w.size if rank is None else rank
        if not 1 <= k <= w.size:
            raise UserInputError(f"rank must be in [1, {w.size}], got {k}")
        return v[:, :k] * np.sqrt(w[:k])

    def truncated(self, k: int) -> "UniversalCovariance":
        """Covariance rebuilt from its first ``k`` principal components."""
        if k == self.rank:
            return self
        L = self.factor(k)
        return UniversalCovariance(L @ L.T, self.template, self.labels,
                                   {**self.provenance, "truncated": k}, self.clipped_mass)

    def to_shape_model(self, n_components: int | None = None, name: str = "") -> ShapeModel:
        t = self.template
        return model_from_covariance(t.flatten(), self.matrix, t.faces, t.landmarks, n_components, name)

    def save(self, directory) -> dict:
        arrays = {"matrix": self.matrix, "vertices": self.template.vertices, "faces": self.template.faces}
        if self.labels is not None:
            arrays["face_label"] = self.labels.face.astype(np.int64)
            arrays["nose_tip_distance"] = self.labels.nose_tip_distance
            arrays["rho"] = self.labels.rho
        meta = {"provenance": self.provenance, "clipped_mass": self.clipped_mass,
                "landmarks": dict(self.template.landmarks)}
        return write_artifact(directory, "covariance", meta, arrays)

    @classmethod
    def load(cls, directory) -> "UniversalCovariance":
        meta, a = read_artifact(directory, "covariance")
        t = TriMesh(a["vertices"], a["faces"], meta["landmarks"])
        labels = None
        if "face_label" in a:
            labels = RegionLabels(a["face_label"].astype(bool), a["nose_tip_distance"], a["rho"])
        return cls(a["matrix"], t, labels, meta["provenance"], meta["clipped_mass"])


def assemble_universal_covariance(head_model: ShapeModel, face_model: ShapeModel, face_mean_registered: TriMesh,
                                  template: TriMesh, labels: RegionLabels, head_mean_mesh: TriMesh | None = None,
                                  embedding_cap: float | None = None):
    """Blended covariance before PSD repair.

    Returns ``(K_U, K_head)`` where ``K_head`` is the pure head-blended
    covariance on the template.
    """
    if template.n_vertices > DENSE_VERTEX_CAP:
        raise DenseCapError(
            f"template has {template.n_vertices} vertices; dense assembly is capped at {DENSE_VERTEX_CAP}"
        )
    head_mesh = head_model.mean_mesh if head_mean_mesh is None else head_mean_mesh
    if head_mesh.n_vertices != head_model.n_vertices:
        raise UserInputError("head mean mesh does not match the head model")
    if face_mean_registered.n_vertices != face_model.n_vertices:
        raise UserInputError("registered face mean does not match the face model")
    h_face, h_bary = embed_points(head_mesh, template.vertices, embedding_cap)
    k_head = blended_covariance(head_model, h_face, h_bary)
    k_u = k_head.copy()
    fidx = np.flatnonzero(labels.face)
    if fidx.size:
        f_face, f_bary = embed_points(face_mean_registered, template.vertices[fidx], embedding_cap)
        k_face = blended_covariance(face_model, f_face, f_bary)
        rho3 = np.repeat(labels.rho[fidx], 3)
        rho_ij = 0.5 * (rho3[:, None] + rho3[None, :])
        c = np.repeat(3 * fidx, 3) + np.tile(np.arange(3), fidx.size)
        sub = np.ix_(c, c)
        k_u[sub] = rho_ij * k_head[sub] + (1.0 - rho_ij) * k_face
    return k_u, k_head


def build_universal_covariance(head_model: ShapeModel, face_model: ShapeModel, face_mean_registered: TriMesh,
                               template: TriMesh, labels: RegionLabels, head_mean_mesh: TriMesh | None = None,
                               embedding_cap: float | None = None, provenance: dict | None = None) -> UniversalCovariance:
    k_u, _ = assemble_universal_covariance(head_model, face_model, face_mean_registered, template, labels,
                                           head_mean_mesh, embedding_cap)
    k_u = 0.5 * (k_u + k_u.T)
    repaired, clipped = psd_repair(k_u)
    prov = {"head_model_id": head_model.name, "face_model_id": face_model.name, **(provenance or {})}
    return UniversalCovariance(repaired, template, labels, prov, clipped)


def sample_gpmm(template: TriMesh, cov: UniversalCovariance, rank: int, rng_seed=None, z=None) -> TriMesh:
    """Template plus a zero-mean deformation drawn from the top-``rank`` eigenpairs.

    ``z`` overrides the standard-normal coefficients.
    """
    if rank > cov.rank:
        raise UserInputError(f"rank {rank} exceeds the numerical rank {cov.rank}")
    L = cov.factor(rank)
    if z is None:
        z = np.random.default_rng(rng_seed).standard_normal(rank)
    z = np.asarray(z, dtype=np.float64).reshape(rank)
    return template.with_vertices(template.flatten() + L @ z)
