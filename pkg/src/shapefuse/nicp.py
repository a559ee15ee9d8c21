"""Weighted optimal-step non-rigid ICP.

Each template vertex carries a 4x3 affine transform. For a fixed stiffness
``a`` and landmark weight ``b`` the objective is

    sum_i w_i * rho_i(X) + a**2 * |(M kron G) X|**2 + b**2 * |D_L X - L|**2

where ``rho_i`` is the squared distance from the deformed vertex to its
closest target point, truncated at ``max_distance**2``. Correspondences
that are too far away or land on the target boundary are pruned and cost
the constant ``max_distance**2``. Alternating closest-point updates with
the exact normal-equation solve is a majorize-minimize scheme, so the
objective is non-increasing over the inner iterations of each level.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import RegistrationError, SingularSystemError, UserInputError
from .mesh import (
    TriMesh,
    closest_points,
    distance_weights,
    on_boundary,
    procrustes_align,
    SimilarityTransform,
)

log = logging.getLogger(__name__)


def default_stiffness(levels: int = 8, start: float = 50.0, stop: float = 0.5) -> tuple:
    return tuple(float(x) for x in np.geomspace(start, stop, levels))


@dataclass(frozen=True)
class NicpConfig:
    stiffness_schedule: tuple = field(default_factory=default_stiffness)
    landmark_pairs: tuple = ()
    landmark_weight_schedule: tuple | None = None
    per_vertex_weights: tuple | None = None
    max_inner_iterations: int = 10
    convergence_epsilon: float = 1e-5
    max_distance: float | None = None
    drop_target_boundary: bool = True
    gamma: float = 1.0
    initial_alignment: bool = True
    with_scale: bool = True

    def __post_init__(self):
        s = tuple(float(x) for x in self.stiffness_schedule)
        if not s or min(s) <= 0 or any(b >= a for a, b in zip(s, s[1:])):
            raise UserInputError("stiffness_schedule must be positive and strictly decreasing")
        lw = self.landmark_weight_schedule
        lw = tuple([1.0] * len(s)) if lw is None else tuple(float(x) for x in lw)
        if len(lw) != len(s) or min(lw) < 0:
            raise UserInputError("landmark_weight_schedule must match stiffness_schedule and be >= 0")
        pairs = tuple((int(i), tuple(float(c) for c in p)) for i, p in self.landmark_pairs)
        w = self.per_vertex_weights
        if w is not None:
            w = tuple(float(x) for x in np.asarray(w, dtype=np.float64).ravel())
            if min(w) < 0 or max(w) > 1:
                raise UserInputError("per_vertex_weights must lie in [0, 1]")
        object.__setattr__(self, "stiffness_schedule", s)
        object.__setattr__(self, "landmark_weight_schedule", lw)
        object.__setattr__(self, "landmark_pairs", pairs)
        object.__setattr__(self, "per_vertex_weights", w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["landmark_pairs"] = [[i, list(p)] for i, p in self.landmark_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NicpConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise UserInputError(f"unknown NICP config keys: {sorted(extra)}")
        return cls(**d)


class NicpResult(NamedTuple):
    deformed: TriMesh
    residual: np.ndarray
    history: list


class _Correspondences(NamedTuple):
    points: np.ndarray
    distance: np.ndarray
    keep: np.ndarray
    boundary: np.ndarray


def _vertex_matrix(vertices) -> sp.csr_matrix:
    n = len(vertices)
    vals = np.hstack([vertices, np.ones((n, 1))]).ravel()
    rows = np.repeat(np.arange(n), 4)
    cols = np.arange(4 * n)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, 4 * n))


def _stiffness_gram(mesh: TriMesh, gamma: float) -> sp.csc_matrix:
    e = mesh.edges
    ne, n = len(e), mesh.n_vertices
    m = sp.csr_matrix(
        (np.r_[-np.ones(ne), np.ones(ne)], (np.r_[np.arange(ne), np.arange(ne)], np.r_[e[:, 0], e[:, 1]])),
        shape=(ne, n),
    )
    mg = sp.kron(m, sp.diags([1.0, 1.0, 1.0, gamma]), format="csr")
    return (mg.T @ mg).tocsc(), mg


def correspondences(target: TriMesh, points, max_distance: float, drop_boundary: bool) -> _Correspondences:
    f, b, d = closest_points(target, points)
    cp = np.einsum("ij,ijk->ik", b, target.vertices[target.faces[f]])
    bnd = on_boundary(target, f, b) if drop_boundary else np.zeros(len(f), dtype=bool)
    keep = (d <= max_distance) & ~bnd
    return _Correspondences(cp, d, keep, bnd)


def _affine_init(n: int, tf: SimilarityTransform) -> np.ndarray:
    block = np.vstack([tf.scale * tf.rotation.T, tf.translation[None]])
    return np.tile(block, (n, 1))


def nicp_register(template: TriMesh, target: TriMesh, config: NicpConfig | None = None) -> NicpResult:
    """Deform ``template`` onto ``target``; output keeps template topology.

    ``history`` holds one record per evaluated state with the level index,
    stiffness, inner iteration, objective value, number of retained
    correspondences and their mean residual.
    """
    cfg = config or NicpConfig()
    if template.n_vertices == 0 or target.n_faces == 0:
        raise UserInputError("template and target must be non-empty")
    n = template.n_vertices
    w = np.ones(n) if cfg.per_vertex_weights is None else np.asarray(cfg.per_vertex_weights)
    if w.size != n:
        raise UserInputError(f"per_vertex_weights has {w.size} entries, template has {n} vertices")
    lm_idx = np.array([i for i, _ in cfg.landmark_pairs], dtype=np.int64)
    lm_pts = np.array([p for _, p in cfg.landmark_pairs], dtype=np.float64).reshape(-1, 3)
    if lm_idx.size and (lm_idx.min() < 0 or lm_idx.max() >= n):
        raise UserInputError("landmark index out of range")

    tau = cfg.max_distance if cfg.max_distance is not None else 0.05 * target.bbox_diagonal
    tau2 = tau * tau
    tf = SimilarityTransform.identity()
    if cfg.initial_alignment and len(lm_idx) >= 3:
        tf = procrustes_align(template.vertices[lm_idx], lm_pts, with_scale=cfg.with_scale)
    X = _affine_init(n, tf)

    D = _vertex_matrix(template.vertices)
    DL = D[lm_idx] if lm_idx.size else None
    S, MG = _stiffness_gram(template, cfg.gamma)
    DLtDL = (DL.T @ DL).tocsc() if DL is not None else None
    DLtL = DL.T @ lm_pts if DL is not None else None
    diag = max(template.bbox_diagonal, target.bbox_diagonal)
    tol_move = cfg.convergence_epsilon * diag

    def energy(X, corr, alpha, beta):
        v = D @ X
        d2 = np.where(corr.keep, ((v - corr.points) ** 2).sum(axis=1), tau2)
        e = float((w * d2).sum()) + alpha**2 * float((np.asarray(MG @ X) ** 2).sum())
        if DL is not None:
            e += beta**2 * float(((DL @ X - lm_pts) ** 2).sum())
        return e

    history = []
    V = D @ X
    corr = correspondences(target, V, tau, cfg.drop_target_boundary)
    for level, (alpha, beta) in enumerate(zip(cfg.stiffness_schedule, cfg.landmark_weight_schedule)):
        e_prev = energy(X, corr, alpha, beta)
        history.append(_record(level, alpha, 0, e_prev, corr, w))
        for it in range(1, cfg.max_inner_iterations + 1):
            active = w * corr.keep
            n_constraints = int((active > 0).sum()) + (len(lm_idx) if beta > 0 else 0)
            if n_constraints < 4:
                raise SingularSystemError(
                    f"only {n_constraints} active constraints at stiffness {alpha:g}; "
                    "correspondences are over-pruned"
                )
            Wd = sp.diags(active)
            A = alpha**2 * S + (D.T @ Wd @ D)
            rhs = D.T @ (active[:, None] * corr.points)
            if DL is not None and beta > 0:
                A = A + beta**2 * DLtDL
                rhs = rhs + beta**2 * DLtL
            try:
                lu = splu(A.tocsc())
                X_new = lu.solve(np.asarray(rhs))
            except RuntimeError as exc:
                raise SingularSystemError(f"NICP normal equations are singular: {exc}") from exc
            if not np.all(np.isfinite(X_new)):
                raise SingularSystemError("NICP normal equations are singular")
            V_new = D @ X_new
            corr_new = correspondences(target, V_new, tau, cfg.drop_target_boundary)
            e_new = energy(X_new, corr_new, alpha, beta)
            if e_new > e_prev + 1e-12 * max(abs(e_prev), 1.0):
                # boundary pruning can raise the objective; stop this level
                log.debug("level %d: objective rose %.6g -> %.6g, stopping", level, e_prev, e_new)
                break
            move = float(np.linalg.norm(V_new - V, axis=1).mean())
            X, V, corr, e_prev = X_new, V_new, corr_new, e_new
            history.append(_record(level, alpha, it, e_new, corr, w))
            if move < tol_move:
                break
    return NicpResult(template.with_vertices(V), corr.distance, history)


def _record(level, alpha, it, e, corr, w):
    kept = corr.keep & (w > 0)
    return {
        "level": level,
        "stiffness": alpha,
        "iteration": it,
        "energy": e,
        "retained": int(kept.sum()),
        "boundary_pruned": int(corr.boundary.sum()),
        "mean_residual": float(corr.distance[kept].mean()) if kept.any() else float("nan"),
    }


def shared_landmark_pairs(source: TriMesh, target: TriMesh) -> tuple:
    labels = sorted(set(source.landmarks) & set(target.landmarks))
    return tuple((source.landmarks[k], tuple(target.vertices[target.landmarks[k]])) for k in labels)


def crop_to_face(head_instance: TriMesh, face_mean: TriMesh, config: NicpConfig | None = None, snap: bool = True) -> TriMesh:
    """Describe the facial part of ``head_instance`` in the face topology.

    Landmarks shared by label between the two meshes (plus any pairs in
    ``config``) drive the initial alignment; without any the call is
    refused. With ``snap`` the registered vertices are finally moved to
    their closest points on the head surface.
    """
    cfg = config or NicpConfig()
    pairs = shared_landmark_pairs(face_mean, head_instance) + tuple(cfg.landmark_pairs)
    if len(pairs) < 3:
        raise RegistrationError(
            "crop_to_face needs at least 3 landmarks shared by label to resolve the initial alignment"
        )
    res = nicp_register(face_mean, head_instance, replace(cfg, landmark_pairs=pairs))
    out = res.deformed
    if snap:
        f, b, _ = closest_points(head_instance, out.vertices)
        out = out.with_vertices(np.einsum("ij,ijk->ik", b, head_instance.vertices[head_instance.faces[f]]))
    return out


def region_config(mesh: TriMesh, anchor, radius: float, scheme: str = "inverse-linear",
                  base: NicpConfig | None = None) -> NicpConfig:
    """Config that fits only the vertices of ``mesh`` within ``radius`` of ``anchor``.

    Data weights decay with distance from ``anchor`` (cutoff ``radius`` for
    ``'inverse-linear'``, width ``radius / 3`` for ``'gaussian'``) and are zero
    beyond ``radius``. Zero-weight vertices are pinned to their own positions.
    """
    if radius <= 0:
        raise UserInputError("region radius must be positive")
    base = base or NicpConfig()
    anchor = np.asarray(anchor, dtype=np.float64)
    scale = radius if scheme == "inverse-linear" else radius / 3.0
    weights = distance_weights(mesh, anchor, scheme, scale)
    d = np.linalg.norm(mesh.vertices - anchor, axis=1)
    return _pinned(mesh, np.where(d < radius, weights, 0.0), base)


def _pinned(mesh: TriMesh, weights, base: NicpConfig) -> NicpConfig:
    weights = np.asarray(weights, dtype=np.float64)
    pinned = np.flatnonzero(weights == 0)
    pairs = tuple((int(i), tuple(mesh.vertices[i])) for i in pinned)
    return replace(base, per_vertex_weights=tuple(weights), landmark_pairs=pairs,
                   landmark_weight_schedule=None)


def merge_config(head: TriMesh, face: TriMesh, nose_tip: str = "nose_tip", scheme: str = "inverse-linear",
                 base: NicpConfig | None = None, weights=None) -> NicpConfig:
    """Config used by :func:`merge_face_into_head`.

    Data weights decay with distance from the face's nose tip; the region
    radius is the largest nose-tip distance over the face mesh. Explicit
    ``weights`` override the distance weights.
    """
    for m, name in ((head, "head"), (face, "face")):
        if nose_tip not in m.landmarks:
            raise UserInputError(f"{name} mesh lacks the {nose_tip!r} landmark")
    nose = face.vertices[face.landmarks[nose_tip]]
    if weights is not None:
        return _pinned(head, weights, base or NicpConfig())
    extent = float(np.linalg.norm(face.vertices - nose, axis=1).max())
    return region_config(head, nose, extent, scheme, base)


def merge_face_into_head(head: TriMesh, face: TriMesh, nose_tip: str = "nose_tip", scheme: str = "inverse-linear",
                         config: NicpConfig | None = None, weights=None) -> TriMesh:
    """Blend a detailed face into a head mesh; result has head topology.

    Interior face-region vertices follow the face surface, vertices beyond
    the face extent stay where they are, and the band in between is
    resolved by the stiffness term.
    """
    cfg = merge_config(head, face, nose_tip, scheme, config, weights)
    return nicp_register(head, face, cfg).deformed
