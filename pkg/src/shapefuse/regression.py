"""Latent-space regression between two shape models.

Pairs of (head, face) parameters are synthesised from the head model, a
linear map from face parameters to head parameters is solved in the least
squares sense, and full heads are predicted from faces with

    S_h = m_h + U_h W U_f^T (S_f - m_f).
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateDataError, NumericalError, SingularSystemError, UserInputError
from .mesh import TriMesh, distance_weights
from .nicp import NicpConfig, crop_to_face, merge_face_into_head, nicp_register, shared_landmark_pairs
from .pdm import ShapeModel, fit_pdm, project_shape, random_params, sample_shape
from .store import read_artifact, write_artifact

log = logging.getLogger(__name__)

MAX_SKIP_FRACTION = 0.10


@dataclass(frozen=True, eq=False)
class ParamPairSet:
    """Column-aligned parameter pairs; ``head_params`` is (n_h, n_r)."""

    head_params: np.ndarray
    face_params: np.ndarray

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.head_params, dtype=np.float64))
        f = np.atleast_2d(np.asarray(self.face_params, dtype=np.float64))
        if h.shape[1] != f.shape[1]:
            raise UserInputError(f"pair counts differ: {h.shape[1]} head vs {f.shape[1]} face")
        object.__setattr__(self, "head_params", h)
        object.__setattr__(self, "face_params", f)

    @property
    def n_r(self) -> int:
        return self.head_params.shape[1]


@dataclass(frozen=True, eq=False)
class RegressionMap:
    matrix: np.ndarray
    source_model_id: str = ""
    target_model_id: str = ""
    n_r_used: int = 0

    def save(self, directory) -> dict:
        meta = {"source_model_id": self.source_model_id,
                "target_model_id": self.target_model_id, "n_r_used": self.n_r_used}
        return write_artifact(directory, "regression-map", meta, {"matrix": self.matrix})

    @classmethod
    def load(cls, directory) -> "RegressionMap":
        meta, arr = read_artifact(directory, "regression-map")
        return cls(arr["matrix"], meta["source_model_id"], meta["target_model_id"], meta["n_r_used"])


def seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _run_items(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def synthesize_param_pairs(head_model: ShapeModel, face_model: ShapeModel, face_crop_config: NicpConfig | None = None,
                           n_r: int | None = None, rng_seed=0, max_retries: int = 3, jobs: int = 1) -> ParamPairSet:
    """Random head parameters paired with the face parameters of their crops.

    Each draw has its own child seed, so results do not depend on ``jobs``.
    A draw whose registration fails is redrawn up to ``max_retries`` times.
    """
    n_f = face_model.n_components
    n_r = 10 * n_f if n_r is None else n_r
    if n_r < n_f + 1:
        raise UserInputError(f"n_r={n_r} is too small for {n_f} face components (need >= {n_f + 1})")
    children = seed_sequence(rng_seed).spawn(n_r)
    face_mean = face_model.mean_mesh

    def one(k):
        rng = np.random.default_rng(children[k])
        for attempt in range(max_retries + 1):
            p_h = random_params(head_model, rng)
            head = sample_shape(head_model, p_h)
            try:
                crop = crop_to_face(head, face_mean, face_crop_config)
            except NumericalError as exc:
                log.warning("pair %d attempt %d: registration failed (%s)", k, attempt, exc)
                continue
            return p_h, project_shape(face_model, crop)
        raise NumericalError(f"pair {k}: registration failed {max_retries + 1} times")

    out = _run_items(one, range(n_r), jobs)
    return ParamPairSet(np.stack([o[0] for o in out], axis=1), np.stack([o[1] for o in out], axis=1))


def solve_regression(pairs: ParamPairSet, ridge: float = 0.0, source_model_id: str = "", target_model_id: str = "") -> RegressionMap:
    """``W = C_h C_f^T (C_f C_f^T + ridge I)^-1``; ridge 0 is the plain normal-equation solution."""
    if ridge < 0:
        raise UserInputError("ridge must be non-negative")
    ch, cf = pairs.head_params, pairs.face_params
    n_f = cf.shape[0]
    if ridge == 0:
        rank = np.linalg.matrix_rank(cf)
        if rank < n_f:
            raise SingularSystemError(
                f"face parameter matrix has rank {rank} < {n_f}; add pairs or use a ridge term"
            )
    gram = cf @ cf.T + ridge * np.eye(n_f)
    w = np.linalg.solve(gram, cf @ ch.T).T
    return RegressionMap(w, source_model_id, target_model_id, pairs.n_r)


def predict_params(face_model: ShapeModel, rmap: RegressionMap, face_shape: TriMesh) -> np.ndarray:
    p_f = project_shape(face_model, face_shape)
    if rmap.matrix.shape[1] != p_f.size:
        raise UserInputError(f"map expects {rmap.matrix.shape[1]} face parameters, model has {p_f.size}")
    return rmap.matrix @ p_f


def predict_full_shape(head_model: ShapeModel, face_model: ShapeModel, rmap: RegressionMap, face_shape: TriMesh) -> TriMesh:
    if rmap.matrix.shape[0] != head_model.n_components:
        raise UserInputError(
            f"map predicts {rmap.matrix.shape[0]} head parameters, model has {head_model.n_components}"
        )
    return sample_shape(head_model, predict_params(face_model, rmap, face_shape))


def latent_to_latent_regression(source_model: ShapeModel, target_model: ShapeModel,
                                paired_shapes: Sequence[tuple[TriMesh, TriMesh]], ridge: float = 0.0) -> RegressionMap:
    """Map from ``source_model`` parameters to ``target_model`` parameters.

    ``paired_shapes`` holds (source shape, target shape) of the same
    identity in the two topologies.
    """
    paired_shapes = list(paired_shapes)
    if len(paired_shapes) < source_model.n_components:
        raise UserInputError(
            f"{len(paired_shapes)} pairs for {source_model.n_components} source components"
        )
    src = np.stack([project_shape(source_model, s) for s, _ in paired_shapes], axis=1)
    dst = np.stack([project_shape(target_model, t) for _, t in paired_shapes], axis=1)
    return solve_regression(ParamPairSet(dst, src), ridge, source_model.name, target_model.name)


def head_center_weights(mesh: TriMesh, scale: float | None = None) -> np.ndarray:
    """Gaussian weights decaying with distance from the vertex centroid."""
    center = mesh.vertices.mean(axis=0)
    if scale is None:
        scale = float(np.linalg.norm(mesh.vertices - center, axis=1).mean())
    return distance_weights(mesh, center, "gaussian", scale)


def fuse_one(head_model, face_model, rmap, face, template, merge_cfg=None, register_cfg=None,
             nose_tip="nose_tip", scheme="inverse-linear") -> TriMesh:
    """Predicted head, merged with the real face, re-registered to ``template``."""
    predicted = predict_full_shape(head_model, face_model, rmap, face)
    merged = merge_face_into_head(predicted, face, nose_tip, scheme, merge_cfg)
    merged = TriMesh(merged.vertices, merged.faces, predicted.landmarks)
    cfg = register_cfg or NicpConfig()
    cfg = replace(cfg, per_vertex_weights=tuple(head_center_weights(merged)),
                  landmark_pairs=shared_landmark_pairs(template, merged) + tuple(cfg.landmark_pairs))
    return nicp_register(template, merged, cfg).deformed


def build_regression_fused_model(head_model: ShapeModel, face_model: ShapeModel, rmap: RegressionMap,
                                 face_corpus: Sequence[TriMesh], template: TriMesh, n_components: int | None = None,
                                 merge_cfg: NicpConfig | None = None, register_cfg: NicpConfig | None = None,
                                 nose_tip: str = "nose_tip", jobs: int = 1, name: str = "") -> ShapeModel:
    """Regression-fused full-head model from a corpus of real faces."""
    face_corpus = list(face_corpus)
    if len(face_corpus) < 2:
        raise DegenerateDataError("need at least two corpus faces to build a model")

    def one(face):
        try:
            return fuse_one(head_model, face_model, rmap, face, template, merge_cfg, register_cfg, nose_tip)
        except NumericalError as exc:
            log.warning("corpus item skipped: %s", exc)
            return None

    heads = _run_items(one, face_corpus, jobs)
    kept = [h for h in heads if h is not None]
    skipped = len(heads) - len(kept)
    if skipped > MAX_SKIP_FRACTION * len(heads):
        raise NumericalError(f"{skipped} of {len(heads)} corpus items failed")
    return fit_pdm(kept, n_components, name=name)
