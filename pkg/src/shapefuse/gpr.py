"""Gaussian-process morphable models on a template mesh.

A model is ``template + mu(x) + f(x)`` with ``f`` a zero-mean Gaussian
process. The kernel is piecewise constant: a point is snapped to the
closest surface point of the template and then to the nearest vertex of
that triangle, and the kernel is the 3x3 covariance block of the two
vertices. The covariance is held as a low-rank factor ``F`` with
``K = F F^T`` (rows in interleaved x, y, z order).

Conditioning on observed deformations ``X`` at anchors uses

    mu_p = mu + K_{.X} (K_XX + s2 I)^-1 (X - mu_X)
    K_p  = K - K_{.X} (K_XX + s2 I)^-1 K_{X.}

evaluated through the SVD of the factor rows at the anchors, which stays
exact as ``s2 -> 0``. A dense Cholesky route is kept for cross-checking.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DegenerateDataError, NumericalError, RegistrationError, SingularSystemError, UserInputError
from .kernel import UniversalCovariance
from .mesh import TriMesh, closest_points, embed_points, nearest_vertex_of, on_boundary
from .nicp import NicpConfig, nicp_register, region_config
from .pdm import COVARIANCE_DDOF, ShapeModel, fit_pdm, sign_normalize
from .regression import MAX_SKIP_FRACTION, _run_items

log = logging.getLogger(__name__)

NOISE_SCALE = 1e-4


def _rows(idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return (3 * idx[:, None] + np.arange(3)).ravel()


@dataclass(frozen=True, eq=False)
class GpModel:
    """Template, low-rank covariance factor and mean deformation (N, 3)."""

    template: TriMesh
    factor: np.ndarray
    mean_deformation: np.ndarray | None = None

    def __post_init__(self):
        n = self.template.n_vertices
        f = np.array(self.factor, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != 3 * n:
            raise UserInputError(f"factor must have {3 * n} rows, got shape {f.shape}")
        mu = np.zeros((n, 3)) if self.mean_deformation is None else np.array(self.mean_deformation, dtype=np.float64)
        if mu.shape != (n, 3):
            mu = mu.reshape(n, 3)
        f.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "factor", f)
        object.__setattr__(self, "mean_deformation", mu)

    @classmethod
    def from_covariance(cls, cov: UniversalCovariance, rank: int | None = None) -> "GpModel":
        return cls(cov.template, cov.factor(rank))

    @classmethod
    def from_dense(cls, template: TriMesh, matrix, mean_deformation=None) -> "GpModel":
        """Model from a dense PSD covariance (small negative eigenvalues are clipped)."""
        w, v = np.linalg.eigh(0.5 * (matrix + np.transpose(matrix)))
        keep = w > 1e-12 * max(w.max(), 0.0)
        return cls(template, v[:, keep] * np.sqrt(w[keep]), mean_deformation)

    @classmethod
    def from_shape_model(cls, model: ShapeModel) -> "GpModel":
        return cls(model.mean_mesh, model.basis * np.sqrt(model.eigenvalues))

    @classmethod
    def from_samples(cls, template: TriMesh, shapes: Sequence[TriMesh]) -> "GpModel":
        """Sample mean deformation and sample covariance of ``shapes - template``."""
        shapes = list(shapes)
        if len(shapes) < 2:
            raise DegenerateDataError("a sample covariance needs at least two shapes")
        for s in shapes:
            if not template.same_topology(s):
                raise UserInputError("sample shapes must share the template topology")
        d = np.stack([s.flatten() for s in shapes]) - template.flatten()
        mu = d.mean(axis=0)
        _, s, vt = np.linalg.svd(d - mu, full_matrices=False)
        keep = s > 1e-12 * max(s[0], 0.0) if s.size else s > 0
        f = sign_normalize(vt[keep].T) * (s[keep] / np.sqrt(len(shapes) - COVARIANCE_DDOF))
        return cls(template, f, mu.reshape(-1, 3))

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @property
    def mean_mesh(self) -> TriMesh:
        return self.template.with_vertices(self.template.vertices + self.mean_deformation)

    def covariance_dense(self) -> np.ndarray:
        return self.factor @ self.factor.T

    def block(self, i: int, j: int) -> np.ndarray:
        return self.factor[3 * i:3 * i + 3] @ self.factor[3 * j:3 * j + 3].T

    def kernel_matrix(self, vertex_indices) -> np.ndarray:
        f = self.factor[_rows(vertex_indices)]
        return f @ f.T

    def default_noise(self) -> float:
        """``NOISE_SCALE`` times the mean marginal variance per coordinate."""
        return NOISE_SCALE * float((self.factor**2).sum()) / self.factor.shape[0]

    def sample(self, rng_seed=None, z=None) -> TriMesh:
        if z is None:
            z = np.random.default_rng(rng_seed).standard_normal(self.rank)
        d = self.mean_deformation.ravel() + self.factor @ np.asarray(z, dtype=np.float64).reshape(self.rank)
        return self.template.with_vertices(self.template.flatten() + d)

    def to_shape_model(self, n_components: int | None = None, name: str = "") -> ShapeModel:
        """PCA form: mean is the mean shape, basis the principal directions of ``F``."""
        u, s, _ = np.linalg.svd(self.factor, full_matrices=False)
        keep = s > 1e-12 * s[0] if s.size else s > 0
        u, ev = u[:, keep], s[keep] ** 2
        k = ev.size if n_components is None else min(n_components, ev.size)
        if k < 1:
            raise DegenerateDataError("model has no variance")
        t = self.template
        return ShapeModel(self.mean_mesh.flatten(), sign_normalize(u[:, :k]), ev[:k], t.faces, t.landmarks, name)


def snap_to_vertices(template: TriMesh, points, cap: float | None = None) -> np.ndarray:
    """Closest template surface point, rounded to the nearest vertex of its triangle."""
    f, b = embed_points(template, np.atleast_2d(points), cap)
    return nearest_vertex_of(template, f, b)


def kernel_eval(gp: GpModel, x, y, cap: float | None = None) -> np.ndarray:
    """3x3 kernel value between two points near the template."""
    i, j = snap_to_vertices(gp.template, np.vstack([x, y]), cap)
    return gp.block(int(i), int(j))


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Deformations observed at anchor points, with i.i.d. noise variance."""

    anchor_points: np.ndarray
    deformations: np.ndarray
    noise_sigma2: float = 0.0
    vertex_indices: np.ndarray | None = None

    def __post_init__(self):
        a = np.array(self.anchor_points, dtype=np.float64).reshape(-1, 3)
        d = np.array(self.deformations, dtype=np.float64).reshape(-1, 3)
        if len(a) != len(d):
            raise UserInputError(f"{len(a)} anchors but {len(d)} deformations")
        if not self.noise_sigma2 >= 0:
            raise UserInputError("noise variance must be >= 0")
        object.__setattr__(self, "anchor_points", a)
        object.__setattr__(self, "deformations", d)
        if self.vertex_indices is not None:
            idx = np.asarray(self.vertex_indices, dtype=np.int64).reshape(-1)
            if idx.size != len(a):
                raise UserInputError("vertex_indices must match the anchors")
            object.__setattr__(self, "vertex_indices", idx)

    @classmethod
    def at_vertices(cls, template: TriMesh, idx, deformations, noise_sigma2: float = 0.0) -> "ObservationSet":
        idx = np.asarray(idx, dtype=np.int64)
        return cls(template.vertices[idx], deformations, noise_sigma2, idx)

    def __len__(self):
        return len(self.anchor_points)


def _anchor_vertices(gp: GpModel, obs: ObservationSet, cap) -> np.ndarray:
    if obs.vertex_indices is not None:
        return obs.vertex_indices
    return snap_to_vertices(gp.template, obs.anchor_points, cap)


def gp_posterior(gp: GpModel, obs: ObservationSet, method: str = "svd", cap: float | None = None) -> GpModel:
    """Condition ``gp`` on ``obs``; returns a new model with posterior mean and factor.

    ``method='svd'`` works on the SVD of the factor rows at the anchors and
    is exact for any ``noise_sigma2 >= 0`` (a zero noise uses the
    pseudo-inverse on the observed subspace). ``method='cholesky'`` factors
    the dense ``K_XX + s2 I`` and is used for cross-checking.
    """
    if len(obs) == 0:
        raise UserInputError("observation set is empty")
    idx = _anchor_vertices(gp, obs, cap)
    s2 = float(obs.noise_sigma2)
    if s2 == 0 and np.unique(idx).size < idx.size:
        raise SingularSystemError(
            "duplicate anchors with zero noise make the system singular; use noise_sigma2 > 0"
        )
    rows = _rows(idx)
    F = gp.factor
    LX = F[rows]
    r = obs.deformations.ravel() - gp.mean_deformation.ravel()[rows]
    if method == "svd":
        u, s, vt = np.linalg.svd(LX, full_matrices=False)
        tol = max(LX.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        live = s > tol
        gain = np.zeros_like(s)
        gain[live] = s[live] / (s[live] ** 2 + s2)
        shrink = np.ones_like(s)
        shrink[live] = np.sqrt(s2 / (s[live] ** 2 + s2))
        fv = F @ vt.T
        mean = gp.mean_deformation.ravel() + fv @ (gain * (u.T @ r))
        factor = F - (fv * (1.0 - shrink)) @ vt
    elif method == "cholesky":
        kxx = LX @ LX.T + s2 * np.eye(LX.shape[0])
        try:
            c = cho_factor(kxx, lower=True)
        except LinAlgError as exc:
            raise SingularSystemError(f"K_XX + s2 I is not positive definite: {exc}") from exc
        mean = gp.mean_deformation.ravel() + F @ (LX.T @ cho_solve(c, r))
        m = np.eye(F.shape[1]) - LX.T @ cho_solve(c, LX)
        w, v = np.linalg.eigh(0.5 * (m + m.T))
        factor = F @ (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    else:
        raise UserInputError(f"unknown posterior method {method!r}")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(factor))):
        raise SingularSystemError("posterior solve produced non-finite values")
    return GpModel(gp.template, factor, mean.reshape(-1, 3))


def landmark_posterior(gp: GpModel, template_landmarks: Mapping[str, int] | None, scan_landmarks: Mapping[str, Sequence[float]],
                       noise_sigma2: float | None = None) -> GpModel:
    """Condition on the landmark displacements ``scan - template``.

    ``template_landmarks`` maps labels to template vertex indices (the
    template's own landmarks when ``None``). Every scan label must exist on
    the template.
    """
    tl = dict(gp.template.landmarks if template_landmarks is None else template_landmarks)
    missing = sorted(set(scan_landmarks) - set(tl))
    if missing:
        raise UserInputError(f"scan landmarks without a template counterpart: {missing}")
    if not scan_landmarks:
        raise UserInputError("no scan landmarks given")
    labels = sorted(scan_landmarks)
    idx = np.array([tl[k] for k in labels], dtype=np.int64)
    pts = np.array([scan_landmarks[k] for k in labels], dtype=np.float64)
    s2 = gp.default_noise() if noise_sigma2 is None else noise_sigma2
    obs = ObservationSet.at_vertices(gp.template, idx, pts - gp.template.vertices[idx], s2)
    return gp_posterior(gp, obs)


class IcpResult(NamedTuple):
    mesh: TriMesh
    stats: list
    posterior: GpModel


def icp_refine(gp0: GpModel, scan: TriMesh, iterations: int = 10, max_distance: float | None = None,
               drop_target_boundary: bool = True, noise_sigma2: float | None = None,
               convergence_epsilon: float = 1e-5) -> IcpResult:
    """Fit ``gp0`` to a raw scan by alternating closest points and conditioning.

    Each iteration warps the template by the current posterior mean, finds
    closest scan points, prunes those that are farther than
    ``max_distance`` (default 5% of the scan diagonal) or lie on the scan
    boundary, and recomputes the posterior of ``gp0`` (never of the
    previous posterior) on the surviving deformations ``U - x``.

    Each stats entry holds the iteration number, counts of retained and
    pruned correspondences, the mean residual, the mean vertex motion, and
    the observed template vertices with their scan targets.
    """
    if iterations < 1:
        raise UserInputError("iterations must be >= 1")
    tau = 0.05 * scan.bbox_diagonal if max_distance is None else max_distance
    s2 = gp0.default_noise() if noise_sigma2 is None else noise_sigma2
    x = gp0.template.vertices
    tol = convergence_epsilon * max(scan.bbox_diagonal, gp0.template.bbox_diagonal)
    gp = gp0
    cur = x + gp0.mean_deformation
    stats = []
    for it in range(1, iterations + 1):
        f, b, d = closest_points(scan, cur)
        cp = np.einsum("ij,ijk->ik", b, scan.vertices[scan.faces[f]])
        bnd = on_boundary(scan, f, b) if drop_target_boundary else np.zeros(len(f), dtype=bool)
        far = d > tau
        keep = ~far & ~bnd
        if not keep.any():
            raise RegistrationError(f"iteration {it}: every correspondence was pruned")
        idx = np.flatnonzero(keep)
        obs = ObservationSet.at_vertices(gp0.template, idx, cp[idx] - x[idx], s2)
        gp = gp_posterior(gp0, obs)
        new = x + gp.mean_deformation
        motion = float(np.linalg.norm(new - cur, axis=1).mean())
        stats.append({
            "iteration": it,
            "retained": int(idx.size),
            "pruned_distance": int((far & ~bnd).sum()),
            "pruned_boundary": int(bnd.sum()),
            "mean_residual": float(d[idx].mean()),
            "mean_motion": motion,
            "observed": idx,
            "targets": cp[idx],
        })
        cur = new
        if motion < tol:
            break
    return IcpResult(gp0.template.with_vertices(cur), stats, gp)


def audit_records(stats: list) -> list:
    """JSON-safe copies of ``icp_refine`` stats (arrays dropped)."""
    return [{k: v for k, v in s.items() if not isinstance(v, np.ndarray)} for s in stats]


def default_face_align_config() -> NicpConfig:
    return NicpConfig(stiffness_schedule=(10.0, 3.0, 1.0), max_inner_iterations=5, initial_alignment=False)


@dataclass(frozen=True)
class FaceAlignConfig:
    """Non-rigid alignment of the face region of a reconstruction to its scan.

    ``radius`` is the face extent around the scan's nose tip (when ``None``
    it is the largest nose-tip distance over the template's face vertices).
    ``enabled=False`` skips the step.
    """

    nicp: NicpConfig = field(default_factory=default_face_align_config)
    radius: float | None = None
    scheme: str = "inverse-linear"
    nose_tip: str = "nose_tip"
    enabled: bool = True


def align_face_region(reg: TriMesh, scan: TriMesh, nose_point, radius: float,
                      config: FaceAlignConfig | None = None) -> TriMesh:
    cfg = config or FaceAlignConfig()
    nc = region_config(reg, nose_point, radius, cfg.scheme, cfg.nicp)
    return nicp_register(reg, scan, nc).deformed


def _face_radius(cov: UniversalCovariance, cfg: FaceAlignConfig) -> float:
    if cfg.radius is not None:
        return float(cfg.radius)
    if cov.labels is None or not cov.labels.face.any():
        raise UserInputError("face alignment needs a radius or a covariance with face labels")
    return float(cov.labels.nose_tip_distance[cov.labels.face].max())


def reconstruct_scan(gp: GpModel, scan: TriMesh, scan_landmarks: Mapping, face_cfg: FaceAlignConfig | None,
                     face_radius: float | None, iterations: int = 10, max_distance: float | None = None,
                     drop_target_boundary: bool = True, noise_sigma2: float | None = None) -> IcpResult:
    """Landmark posterior, closest-point refinement and face-region alignment for one scan."""
    gp0 = landmark_posterior(gp, None, scan_landmarks, noise_sigma2)
    res = icp_refine(gp0, scan, iterations, max_distance, drop_target_boundary, noise_sigma2)
    if face_cfg is None or not face_cfg.enabled:
        return res
    if face_cfg.nose_tip not in scan_landmarks:
        raise UserInputError(f"scan lacks the {face_cfg.nose_tip!r} landmark needed for face alignment")
    aligned = align_face_region(res.mesh, scan, scan_landmarks[face_cfg.nose_tip], face_radius, face_cfg)
    return res._replace(mesh=aligned)


def refine_model(cov: UniversalCovariance, truncation_k: int, scans: Sequence[tuple[TriMesh, Mapping]],
                 face_merge_config: FaceAlignConfig | None = None, n_components: int | None = None,
                 rounds: int = 1, iterations: int = 10, max_distance: float | None = None,
                 drop_target_boundary: bool = True, noise_sigma2: float | None = None,
                 jobs: int = 1, name: str = "", audit: list | None = None) -> ShapeModel:
    """Refined PCA model from raw scans.

    1. truncate ``cov`` to ``truncation_k`` components,
    2. reconstruct every scan (landmark posterior, closest-point
       refinement, face-region alignment),
    3. estimate a sample covariance from the reconstructions and repeat the
       reconstruction with it (``rounds`` times),
    4. fit a PCA model on the final reconstructions.

    Failed scans are logged and skipped; more than 10% skipped is an error.
    ``audit`` (a list) receives one record per scan, round and iteration.
    """
    scans = list(scans)
    if len(scans) < 2:
        raise DegenerateDataError("refine_model needs at least two scans")
    if not 1 <= truncation_k <= cov.rank:
        raise UserInputError(f"truncation_k must be in [1, {cov.rank}], got {truncation_k}")
    if rounds < 0:
        raise UserInputError("rounds must be >= 0")
    face_cfg = face_merge_config if face_merge_config is not None else FaceAlignConfig()
    radius = _face_radius(cov, face_cfg) if face_cfg.enabled else None
    gp = GpModel.from_covariance(cov.truncated(truncation_k))

    recon = None
    for rnd in range(rounds + 1):
        def one(k, gp=gp):
            scan, lms = scans[k]
            try:
                return reconstruct_scan(gp, scan, lms, face_cfg, radius, iterations, max_distance,
                                        drop_target_boundary, noise_sigma2)
            except NumericalError as exc:
                log.warning("round %d scan %d skipped: %s", rnd, k, exc)
                return None

        out = _run_items(one, range(len(scans)), jobs)
        skipped = [k for k, o in enumerate(out) if o is None]
        if len(skipped) > MAX_SKIP_FRACTION * len(scans):
            raise NumericalError(f"round {rnd}: {len(skipped)} of {len(scans)} scans failed")
        if audit is not None:
            for k, o in enumerate(out):
                if o is None:
                    audit.append({"round": rnd, "scan": k, "skipped": True})
                    continue
                for rec in audit_records(o.stats):
                    audit.append({"round": rnd, "scan": k, **rec})
        recon = [o.mesh for o in out if o is not None]
        if rnd < rounds:
            gp = GpModel.from_samples(cov.template, recon)
    return fit_pdm(recon, n_components, name=name)
