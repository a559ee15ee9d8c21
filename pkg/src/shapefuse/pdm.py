"""PCA point-distribution models.

A model generates shapes as ``mean + basis @ params`` with an orthonormal
``basis`` and parameter variances given by ``eigenvalues``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateDataError, DenseCapError, TopologyMismatchError
from .mesh import TriMesh
from .store import read_artifact, write_artifact

log = logging.getLogger(__name__)

# Sample covariance normalisation is 1 / (n - COVARIANCE_DDOF).
COVARIANCE_DDOF = 1
EIGENVALUE_FLOOR = 1e-12
DENSE_ROW_CAP = 6000


def sign_normalize(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so each column's largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


@dataclass(frozen=True, eq=False)
class ShapeModel:
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    faces: np.ndarray
    landmarks: Mapping[str, int] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        basis = np.array(self.basis, dtype=np.float64)
        ev = np.array(self.eigenvalues, dtype=np.float64).reshape(-1)
        if basis.ndim != 2 or basis.shape[0] != mean.size or basis.shape[1] != ev.size:
            raise ValueError(
                f"inconsistent shapes: mean {mean.shape}, basis {basis.shape}, eigenvalues {ev.shape}"
            )
        if mean.size % 3:
            raise ValueError("mean length must be a multiple of 3")
        if ev.size and (ev.min() <= 0 or np.any(np.diff(ev) > 0)):
            raise ValueError("eigenvalues must be positive and non-increasing")
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(ev.size), atol=1e-8):
            raise ValueError("basis columns are not orthonormal")
        topo = TriMesh(mean.reshape(-1, 3), self.faces, self.landmarks)
        for a in (mean, basis, ev):
            a.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "faces", topo.faces)
        object.__setattr__(self, "landmarks", topo.landmarks)
        object.__setattr__(self, "_mean_mesh", topo)

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    @property
    def mean_mesh(self) -> TriMesh:
        return self._mean_mesh

    def check_topology(self, shape: TriMesh) -> None:
        if shape.n_vertices != self.n_vertices or not np.array_equal(shape.faces, self.faces):
            raise TopologyMismatchError(
                f"shape has {shape.n_vertices} vertices / {shape.n_faces} faces, "
                f"model expects {self.n_vertices} / {len(self.faces)}"
            )

    def save(self, directory) -> dict:
        meta = {"name": self.name, "landmarks": dict(self.landmarks),
                "n_vertices": self.n_vertices, "n_components": self.n_components}
        return write_artifact(directory, "pdm", meta, {
            "mean": self.mean, "basis": self.basis,
            "eigenvalues": self.eigenvalues, "faces": self.faces,
        })

    @classmethod
    def load(cls, directory) -> "ShapeModel":
        meta, arr = read_artifact(directory, "pdm")
        return cls(arr["mean"], arr["basis"], arr["eigenvalues"], arr["faces"],
                   meta["landmarks"], meta.get("name", ""))


def _stack(shapes: Sequence[TriMesh]) -> np.ndarray:
    ref = shapes[0]
    for s in shapes[1:]:
        if not ref.same_topology(s):
            raise TopologyMismatchError("training shapes do not share one topology")
    return np.stack([s.flatten() for s in shapes])


def pca_from_data(data: np.ndarray, n_components: int | None = None):
    """Mean, sign-normalised principal directions and eigenvalues of rows of ``data``."""
    n = len(data)
    mean = data.mean(axis=0)
    _, s, vt = np.linalg.svd(data - mean, full_matrices=False)
    ev = s**2 / (n - COVARIANCE_DDOF)
    if ev.size == 0 or ev[0] <= 0:
        raise DegenerateDataError("training data has zero variance")
    keep = ev >= EIGENVALUE_FLOOR * ev[0]
    k = int(keep.sum())
    if n_components is not None:
        if n_components > k:
            log.warning("requested %d components, data has numerical rank %d", n_components, k)
        k = min(k, n_components)
    return mean, sign_normalize(vt[:k].T), ev[:k]


def fit_pdm(shapes: Sequence[TriMesh], n_components: int | None = None, name: str = "") -> ShapeModel:
    """PCA over shapes in dense correspondence.

    ``n_components`` defaults to ``len(shapes) - 1``; components whose
    eigenvalue is below ``1e-12`` of the largest are dropped.
    """
    shapes = list(shapes)
    if len(shapes) < 2:
        raise DegenerateDataError("fit_pdm needs at least two shapes")
    data = _stack(shapes)
    limit = min(len(shapes) - 1, data.shape[1])
    explicit = n_components is not None
    if n_components is None:
        n_components = limit
    if not 1 <= n_components <= limit:
        raise ValueError(f"n_components must be in [1, {limit}], got {n_components}")
    mean, basis, ev = pca_from_data(data, n_components if explicit else None)
    return ShapeModel(mean, basis, ev, shapes[0].faces, shapes[0].landmarks, name)


def sample_shape(model: ShapeModel, params) -> TriMesh:
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.size != model.n_components:
        raise ValueError(f"expected {model.n_components} parameters, got {params.size}")
    return model.mean_mesh.with_vertices(model.mean + model.basis @ params)


def project_shape(model: ShapeModel, shape: TriMesh) -> np.ndarray:
    """Least-squares parameters of ``shape`` in the model subspace."""
    model.check_topology(shape)
    return model.basis.T @ (shape.flatten() - model.mean)


def reconstruct(model: ShapeModel, shape: TriMesh) -> TriMesh:
    return sample_shape(model, project_shape(model, shape))


def random_params(model: ShapeModel, rng_seed=None, n: int | None = None, truncate: float | None = None) -> np.ndarray:
    """Draw parameters with component ``k`` distributed as ``N(0, eigenvalue_k)``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``. With ``n``
    given, returns an ``(n, n_components)`` array. ``truncate=3`` clamps every
    component to ``±3`` standard deviations.
    """
    rng = np.random.default_rng(rng_seed)
    size = (model.n_components,) if n is None else (n, model.n_components)
    z = rng.standard_normal(size)
    if truncate is not None:
        z = np.clip(z, -truncate, truncate)
    return z * np.sqrt(model.eigenvalues)


def model_covariance(model: ShapeModel, cap: int = DENSE_ROW_CAP) -> np.ndarray:
    """Dense ``basis @ diag(eigenvalues) @ basis.T``."""
    if model.mean.size > cap:
        raise DenseCapError(
            f"dense covariance would have {model.mean.size} rows (cap {cap}); "
            "use the low-rank basis/eigenvalues directly"
        )
    b = model.basis
    k = (b * model.eigenvalues) @ b.T
    return 0.5 * (k + k.T)


def truncate_model(model: ShapeModel, k: int) -> ShapeModel:
    if not 1 <= k <= model.n_components:
        raise ValueError(f"k must be in [1, {model.n_components}], got {k}")
    if k == model.n_components:
        return model
    return ShapeModel(model.mean, model.basis[:, :k], model.eigenvalues[:k],
                      model.faces, model.landmarks, model.name)


def model_from_covariance(mean, cov: np.ndarray, faces, landmarks=None, n_components: int | None = None, name: str = "") -> ShapeModel:
    """PCA model from a dense covariance (symmetric eigendecomposition)."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    if w[0] <= 0:
        raise DegenerateDataError("covariance has no positive eigenvalues")
    keep = int((w >= EIGENVALUE_FLOOR * w[0]).sum())
    if n_components is not None:
        keep = min(keep, n_components)
    return ShapeModel(mean, sign_normalize(v[:, :keep]), w[:keep], faces, landmarks or {}, name)
