"""Synthetic head/face populations with known latent structure.

A world is an ellipsoidal head template (Fibonacci sphere, convex-hull
triangulated, with a small nose bump) and an orthonormal set of smooth
normal-direction deformation modes in three groups:

* face-only modes, supported on the face region,
* cranium-only modes, supported off the face region,
* coupled modes with global support.

Face coefficients ``f`` are the coefficients of the face-only and coupled
modes. Cranium-only coefficients are ``C @ f`` (+ optional independent
noise), so the full head coefficient vector is ``coupling_map @ f``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriMesh

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class WorldConfig:
    n_vertices: int = 800
    radii: tuple = (75.0, 100.0, 95.0)
    # face region: unit-sphere z above this value (300 of 800 vertices)
    face_z_threshold: float = 0.25
    nose_height: float = 12.0
    n_face_modes: int = 6
    n_cranium_modes: int = 4
    n_coupled_modes: int = 4
    coupled_std: tuple = (160.0, 120.0, 90.0, 70.0)
    face_std: tuple = (45.0, 36.0, 28.0, 22.0, 17.0, 13.0)
    coupling_scale: float = 0.6
    cranium_noise_std: float = 0.0
    n_landmarks: int = 30
    cohorts: tuple = ("A", "B")


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    config: WorldConfig
    head_template: TriMesh
    face_mask: np.ndarray
    face_template: TriMesh
    face_vertex_indices: np.ndarray
    true_basis: np.ndarray
    face_coeff_std: np.ndarray
    coupling_map: np.ndarray
    true_eigenvalues: np.ndarray
    groups: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return self.true_basis.shape[1]

    @property
    def n_face_coeffs(self) -> int:
        return self.coupling_map.shape[1]

    def head_from_coeffs(self, coeffs) -> TriMesh:
        return self.head_template.with_vertices(
            self.head_template.flatten() + self.true_basis @ np.asarray(coeffs)
        )

    def crop_face(self, head: TriMesh) -> TriMesh:
        return self.face_template.with_vertices(head.vertices[self.face_vertex_indices])


@dataclass(frozen=True, eq=False)
class Population:
    heads: list
    faces: list
    head_coeffs: np.ndarray
    face_coeffs: np.ndarray
    cohorts: list


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n)
    z = 1.0 - (2 * i + 1) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_mesh(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-sphere points and outward-oriented hull triangles."""
    pts = fibonacci_sphere(n)
    faces = ConvexHull(pts).simplices.astype(np.int64)
    a, b, c = (pts[faces[:, k]] for k in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    # stable ordering for reproducibility
    faces = faces[np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))]
    return pts, faces


def vertex_normals(vertices, faces) -> np.ndarray:
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    return vn / np.linalg.norm(vn, axis=1, keepdims=True)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _random_field(unit, rng, freq_range, n_terms=4):
    out = np.zeros(len(unit))
    for _ in range(n_terms):
        d = rng.standard_normal(3)
        d *= rng.uniform(*freq_range) / np.linalg.norm(d)
        out += rng.standard_normal() * np.cos(unit @ d + rng.uniform(0, 2 * np.pi))
    return out


def _pick_landmarks(unit, face_mask, n_landmarks):
    named = {
        "nose_tip": (0.0, 0.0, 1.0),
        "left_eye": (-0.35, 0.25, 0.9),
        "right_eye": (0.35, 0.25, 0.9),
        "chin": (0.0, -0.55, 0.83),
        "forehead": (0.0, 0.6, 0.8),
        "left_ear": (-1.0, 0.0, 0.0),
        "right_ear": (1.0, 0.0, 0.0),
        "head_top": (0.0, 1.0, 0.0),
        "occiput": (0.0, 0.0, -1.0),
        "neck": (0.0, -1.0, 0.0),
    }
    lms = {}
    for name, d in named.items():
        d = np.asarray(d) / np.linalg.norm(d)
        lms[name] = int(np.argmax(unit @ d))
    chosen = list(lms.values())
    # farthest-point fill
    dist = np.min(np.linalg.norm(unit[:, None] - unit[chosen][None], axis=2), axis=1)
    k = 0
    while len(lms) < n_landmarks:
        i = int(np.argmax(dist))
        lms[f"lm_{k:02d}"] = i
        dist = np.minimum(dist, np.linalg.norm(unit - unit[i], axis=1))
        k += 1
    return lms


def generate_world(config: WorldConfig | None = None, rng_seed=0) -> SyntheticWorld:
    """Build a deterministic synthetic world for ``rng_seed``."""
    cfg = config or WorldConfig()
    rng = np.random.default_rng(rng_seed)
    unit, faces = sphere_mesh(cfg.n_vertices)
    ang = np.arccos(np.clip(unit[:, 2], -1, 1))
    bump = cfg.nose_height * np.exp(-0.5 * (ang / 0.18) ** 2)
    radii = np.asarray(cfg.radii, dtype=np.float64)
    verts = unit * radii + bump[:, None] * unit
    face_mask = unit[:, 2] > cfg.face_z_threshold
    landmarks = _pick_landmarks(unit, face_mask, cfg.n_landmarks)
    template = TriMesh(verts, faces, landmarks)
    normals = vertex_normals(verts, faces)

    t = cfg.face_z_threshold
    w_face = _smoothstep((unit[:, 2] - t) / (1 - t) * 3.0)
    w_cran = _smoothstep((t - unit[:, 2]) / (1 + t) * 3.0)
    cols = []
    for _ in range(cfg.n_face_modes):
        cols.append(w_face * _random_field(unit, rng, (4.0, 9.0)))
    for _ in range(cfg.n_cranium_modes):
        cols.append(w_cran * _random_field(unit, rng, (1.0, 3.0)))
    for _ in range(cfg.n_coupled_modes):
        cols.append(_random_field(unit, rng, (0.8, 2.5)))
    fields = np.stack([(c[:, None] * normals).reshape(-1) for c in cols], axis=1)
    q, r = np.linalg.qr(fields)
    basis = q * np.sign(np.diag(r))
    nf, nc, nk = cfg.n_face_modes, cfg.n_cranium_modes, cfg.n_coupled_modes
    groups = {
        "face": np.arange(nf),
        "cranium": np.arange(nf, nf + nc),
        "coupled": np.arange(nf + nc, nf + nc + nk),
    }

    n_f = nf + nk
    C = cfg.coupling_scale * rng.standard_normal((nc, n_f))
    A = np.zeros((nf + nc + nk, n_f))
    A[groups["face"], :nf] = np.eye(nf)
    A[groups["cranium"]] = C
    A[groups["coupled"], nf:] = np.eye(nk)
    std = np.concatenate([np.asarray(cfg.face_std[:nf]), np.asarray(cfg.coupled_std[:nk])])
    if std.size != n_f:
        raise ValueError("face_std / coupled_std must cover every face/coupled mode")
    cov_c = (A * std**2) @ A.T
    cov_c[np.ix_(groups["cranium"], groups["cranium"])] += cfg.cranium_noise_std**2 * np.eye(nc)
    true_ev = np.sort(np.linalg.eigvalsh(cov_c))[::-1]

    face_template, face_idx = template.submesh(face_mask)
    for a in (face_mask, face_idx, basis, std, A, true_ev):
        a.setflags(write=False)
    return SyntheticWorld(cfg, template, face_mask, face_template, face_idx,
                          basis, std, A, true_ev, groups)


def sample_population(world: SyntheticWorld, n: int, rng_seed=0, face_detail: float = 1.0, zero: bool = False) -> Population:
    """Draw ``n`` heads and their exact face crops.

    ``face_detail`` scales the face-only coefficients (0 gives heads without
    fine facial variation). ``zero=True`` forces all coefficients to zero.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    cfg = world.config
    f = rng.standard_normal((n, world.n_face_coeffs)) * world.face_coeff_std
    f[:, : cfg.n_face_modes] *= face_detail
    c = f @ world.coupling_map.T
    if cfg.cranium_noise_std > 0:
        c[:, world.groups["cranium"]] += cfg.cranium_noise_std * rng.standard_normal(
            (n, cfg.n_cranium_modes))
    cohorts = [cfg.cohorts[i] for i in rng.integers(0, len(cfg.cohorts), n)]
    if zero:
        f[:], c[:] = 0.0, 0.0
    heads = [world.head_from_coeffs(ci) for ci in c]
    faces = [world.crop_face(h) for h in heads]
    return Population(heads, faces, c, f, cohorts)


def make_scan(head: TriMesh, rng_seed=None, noise_std: float = 0.0, hole_direction=None, hole_angle: float = 0.35) -> TriMesh:
    """A raw-scan-like copy of ``head``: vertex noise and an optional hole.

    The hole removes every face with a vertex within ``hole_angle`` radians
    of ``hole_direction`` (as seen from the vertex centroid); unused vertices
    are dropped, so the scan is not in correspondence with ``head``.
    """
    rng = np.random.default_rng(rng_seed)
    v = head.vertices + noise_std * rng.standard_normal(head.vertices.shape)
    faces = head.faces
    if hole_direction is None:
        return TriMesh(v, faces)
    d = np.asarray(hole_direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    rel = head.vertices - head.vertices.mean(axis=0)
    cosang = rel @ d / np.linalg.norm(rel, axis=1)
    in_hole = cosang > np.cos(hole_angle)
    keep_f = ~in_hole[faces].any(axis=1)
    used = np.zeros(len(v), dtype=bool)
    used[faces[keep_f].ravel()] = True
    sub, _ = TriMesh(v, faces[keep_f]).submesh(used)
    return sub
