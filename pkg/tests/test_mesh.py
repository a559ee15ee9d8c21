import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from shapefuse.errors import DegenerateDataError, EmbeddingError, MeshError
from shapefuse.mesh import (
    SimilarityTransform,
    SurfacePoint,
    TriMesh,
    alignment_residual,
    barycentric_embed,
    closest_point,
    closest_points,
    distance_weights,
    embed_points,
    nearest_vertex_of,
    on_boundary,
    procrustes_align,
    project_to_triangles,
)

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
point = arrays(np.float64, 3, elements=coords)


def _segment_closest(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return a + t * ab


def _oracle_triangle(p, a, b, c):
    """Enumerate interior projection, three edges and three vertices."""
    cands = [a, b, c, _segment_closest(p, a, b), _segment_closest(p, b, c), _segment_closest(p, a, c)]
    n = np.cross(b - a, c - a)
    q = p - np.dot(p - a, n) / np.dot(n, n) * n
    m = np.column_stack([b - a, c - a])
    uv = np.linalg.lstsq(m, q - a, rcond=None)[0]
    if uv.min() >= 0 and uv.sum() <= 1:
        cands.append(q)
    return min(np.linalg.norm(p - x) for x in cands)


def test_closest_point_example():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    mesh = TriMesh(v, [[0, 1, 2]])
    sp, d = closest_point(mesh, [0.25, 0.25, 1.0])
    assert sp.face_index == 0
    np.testing.assert_allclose(sp.barycentric, (0.5, 0.25, 0.25), atol=1e-15)
    assert d == pytest.approx(1.0, abs=1e-15)


def test_closest_point_vertex_region():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    b, d = project_to_triangles(np.array([[-1.0, -1, 0]]), v[[0]], v[[1]], v[[2]])
    np.testing.assert_allclose(b[0], [1, 0, 0])
    assert d[0] == pytest.approx(np.sqrt(2))


@settings(max_examples=200, deadline=None)
@given(p=point, a=point, b=point, c=point)
def test_projection_matches_enumeration_oracle(p, a, b, c):
    n = np.linalg.norm(np.cross(b - a, c - a))
    if n < 1e-3 * max(1.0, np.linalg.norm(b - a) * np.linalg.norm(c - a)):
        return
    bary, d = project_to_triangles(p[None], a[None], b[None], c[None])
    assert bary.min() >= 0 and bary.sum() == pytest.approx(1.0, abs=1e-12)
    q = bary[0] @ np.stack([a, b, c])
    assert np.linalg.norm(p - q) == pytest.approx(d[0], rel=1e-9, abs=1e-9)
    assert d[0] == pytest.approx(_oracle_triangle(p, a, b, c), rel=1e-7, abs=1e-7)


def test_kd_filter_matches_brute_force(world):
    rng = np.random.default_rng(3)
    mesh = world.head_template
    q = mesh.vertices[rng.integers(0, mesh.n_vertices, 300)] + rng.normal(0, 5, (300, 3))
    q = np.vstack([q, rng.normal(0, 200, (50, 3))])
    f1, b1, d1 = closest_points(mesh, q)
    f2, b2, d2 = closest_points(mesh, q, brute_force=True)
    np.testing.assert_array_equal(f1, f2)
    np.testing.assert_allclose(d1, d2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b1, b2, atol=1e-12)


def test_tie_break_lowest_face_index():
    # query above the shared edge of two coplanar triangles
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    mesh = TriMesh(v, [[0, 1, 2], [0, 2, 3]])
    f, _, d = closest_points(mesh, [[0.5, 0.5, 2.0]])
    assert f[0] == 0 and d[0] == pytest.approx(2.0)


def test_trimesh_validation():
    v = np.zeros((3, 3))
    with pytest.raises(MeshError):
        TriMesh(v, [[0, 1, 3]])
    with pytest.raises(MeshError):
        TriMesh(v, [[0, 0, 1]])
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 2)), [[0, 1, 2]])
    with pytest.raises(MeshError):
        TriMesh(v, [[0, 1, 2]], {"x": 5})
    m = TriMesh(v, [[0, 1, 2]])
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


def test_surface_point_validation():
    with pytest.raises(MeshError):
        SurfacePoint(0, (0.5, 0.6, 0.0))
    with pytest.raises(MeshError):
        SurfacePoint(0, (1.2, -0.2, 0.0))


def test_flatten_is_interleaved(tetra):
    np.testing.assert_array_equal(tetra.flatten()[:6], [0, 0, 0, 1, 0, 0])


def test_boundary(grid_mesh, tetra):
    assert not tetra.boundary_mask.any()
    assert grid_mesh.boundary_mask.sum() == 20
    # point on a boundary edge, an interior edge and interior of a face
    f, b, _ = closest_points(grid_mesh, [[0.5, 0.0, 1.0], [2.5, 2.5, 1.0], [2.2, 2.7, 1.0]])
    np.testing.assert_array_equal(on_boundary(grid_mesh, f, b), [True, False, False])


def test_submesh_remaps_landmarks(tetra):
    sub, keep = tetra.submesh([True, True, True, False])
    assert sub.n_faces == 1 and list(keep) == [0, 1, 2]
    assert sub.landmarks == {"a": 0, "b": 1, "c": 2}


def test_embedding_cap(tetra):
    with pytest.raises(EmbeddingError):
        barycentric_embed(tetra, [10.0, 10.0, 10.0], cap=0.1)
    f, b = embed_points(tetra, [[0.2, 0.2, 0.0]])
    np.testing.assert_allclose(b.sum(axis=1), 1.0)


def test_nearest_vertex_is_euclidean():
    # obtuse triangle: largest barycentric weight is not the nearest vertex
    v = np.array([[0.0, 0, 0], [10, 0, 0], [5, 0.5, 0]])
    mesh = TriMesh(v, [[0, 1, 2]])
    f, b, _ = closest_points(mesh, [[4.0, 0.1, 0.0]])
    assert nearest_vertex_of(mesh, f, b)[0] == 2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 10), with_scale=st.booleans())
def test_procrustes_recovers_similarity(seed, scale, with_scale):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(12, 3))
    rot = Rotation.random(random_state=seed).as_matrix()
    s = scale if with_scale else 1.0
    t = rng.normal(size=3) * 5
    tf = SimilarityTransform(s, rot, t)
    est = procrustes_align(src, tf.apply(src), with_scale=with_scale)
    np.testing.assert_allclose(est.rotation, rot, atol=1e-8)
    assert est.scale == pytest.approx(s, rel=1e-9)
    assert alignment_residual(src, tf.apply(src), est) < 1e-8 * max(1.0, s)


def test_procrustes_no_reflection():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(10, 3))
    dst = src * np.array([1, 1, -1])
    est = procrustes_align(src, dst)
    assert np.linalg.det(est.rotation) == pytest.approx(1.0)
    assert alignment_residual(src, dst, est) > 0.1


def test_procrustes_degenerate():
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateDataError):
        procrustes_align(line, line)
    with pytest.raises(DegenerateDataError):
        procrustes_align(np.ones((4, 3)), np.ones((4, 3)))


def test_similarity_compose_inverse():
    rng = np.random.default_rng(1)
    a = SimilarityTransform(2.0, Rotation.random(random_state=1).as_matrix(), rng.normal(size=3))
    b = SimilarityTransform(0.5, Rotation.random(random_state=2).as_matrix(), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    with pytest.raises(ValueError):
        SimilarityTransform(1.0, np.diag([1.0, 1, -1]), np.zeros(3))


def test_distance_weights(tetra):
    w = distance_weights(tetra, [0, 0, 0], "inverse-linear", 1.0)
    np.testing.assert_allclose(w, [1, 0, 0, 0])
    g = distance_weights(tetra, [0, 0, 0], "gaussian", 1.0)
    np.testing.assert_allclose(g[1], np.exp(-0.5))
    with pytest.raises(ValueError):
        distance_weights(tetra, [0, 0, 0], "cubic", 1.0)
