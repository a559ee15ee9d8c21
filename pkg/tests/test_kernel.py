import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from shapefuse.errors import DenseCapError, EmbeddingError, UserInputError
from shapefuse.kernel import (
    UniversalCovariance,
    assemble_universal_covariance,
    blend_weights,
    blended_block,
    blended_covariance,
    build_universal_covariance,
    classify_vertices,
    psd_repair,
    sample_gpmm,
)
from shapefuse.mesh import SurfacePoint, TriMesh, embed_points
from shapefuse.pdm import fit_pdm, model_covariance


@pytest.fixture(scope="module")
def fused(world, population):
    head = fit_pdm(population.heads[:100], name="head")
    face = fit_pdm(population.faces[100:], name="face")
    labels = classify_vertices(world.head_template, world.face_template, 1e-6)
    return head, face, labels


def test_classify(world, fused):
    _, _, labels = fused
    np.testing.assert_array_equal(labels.face, world.face_mask)
    assert labels.rho[world.head_template.landmarks["nose_tip"]] == 0.0
    assert labels.rho.max() == 1.0 and labels.rho[labels.face].max() == pytest.approx(1.0)


def test_closed_form_matches_nine_term_sum(world, fused):
    head, _, _ = fused
    k = model_covariance(head)
    rng = np.random.default_rng(0)
    q = world.head_template.vertices[rng.choice(800, 25, replace=False)] + rng.normal(0, 1.0, (25, 3))
    f, b = embed_points(head.mean_mesh, q)
    full = blended_covariance(head, f, b)
    for i in range(25):
        for j in range(25):
            oracle = blended_block(k, head.faces, SurfacePoint(f[i], b[i]), SurfacePoint(f[j], b[j]))
            np.testing.assert_allclose(full[3 * i:3 * i + 3, 3 * j:3 * j + 3], oracle, atol=1e-9 * np.abs(k).max())


def test_weight_sum_is_three():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        bi, bj = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
        assert abs(blend_weights(bi, bj).sum() - 3.0) <= 1e-12


def test_one_hot_embeddings_follow_weight_formula(fused):
    # weights (c_i[v] + c_j[k]) / 2 with one-hot inputs: 1 on the vertex pair,
    # 1/2 on the other four pairs that share a vertex, 0 elsewhere
    head, _, _ = fused
    k = model_covariance(head)
    t = head.faces[10]
    u = head.faces[500]
    out = blended_block(k, head.faces, SurfacePoint(10, (1, 0, 0)), SurfacePoint(500, (0, 1, 0)))
    blk = lambda a, b: k[3 * a:3 * a + 3, 3 * b:3 * b + 3]
    expect = blk(t[0], u[1]) + 0.5 * (blk(t[0], u[0]) + blk(t[0], u[2]) + blk(t[1], u[1]) + blk(t[2], u[1]))
    np.testing.assert_allclose(out, expect / 3.0, atol=1e-12 * np.abs(k).max())


def test_blended_block_bad_face(fused):
    head, _, _ = fused
    with pytest.raises(UserInputError):
        blended_block(np.eye(3 * head.n_vertices), head.faces, SurfacePoint(10**6, (1, 0, 0)), SurfacePoint(0, (1, 0, 0)))


def _face_rows(labels):
    idx = np.flatnonzero(labels.face)
    return np.repeat(3 * idx, 3) + np.tile(np.arange(3), idx.size)


def test_rho_endpoints_and_mixed_pairs(world, fused):
    head, face, labels = fused
    t = world.head_template
    rows = _face_rows(labels)
    other = np.setdiff1d(np.arange(3 * t.n_vertices), rows)
    k1, kh = assemble_universal_covariance(head, face, world.face_template, t, labels.with_rho(1.0), head.mean_mesh)
    k0, _ = assemble_universal_covariance(head, face, world.face_template, t, labels.with_rho(0.0), head.mean_mesh)
    scale = np.abs(kh).max()
    np.testing.assert_allclose(k1[np.ix_(rows, rows)], kh[np.ix_(rows, rows)], atol=1e-7 * scale)
    f, b = embed_points(world.face_template, t.vertices[labels.face])
    kf = blended_covariance(face, f, b)
    np.testing.assert_allclose(k0[np.ix_(rows, rows)], kf, atol=1e-7 * scale)
    for k in (k0, k1):
        assert np.array_equal(k[np.ix_(rows, other)], kh[np.ix_(rows, other)])
        assert np.array_equal(k[np.ix_(other, other)], kh[np.ix_(other, other)])


def test_build_repairs_to_psd(world, fused):
    head, face, labels = fused
    cov = build_universal_covariance(head, face, world.face_template, world.head_template, labels, head.mean_mesh)
    w = np.linalg.eigvalsh(cov.matrix)
    assert w.min() >= -1e-10 * w.max()
    assert 0 <= cov.clipped_mass < 0.5
    np.testing.assert_array_equal(cov.matrix, cov.matrix.T)
    assert cov.provenance["head_model_id"] == "head"


@settings(max_examples=40, deadline=None)
@given(a=arrays(np.float64, (6, 6), elements=st.floats(-5, 5)))
def test_psd_repair_properties(a):
    sym = 0.5 * (a + a.T)
    rep, clipped = psd_repair(sym)
    w_in = np.linalg.eigvalsh(sym)
    w = np.linalg.eigvalsh(rep)
    assert w.min() >= -1e-9 * max(1.0, np.abs(w_in).max())
    np.testing.assert_allclose(rep, rep.T)
    assert 0 <= clipped <= 1
    # Frobenius distance equals the norm of the clipped eigenvalues
    np.testing.assert_allclose(np.linalg.norm(rep - sym), np.linalg.norm(np.minimum(w_in, 0)), atol=1e-8)
    again, c2 = psd_repair(rep) if w.min() >= 0 else (rep, 0.0)
    np.testing.assert_allclose(again, rep, atol=1e-9)


def test_psd_repair_identity_on_psd_and_rejects_asymmetric():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    k = x @ x.T + np.eye(5)
    rep, clipped = psd_repair(k)
    assert clipped == 0.0
    np.testing.assert_array_equal(rep, 0.5 * (k + k.T))
    with pytest.raises(UserInputError):
        psd_repair(np.triu(np.ones((3, 3))))


def test_universal_covariance_helpers(tmp_path, world, fused):
    head, face, labels = fused
    cov = build_universal_covariance(head, face, world.face_template, world.head_template, labels, head.mean_mesh)
    r = cov.rank
    l = cov.factor()
    np.testing.assert_allclose(l @ l.T, cov.matrix, atol=1e-8 * np.abs(cov.matrix).max())
    assert cov.truncated(r) is cov
    t3 = cov.truncated(3)
    assert t3.rank == 3
    model = cov.to_shape_model()
    assert model.n_components == r
    cov.save(tmp_path / "c")
    back = UniversalCovariance.load(tmp_path / "c")
    assert back.matrix.tobytes() == cov.matrix.tobytes()
    np.testing.assert_array_equal(back.labels.face, labels.face)
    s = sample_gpmm(world.head_template, cov, 3, z=np.zeros(3))
    np.testing.assert_array_equal(s.vertices, world.head_template.vertices)
    with pytest.raises(UserInputError):
        sample_gpmm(world.head_template, cov, r + 1)
    with pytest.raises(UserInputError):
        cov.factor(0)


def test_dense_cap_and_embedding_errors(world, fused):
    head, face, labels = fused
    big = TriMesh(np.zeros((2001, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(DenseCapError):
        assemble_universal_covariance(head, face, world.face_template, big, labels)
    far = world.face_template.with_vertices(world.face_template.vertices + 100.0)
    with pytest.raises(EmbeddingError):
        assemble_universal_covariance(head, face, far, world.head_template, labels, head.mean_mesh)
    with pytest.raises(UserInputError):
        classify_vertices(TriMesh(world.head_template.vertices, world.head_template.faces), world.face_template, 1.0)
