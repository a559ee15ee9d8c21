import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import subspace_angles

from shapefuse.errors import DegenerateDataError, DenseCapError, TopologyMismatchError
from shapefuse.mesh import TriMesh
from shapefuse.pdm import (
    ShapeModel,
    fit_pdm,
    model_covariance,
    model_from_covariance,
    project_shape,
    random_params,
    reconstruct,
    sample_shape,
    sign_normalize,
    truncate_model,
)


@pytest.fixture(scope="module")
def head_model(population):
    return fit_pdm(population.heads, name="heads")


def test_fit_recovers_true_subspace(world, head_model):
    true_span = world.true_basis @ world.coupling_map
    assert head_model.n_components == true_span.shape[1]
    angles = subspace_angles(head_model.basis, true_span)
    assert angles.max() < 1e-3


def test_eigenvalues_match_dense_covariance(population, head_model):
    # independent route: eigh of the explicit sample covariance
    data = np.stack([h.flatten() for h in population.heads])
    cov = np.cov(data, rowvar=False, ddof=1)
    w = np.sort(np.linalg.eigvalsh(cov))[::-1][: head_model.n_components]
    np.testing.assert_allclose(head_model.eigenvalues, w, rtol=1e-8)
    np.testing.assert_allclose(head_model.mean, data.mean(axis=0), atol=1e-12)


def test_model_invariants(head_model):
    b = head_model.basis
    np.testing.assert_allclose(b.T @ b, np.eye(b.shape[1]), atol=1e-10)
    assert np.all(np.diff(head_model.eigenvalues) <= 0)
    idx = np.argmax(np.abs(b), axis=0)
    assert np.all(b[idx, np.arange(b.shape[1])] > 0)


def test_sample_project_round_trip(head_model):
    p = random_params(head_model, 3)
    shape = sample_shape(head_model, p)
    np.testing.assert_allclose(project_shape(head_model, shape), p, atol=1e-8)
    np.testing.assert_allclose(reconstruct(head_model, shape).vertices, shape.vertices, atol=1e-9)


def test_default_components_and_errors(world, population):
    m = fit_pdm(population.heads[:5])
    assert m.n_components == 4
    with pytest.raises(DegenerateDataError):
        fit_pdm(population.heads[:1])
    with pytest.raises(ValueError):
        fit_pdm(population.heads[:5], n_components=5)
    with pytest.raises(TopologyMismatchError):
        fit_pdm([population.heads[0], population.faces[0]])
    with pytest.raises(DegenerateDataError):
        fit_pdm([population.heads[0], population.heads[0]])


def test_explicit_components_above_rank_warns(population, caplog):
    with caplog.at_level("WARNING"):
        m = fit_pdm(population.heads[:30], n_components=20)
    assert m.n_components == 10
    assert "numerical rank" in caplog.text


def test_random_params_statistics(head_model):
    p = random_params(head_model, 0, n=20000)
    np.testing.assert_allclose(p.var(axis=0) / head_model.eigenvalues, 1.0, atol=0.05)
    t = random_params(head_model, 0, n=100, truncate=1.0)
    assert np.all(np.abs(t) <= np.sqrt(head_model.eigenvalues) + 1e-12)
    np.testing.assert_array_equal(random_params(head_model, 5), random_params(head_model, 5))


def test_covariance_and_truncation(head_model, world):
    k = model_covariance(head_model)
    np.testing.assert_allclose(k, k.T)
    back = model_from_covariance(head_model.mean, k, head_model.faces)
    np.testing.assert_allclose(back.eigenvalues, head_model.eigenvalues, rtol=1e-8)
    np.testing.assert_allclose(np.abs(back.basis.T @ head_model.basis), np.eye(10), atol=1e-6)
    with pytest.raises(DenseCapError):
        model_covariance(head_model, cap=100)
    t = truncate_model(head_model, 3)
    assert t.n_components == 3
    np.testing.assert_array_equal(t.basis, head_model.basis[:, :3])
    assert truncate_model(head_model, 10) is head_model
    with pytest.raises(ValueError):
        truncate_model(head_model, 11)


def test_save_load_bit_exact(tmp_path, head_model):
    head_model.save(tmp_path / "m")
    back = ShapeModel.load(tmp_path / "m")
    for name in ("mean", "basis", "eigenvalues", "faces"):
        assert getattr(back, name).tobytes() == getattr(head_model, name).tobytes()
    assert back.landmarks == head_model.landmarks and back.name == "heads"


def test_model_validation(head_model):
    with pytest.raises(ValueError):
        ShapeModel(head_model.mean, head_model.basis * 2, head_model.eigenvalues, head_model.faces)
    with pytest.raises(ValueError):
        ShapeModel(head_model.mean, head_model.basis, head_model.eigenvalues[::-1], head_model.faces)
    with pytest.raises(TopologyMismatchError):
        project_shape(head_model, TriMesh(np.zeros((3, 3)), [[0, 1, 2]]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 12))
def test_pca_properties(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(4, 3))
    f = np.array([[0, 1, 2], [0, 2, 3]])
    shapes = [TriMesh(v + rng.normal(size=v.shape), f) for _ in range(n)]
    m = fit_pdm(shapes)
    data = np.stack([s.flatten() for s in shapes])
    total = ((data - data.mean(axis=0)) ** 2).sum() / (n - 1)
    # full-rank model explains the whole sample variance
    if m.n_components == min(n - 1, 12):
        assert m.eigenvalues.sum() == pytest.approx(total, rel=1e-9)
    for s in shapes:
        if m.n_components == n - 1:
            np.testing.assert_allclose(reconstruct(m, s).vertices, s.vertices, atol=1e-8)


def test_sign_normalize():
    v = np.array([[1.0, -3.0], [-2.0, 1.0]])
    np.testing.assert_array_equal(sign_normalize(v), [[-1.0, 3.0], [2.0, -1.0]])
