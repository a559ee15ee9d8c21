import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapefuse.errors import DegenerateDataError, SingularSystemError, UserInputError
from shapefuse.nicp import NicpConfig
from shapefuse.pdm import fit_pdm, random_params, sample_shape, truncate_model
from shapefuse.regression import (
    ParamPairSet,
    RegressionMap,
    build_regression_fused_model,
    head_center_weights,
    latent_to_latent_regression,
    predict_full_shape,
    predict_params,
    solve_regression,
    synthesize_param_pairs,
)

FAST = NicpConfig(stiffness_schedule=(20.0, 2.0), max_inner_iterations=3)


@pytest.fixture(scope="module")
def models(population):
    head = fit_pdm(population.heads[:100], name="head")
    # paired identities, so the face mean is the crop of the head mean
    face = fit_pdm(population.faces[:100], name="face")
    return head, face


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_f=st.integers(1, 6), n_h=st.integers(1, 8))
def test_solve_recovers_linear_map(seed, n_f, n_h):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n_h, n_f))
    cf = rng.normal(size=(n_f, 10 * n_f))
    rmap = solve_regression(ParamPairSet(w @ cf, cf))
    np.testing.assert_allclose(rmap.matrix, w, atol=1e-9)
    # independent least-squares route
    lst = np.linalg.lstsq(cf.T, (w @ cf).T, rcond=None)[0].T
    np.testing.assert_allclose(rmap.matrix, lst, atol=1e-9)


def test_ridge_and_rank_errors():
    cf = np.ones((2, 5))
    with pytest.raises(SingularSystemError, match="rank"):
        solve_regression(ParamPairSet(np.ones((3, 5)), cf))
    r = solve_regression(ParamPairSet(np.ones((3, 5)), cf), ridge=1.0)
    assert np.all(np.isfinite(r.matrix))
    with pytest.raises(UserInputError):
        solve_regression(ParamPairSet(np.ones((3, 5)), cf), ridge=-1.0)
    with pytest.raises(UserInputError):
        ParamPairSet(np.ones((3, 5)), np.ones((2, 4)))


def test_mean_face_maps_to_mean_head(models):
    head, face = models
    rng = np.random.default_rng(0)
    rmap = RegressionMap(rng.normal(size=(head.n_components, face.n_components)))
    out = predict_full_shape(head, face, rmap, face.mean_mesh)
    np.testing.assert_allclose(out.vertices, head.mean_mesh.vertices, atol=1e-10)


def test_affine_combination_linearity(models):
    head, face = models
    rng = np.random.default_rng(1)
    rmap = RegressionMap(rng.normal(size=(head.n_components, face.n_components)))
    for k in range(5):
        f1 = sample_shape(face, random_params(face, rng))
        f2 = sample_shape(face, random_params(face, rng))
        a = rng.uniform(-1, 2)
        mix = f1.with_vertices(a * f1.vertices + (1 - a) * f2.vertices)
        lhs = predict_full_shape(head, face, rmap, mix).vertices
        rhs = a * predict_full_shape(head, face, rmap, f1).vertices + (1 - a) * predict_full_shape(head, face, rmap, f2).vertices
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_shape_mismatch_errors(models):
    head, face = models
    with pytest.raises(UserInputError):
        predict_params(face, RegressionMap(np.zeros((2, 3))), face.mean_mesh)
    with pytest.raises(UserInputError):
        predict_full_shape(head, face, RegressionMap(np.zeros((2, face.n_components))), face.mean_mesh)


def test_latent_regression_on_exact_pairs(world, population, models):
    head, face = models
    pairs = [(population.faces[i], population.heads[i]) for i in range(100, 150)]
    rmap = latent_to_latent_regression(face, head, pairs)
    for i in range(150, 160):
        pred = predict_full_shape(head, face, rmap, population.faces[i])
        err = np.sqrt(((pred.vertices - population.heads[i].vertices) ** 2).sum(axis=1).mean())
        assert err < 1e-4 * world.head_template.bbox_diagonal
    with pytest.raises(UserInputError):
        latent_to_latent_regression(face, head, pairs[:3])


def test_synthesized_pairs_independent_of_jobs(models):
    head, face = models
    small = truncate_model(face, 3)
    a = synthesize_param_pairs(head, small, FAST, n_r=5, rng_seed=11, jobs=1)
    b = synthesize_param_pairs(head, small, FAST, n_r=5, rng_seed=11, jobs=2)
    assert a.head_params.tobytes() == b.head_params.tobytes()
    assert a.face_params.tobytes() == b.face_params.tobytes()
    assert a.head_params.shape == (head.n_components, 5) and a.face_params.shape == (3, 5)
    with pytest.raises(UserInputError):
        synthesize_param_pairs(head, small, FAST, n_r=3)


def test_regression_map_save_load(tmp_path):
    r = RegressionMap(np.arange(6.0).reshape(2, 3), "a", "b", 30)
    r.save(tmp_path)
    back = RegressionMap.load(tmp_path)
    assert back.matrix.tobytes() == r.matrix.tobytes()
    assert (back.source_model_id, back.target_model_id, back.n_r_used) == ("a", "b", 30)


def test_head_center_weights(world):
    w = head_center_weights(world.head_template)
    assert w.min() > 0 and w.max() <= 1


def test_fused_model_small(world, population, models):
    head, face = models
    rmap = latent_to_latent_regression(face, head, [(population.faces[i], population.heads[i]) for i in range(100, 150)])
    corpus = population.faces[150:154]
    model = build_regression_fused_model(head, face, rmap, corpus, head.mean_mesh,
                                         merge_cfg=FAST, register_cfg=FAST, name="fused")
    assert model.n_components == 3 and model.n_vertices == 800
    with pytest.raises(DegenerateDataError):
        build_regression_fused_model(head, face, rmap, corpus[:1], head.mean_mesh)
