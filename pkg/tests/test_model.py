import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accordion.errors import EmptyDatasetError, NumericError, ShapeError
from accordion.model import (
    Dataset,
    Model,
    central_difference,
    evaluate,
    finite_diff_grad,
    flatten,
    gen_least_squares,
    gen_two_gaussian,
    init_model,
    lasso_example_grads,
    loss_and_grad,
    shard_indices,
    solve_normal_equations,
    unflatten,
)


def rel_err(a: dict, b: dict) -> float:
    fa, fb = flatten(a), flatten(b)
    return float(np.linalg.norm(fa - fb) / max(np.linalg.norm(fb), 1e-12))


# -- data -------------------------------------------------------------------


def test_two_gaussian_balanced_and_alternating():
    data = gen_two_gaussian(np.array([1.0, 0.0]), 1.0, 7, seed=0)
    assert data.labels.tolist() == [-1, 1, -1, 1, -1, 1, -1]
    assert int(np.sum(data.labels > 0)) == 7 // 2


def test_two_gaussian_small_sigma_sits_on_means():
    mu = np.array([2.0, -1.0, 0.0])
    data = gen_two_gaussian(mu, 1e-6, 10, seed=1)
    expected = data.labels[:, None] * mu[None, :]
    np.testing.assert_allclose(data.features, expected, atol=1e-5)


def test_two_gaussian_class_means_converge():
    mu = np.array([0.5, 0.5, 0.0, 0.0])
    sigma, n = 2.0, 20000
    data = gen_two_gaussian(mu, sigma, n, seed=3)
    pos = data.features[data.labels > 0].mean(axis=0)
    se = sigma / np.sqrt(n / 2)
    assert np.all(np.abs(pos - mu) < 5 * se)


def test_two_gaussian_rejects_bad_input():
    with pytest.raises(EmptyDatasetError):
        gen_two_gaussian(np.ones(2), 1.0, 0)
    with pytest.raises(ValueError):
        gen_two_gaussian(np.zeros(2), 1.0, 4)
    with pytest.raises(ValueError):
        gen_two_gaussian(np.ones(2), 0.0, 4)


def test_least_squares_noise_free_recovers_truth():
    data, w_true = gen_least_squares(8, 64, 0.0, seed=2, outputs=3)
    w = solve_normal_equations(data.features, data.labels)
    np.testing.assert_allclose(w, w_true, atol=1e-10)


def test_normal_equations_one_dimensional():
    x = np.array([[1.0], [2.0], [3.0]])
    y = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(solve_normal_equations(x, y), [[1.0]])


def test_dataset_validates():
    with pytest.raises(ShapeError):
        Dataset(np.ones((3, 2)), np.ones(2))
    with pytest.raises(NumericError):
        Dataset(np.array([[np.inf]]), np.ones(1))


def test_shard_indices_contiguous_and_complete():
    shards = shard_indices(10, 3)
    assert [s.tolist() for s in shards] == [[0, 1, 2], [3, 4, 5], [6, 7, 8, 9]]
    assert np.array_equal(np.concatenate(shards), np.arange(10))


# -- models -----------------------------------------------------------------


def test_model_kind_and_layers_validated():
    with pytest.raises(ValueError):
        Model("svm", {"w": np.ones(2)})
    with pytest.raises(ShapeError):
        Model("mlp", {"W1": np.ones((2, 2))})


def test_flatten_roundtrip():
    model = init_model("mlp", 5, seed=0, hidden_width=3, outputs=2)
    back = unflatten(model.flat(), model.shapes())
    for k in model.layers:
        np.testing.assert_array_equal(back[k], model.layers[k])
    with pytest.raises(ShapeError):
        unflatten(np.ones(model.num_params() + 1), model.shapes())


def test_lasso_gradient_example():
    # residual is zero, so only the l1 subgradient remains
    model = Model("lasso", {"w": np.array([1.0, 0.0])}, lam=0.1)
    _, g = loss_and_grad(model, np.array([[1.0, 0.0]]), np.array([1.0]))
    np.testing.assert_allclose(g["w"], [0.1, 0.0])


def test_lasso_per_example_rows_average_to_batch_gradient():
    rng = np.random.default_rng(0)
    x, y, w = rng.standard_normal((6, 4)), rng.standard_normal(6), rng.standard_normal(4)
    rows = lasso_example_grads(w, x, y, 0.3)
    _, g = loss_and_grad(Model("lasso", {"w": w}, lam=0.3), x, y)
    np.testing.assert_allclose(rows.mean(axis=0), g["w"], atol=1e-12)


def test_lasso_zero_is_optimal_for_large_lambda():
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((50, 3)), rng.standard_normal(50)
    lam = 2.0 * np.max(np.abs(x.T @ y / 50))
    model = Model("lasso", {"w": np.zeros(3)}, lam=lam)
    base = loss_and_grad(model, x, y)[0]
    for _ in range(20):
        d = 1e-3 * rng.standard_normal(3)
        assert loss_and_grad(Model("lasso", {"w": d}, lam=lam), x, y)[0] >= base


def test_least_squares_gradient_zero_at_solution():
    data, _ = gen_least_squares(5, 40, 0.3, seed=1)
    w = solve_normal_equations(data.features, data.labels)
    _, g = loss_and_grad(Model("least-squares", {"W": w}), data.features, data.labels)
    assert np.max(np.abs(g["W"])) < 1e-12


def test_central_difference_quadratic():
    w = np.array([1.5, -2.0, 0.25])
    g = central_difference(lambda p: 0.5 * float(p["w"] @ p["w"]), {"w": w}, eps=1e-4)
    np.testing.assert_allclose(g["w"], w, atol=1e-10)


def test_central_difference_eps_range():
    with pytest.raises(ValueError):
        central_difference(lambda p: 0.0, {"w": np.ones(1)}, eps=1e-2)


def _random_point(kind, rng, dim=4):
    model = init_model(kind, dim, seed=int(rng.integers(1 << 30)), hidden_width=3, outputs=2 if kind == "mlp" else 1, lam=0.05)
    layers = {k: rng.standard_normal(v.shape) for k, v in model.layers.items()}
    return Model(kind, layers, model.lam, model.hidden_width)


@pytest.mark.parametrize("kind", ["least-squares", "logistic", "lasso", "mlp"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((12, 4))
    y = np.where(rng.random(12) < 0.5, -1.0, 1.0) if kind in ("logistic", "mlp") else rng.standard_normal(12)
    for _ in range(5):
        model = _random_point(kind, rng)
        _, g = loss_and_grad(model, x, y)
        assert rel_err(g, finite_diff_grad(model, x, y)) < 1e-6


def test_mlp_single_output_gradient():
    rng = np.random.default_rng(5)
    model = init_model("mlp", 3, seed=0, hidden_width=3, outputs=1)
    x, y = rng.standard_normal((8, 3)), np.where(rng.random(8) < 0.5, -1.0, 1.0)
    _, g = loss_and_grad(model, x, y)
    assert model.num_params() == 16
    assert rel_err(g, finite_diff_grad(model, x, y)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_gradient_is_mean_of_half_batches(seed):
    rng = np.random.default_rng(seed)
    model = _random_point("mlp", rng)
    x, y = rng.standard_normal((10, 4)), np.where(rng.random(10) < 0.5, -1.0, 1.0)
    _, g = loss_and_grad(model, x, y)
    _, g1 = loss_and_grad(model, x[:5], y[:5])
    _, g2 = loss_and_grad(model, x[5:], y[5:])
    for k in g:
        np.testing.assert_allclose(g[k], 0.5 * (g1[k] + g2[k]), atol=1e-12)


def test_loss_raises_on_empty_and_nonfinite():
    model = init_model("least-squares", 2)
    with pytest.raises(EmptyDatasetError):
        loss_and_grad(model, np.zeros((0, 2)), np.zeros(0))
    big = Model("mlp", {"W1": np.full((2, 2), np.inf), "b1": np.zeros(2), "W2": np.ones((1, 2)), "b2": np.zeros(1)})
    with pytest.raises(NumericError, match="W1"):
        loss_and_grad(big, np.ones((1, 2)), np.ones(1))


def test_logistic_loss_is_stable_for_large_margins():
    model = Model("logistic", {"W": np.array([[1000.0]]), "b": np.zeros(1)})
    loss, g = loss_and_grad(model, np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]))
    assert loss == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(g["W"]))


def test_evaluate_examples():
    clf = Model("logistic", {"W": np.array([[1.0]]), "b": np.zeros(1)})
    data = Dataset(np.array([[1.0], [-1.0], [2.0], [-3.0]]), np.array([1.0, -1.0, -1.0, -1.0]))
    assert evaluate(clf, data) == 0.75
    reg = Model("least-squares", {"W": np.array([[2.0]])})
    data = Dataset(np.array([[1.0], [2.0]]), np.array([1.0, 4.0]))
    # predictions 2 and 4: squared errors 1 and 0
    assert evaluate(reg, data) == 0.5
