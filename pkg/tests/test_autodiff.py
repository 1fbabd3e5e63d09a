import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drnkit.autodiff import (DimensionError, MlpParams, Tensor, TrainingDivergenceError, finite_diff_check,
                             init_mlp, mlp_forward, mlp_value_and_grad, sample_dropout_masks)


def _mse(z, batch):
    _, y = batch
    r = z.reshape(-1) - y
    return (r * r).mean()


def test_zero_network_gives_zero_output(rng):
    net = init_mlp(3, [4, 5], 2, rng)
    zero = MlpParams.from_arrays([np.zeros_like(a) for a in net.arrays()])
    assert np.array_equal(mlp_forward(zero, rng.normal(size=(7, 3))), np.zeros((7, 2)))


def test_leaky_hidden_unit():
    net = MlpParams([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)], 0.01)
    assert mlp_forward(net, np.array([[-1.0]]))[0, 0] == pytest.approx(-0.01, abs=1e-15)


def test_forward_matches_straight_matrix_algebra(rng):
    net = init_mlp(4, [6], 3, rng)
    net.biases[0][:] = rng.normal(size=6)
    net.biases[1][:] = rng.normal(size=3)
    x = rng.normal(size=(10, 4))
    h = x @ net.weights[0] + net.biases[0]
    h = np.maximum(h, 0) + 0.01 * np.minimum(h, 0)
    expected = h @ net.weights[1] + net.biases[1]
    assert np.max(np.abs(mlp_forward(net, x) - expected)) < 1e-12


def test_shape_mismatch_raises(rng):
    net = init_mlp(3, [4], 1, rng)
    with pytest.raises(DimensionError):
        mlp_forward(net, np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        mlp_forward(net, np.zeros((2, 3)), dropout_mask=[np.ones((2, 7))], dropout_rate=0.5)
    with pytest.raises(DimensionError):
        MlpParams([np.ones((2, 3)), np.ones((4, 1))], [np.zeros(3), np.zeros(1)])


def test_nonfinite_params_rejected():
    with pytest.raises(ValueError):
        MlpParams([np.array([[np.nan]])], [np.zeros(1)])


def test_least_squares_gradient_closed_form(rng):
    X = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    net = MlpParams([rng.normal(size=(3, 1))], [rng.normal(size=1)])
    _, g = mlp_value_and_grad(net, (X, y), _mse)
    resid = X @ net.weights[0][:, 0] + net.biases[0][0] - y
    assert np.allclose(g.weights[0][:, 0], 2 * X.T @ resid / 20, atol=1e-13)
    assert g.biases[0][0] == pytest.approx(2 * resid.mean(), abs=1e-13)


def test_constant_loss_has_zero_gradient(rng):
    net = init_mlp(2, [3], 2, rng)
    value, g = mlp_value_and_grad(net, (rng.normal(size=(4, 2)),), lambda z, b: z.sum() * 0.0 + 5.0)
    assert value == 5.0
    assert all(np.all(a == 0) for a in g.arrays())
    assert finite_diff_check(net, (rng.normal(size=(4, 2)),), lambda z, b: z.sum() * 0.0 + 5.0) == 0.0


def test_linear_quadratic_finite_difference_tight(rng):
    X, y = rng.normal(size=(15, 2)), rng.normal(size=15)
    net = MlpParams([rng.normal(size=(2, 1))], [np.zeros(1)])
    assert finite_diff_check(net, (X, y), _mse) < 1e-8


def test_three_layer_finite_difference(rng):
    X, y = rng.normal(size=(12, 3)), rng.normal(size=12)
    net = init_mlp(3, [5, 4, 3], 1, rng)
    assert finite_diff_check(net, (X, y), _mse) < 1e-5


def test_elementwise_ops_gradients(rng):
    X = rng.normal(size=(6, 2))

    def loss(z, batch):
        p = z.softmax(axis=1)
        return ((z.exp().log() + z.sigmoid() + z.softplus() + (z * z + 1.0).lgamma()).sum()
                + p.cumsum(axis=1).diff(axis=1).sum() + z.logsumexp(axis=1).mean()
                + (z / (z * z + 2.0)).sum() + (z ** 3).mean())

    net = init_mlp(2, [4], 3, rng)
    assert finite_diff_check(net, (X,), loss) < 1e-5


def test_indexing_gradients(rng):
    X = rng.normal(size=(6, 2))
    idx = rng.integers(0, 3, size=6)

    def loss(z, batch):
        return z.take_along(idx[:, None], axis=1).sum() + z[:, 1].sum() * 2.0 + z.take(np.array([0, 0, 2]), axis=1).mean()

    assert finite_diff_check(init_mlp(2, [4], 3, rng), (X,), loss) < 1e-6


def test_nonfinite_loss_carries_batch_index(rng):
    net = init_mlp(2, [3], 1, rng)
    with pytest.raises(TrainingDivergenceError) as info:
        mlp_value_and_grad(net, (np.zeros((2, 2)),), lambda z, b: z.sum() * np.inf, batch_index=7)
    assert info.value.batch_index == 7


def test_forward_is_deterministic(rng):
    net = init_mlp(3, [8, 8], 4, rng)
    x = rng.normal(size=(5, 3))
    masks = sample_dropout_masks(net, 5, 0.3, rng)
    assert np.array_equal(mlp_forward(net, x, masks, 0.3), mlp_forward(net, x, masks, 0.3))


def test_dropout_expectation_matches_unmasked(rng):
    net = init_mlp(2, [16], 1, rng)
    x = np.array([[0.3, -0.7]])
    n = 100_000
    masks = sample_dropout_masks(net, n, 0.4, rng)
    out = mlp_forward(net, np.repeat(x, n, axis=0), masks, 0.4)[:, 0]
    plain = mlp_forward(net, x)[0, 0]
    assert abs(out.mean() - plain) < 3 * out.std() / np.sqrt(n)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 3))
def test_params_roundtrip(n_in, width, n_out):
    net = init_mlp(n_in, [width], n_out, np.random.default_rng(0))
    back = MlpParams.from_dict(net.to_dict())
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), back.arrays()))


def test_tensor_backward_accumulates_shared_nodes():
    t = Tensor(np.array([2.0, 3.0]))
    (t * t + t).sum().backward()
    assert np.allclose(t.grad, [5.0, 7.0])
