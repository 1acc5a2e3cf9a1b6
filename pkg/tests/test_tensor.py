import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiralnet import tensor as T
from spiralnet.nn import Adam


def brute_conv(x, w, b):
    """y[t, k] = b + sum W[tau, kappa, ci] x[t - tau, k - kappa, ci] over the valid region."""
    t_in, k_in, cin = x.shape
    dt, dk, _, cout = w.shape
    y = np.zeros((t_in - dt + 1, k_in - dk + 1, cout))
    for t, k, co in itertools.product(range(y.shape[0]), range(y.shape[1]), range(cout)):
        s = b[co]
        for tau, kap, ci in itertools.product(range(dt), range(dk), range(cin)):
            s += w[tau, kap, ci, co] * x[t + dt - 1 - tau, k + dk - 1 - kap, ci]
        y[t, k, co] = s
    return y


def brute_spiral(x, w, b, q):
    t_in, k_in, cin = x.shape
    dt, dk, n_oct, _, cout = w.shape
    top = dk - 1 + q * (n_oct - 1)
    y = np.zeros((t_in - dt + 1, k_in - top, cout))
    for t, k, co in itertools.product(range(y.shape[0]), range(y.shape[1]), range(cout)):
        s = b[co]
        for tau, kap, j, ci in itertools.product(range(dt), range(dk), range(n_oct), range(cin)):
            s += w[tau, kap, j, ci, co] * x[t + dt - 1 - tau, k + top - kap - q * j, ci]
        y[t, k, co] = s
    return y


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(7, 5, 1))
        y = T.conv2d_valid(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        assert np.array_equal(y, x)

    def test_constant_field(self):
        y = T.conv2d_valid(np.ones((128, 96, 1)), np.ones((5, 5, 1, 1)), np.zeros(1))
        assert y.shape == (124, 92, 1)
        assert np.all(y == 25.0)

    def test_brute_force_8x8(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(8, 8, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
        assert rel_err(T.conv2d_valid(x, w, b), brute_conv(x, w, b)) < 1e-12

    def test_kernel_orientation(self):
        # a single tap at (tau, kappa) = (1, 0) delays the input by one frame
        x = np.arange(12.0).reshape(4, 3, 1)
        w = np.zeros((2, 1, 1, 1))
        w[1, 0] = 1.0
        assert np.array_equal(T.conv2d_valid(x, w, np.zeros(1))[:, :, 0], x[:-1, :, 0])

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(3, 9, 7, 2)), rng.normal(size=(2, 3, 2, 3)), rng.normal(size=3)
        batched = T.conv2d_valid(x, w, b)
        for i in range(3):
            np.testing.assert_allclose(batched[i], T.conv2d_valid(x[i], w, b), rtol=1e-13)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x1, x2 = rng.normal(size=(2, 9, 8, 2))
        w, w2 = rng.normal(size=(2, 3, 3, 2, 2))
        z = np.zeros(2)
        lhs = T.conv2d_valid(2.0 * x1 - 3.0 * x2, w, z)
        rhs = 2.0 * T.conv2d_valid(x1, w, z) - 3.0 * T.conv2d_valid(x2, w, z)
        assert rel_err(lhs, rhs) < 1e-10
        lhs = T.conv2d_valid(x1, w + w2, z)
        assert rel_err(lhs, T.conv2d_valid(x1, w, z) + T.conv2d_valid(x1, w2, z)) < 1e-10

    def test_time_shift_covariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(20, 6, 1))
        w, b = rng.normal(size=(3, 2, 1, 2)), rng.normal(size=2)
        s = 4
        shifted = np.concatenate([np.zeros((s, 6, 1)), x[:-s]])
        np.testing.assert_allclose(T.conv2d_valid(shifted, w, b)[s:], T.conv2d_valid(x, w, b)[: -s], rtol=1e-12)

    @pytest.mark.parametrize(
        "x_shape, w_shape, axis",
        [((8, 8, 2), (3, 3, 3, 1), "channel"), ((2, 8, 1), (3, 3, 1, 1), "time"), ((8, 2, 1), (3, 3, 1, 1), "frequency")],
    )
    def test_errors_name_axis(self, x_shape, w_shape, axis):
        with pytest.raises(T.DimensionError, match=axis):
            T.conv2d_valid(np.zeros(x_shape), np.zeros(w_shape), np.zeros(w_shape[-1]))

    def test_non_finite_rejected(self):
        x = np.full((4, 4, 1), np.inf)
        with pytest.raises(T.NonFiniteError):
            T.conv2d_valid(x, np.ones((2, 2, 1, 1)), np.zeros(1))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
    def test_brute_force_random_shapes(self, dt, dk, cin, cout, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(dt + rng.integers(0, 4), dk + rng.integers(0, 4), cin))
        w, b = rng.normal(size=(dt, dk, cin, cout)), rng.normal(size=cout)
        assert rel_err(T.conv2d_valid(x, w, b), brute_conv(x, w, b)) < 1e-12


class TestSpiral:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 2), st.integers(0, 2**31))
    def test_brute_force(self, dt, dk, n_oct, q, cin, seed):
        rng = np.random.default_rng(seed)
        height = q * (n_oct - 1) + dk + rng.integers(0, 5)
        x = rng.normal(size=(dt + rng.integers(0, 3), height, cin))
        w, b = rng.normal(size=(dt, dk, n_oct, cin, 2)), rng.normal(size=2)
        assert rel_err(T.spiral_conv(x, w, b, q), brute_spiral(x, w, b, q)) < 1e-12

    def test_paper_geometry(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(9, 48, 1))
        w, b = rng.normal(size=(5, 3, 3, 1, 2)), rng.normal(size=2)
        y = T.spiral_conv(x, w, b, 12)
        assert y.shape == (5, 22, 2)
        assert rel_err(y, brute_spiral(x, w, b, 12)) < 1e-12

    def test_single_octave_is_plain_conv(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(10, 9, 2))
        w, b = rng.normal(size=(3, 2, 1, 2, 3)), rng.normal(size=3)
        np.testing.assert_allclose(T.spiral_conv(x, w, b, 12), T.conv2d_valid(x, w[:, :, 0], b), rtol=1e-13)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        x1, x2 = rng.normal(size=(2, 8, 30, 1))
        w = rng.normal(size=(2, 3, 3, 1, 2))
        z = np.zeros(2)
        lhs = T.spiral_conv(x1 + 0.5 * x2, w, z, 12)
        assert rel_err(lhs, T.spiral_conv(x1, w, z, 12) + 0.5 * T.spiral_conv(x2, w, z, 12)) < 1e-10

    def test_too_short(self):
        with pytest.raises(T.DimensionError, match="frequency"):
            T.spiral_conv(np.zeros((5, 20, 1)), np.zeros((1, 3, 3, 1, 1)), np.zeros(1), 12)


class TestPointwise:
    def test_leaky_relu_values(self):
        np.testing.assert_allclose(T.relu_leaky(np.array([-2.0, 0.0, 3.0]), 0.3), [-0.6, 0.0, 3.0])

    def test_alpha_one_identity(self):
        x = np.random.default_rng(0).normal(size=50)
        assert np.array_equal(T.relu_leaky(x, 1.0), x)

    def test_nonnegative_unchanged(self):
        x = np.abs(np.random.default_rng(0).normal(size=50))
        assert np.array_equal(T.relu_leaky(x, 0.3), x)

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            T.relu_leaky(np.zeros(3), 1.5)

    def test_subgradient_at_zero(self):
        assert T.relu_leaky_backward(np.ones(1), np.zeros(1), 0.3)[0] == pytest.approx(0.3)


def brute_pool(x, pt, pk):
    t, k, c = x.shape
    y = np.zeros((t // pt, k // pk, c))
    for i, j, ch in itertools.product(range(t // pt), range(k // pk), range(c)):
        y[i, j, ch] = x[i * pt : (i + 1) * pt, j * pk : (j + 1) * pk, ch].max()
    return y


class TestMaxpool:
    def test_shape_floor(self):
        assert T.maxpool(np.zeros((124, 92, 1)), 5, 3).shape == (24, 30, 1)

    def test_brute_force(self):
        x = np.random.default_rng(0).normal(size=(10, 9, 2))
        assert np.array_equal(T.maxpool(x, 5, 3), brute_pool(x, 5, 3))

    def test_constant(self):
        assert np.all(T.maxpool(np.full((11, 7, 1), 2.5), 5, 3) == 2.5)

    def test_unit_pool_is_identity(self):
        x = np.random.default_rng(1).normal(size=(10, 9, 2))
        assert np.array_equal(T.maxpool(T.maxpool(x, 1, 1), 5, 3), T.maxpool(x, 5, 3))

    def test_too_large(self):
        with pytest.raises(T.DimensionError, match="time"):
            T.maxpool(np.zeros((4, 9, 1)), 5, 3)
        with pytest.raises(T.DimensionError, match="frequency"):
            T.maxpool(np.zeros((9, 2, 1)), 5, 3)

    def test_tie_routes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        dx = T.maxpool_backward(np.ones((1, 1, 1, 1)), x, 2, 2)
        assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_backward_matches_argmax(self):
        x = np.random.default_rng(2).normal(size=(1, 10, 9, 1))
        dx = T.maxpool_backward(np.ones((1, 2, 3, 1)), x, 5, 3)
        for i, j in itertools.product(range(2), range(3)):
            win = x[0, i * 5 : i * 5 + 5, j * 3 : j * 3 + 3, 0]
            g = dx[0, i * 5 : i * 5 + 5, j * 3 : j * 3 + 3, 0]
            assert g.sum() == 1.0 and g.flat[np.argmax(win)] == 1.0
        assert dx[0, :, 9:].sum() == 0


class TestDenseSoftmax:
    def test_identity(self):
        x = np.arange(5.0)
        assert np.array_equal(T.dense(x, np.eye(5), np.zeros(5)), x)

    def test_zero_input(self):
        b = np.arange(3.0)
        assert np.array_equal(T.dense(np.zeros(4), np.ones((4, 3)), b), b)

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=12), rng.normal(size=(12, 5)), rng.normal(size=5)
        ref = [b[o] + sum(w[i, o] * x[i] for i in range(12)) for o in range(5)]
        assert rel_err(T.dense(x, w, b), np.array(ref)) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.dense(np.zeros((2, 7)), np.zeros((6, 3)))

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(np.zeros(8)), np.full(8, 1 / 8), atol=1e-15)

    def test_softmax_closed_form(self):
        np.testing.assert_allclose(T.softmax(np.array([np.log(2), 0, 0])), [0.5, 0.25, 0.25], atol=1e-15)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-500, 500))
    def test_softmax_properties(self, y, c):
        y = np.array(y)
        p = T.softmax(y)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(T.softmax(y + c), p, atol=1e-12)

    def test_softmax_large_logits(self):
        p = T.softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_cross_entropy_values(self):
        assert T.cross_entropy(np.full(8, 1 / 8), 3) == pytest.approx(np.log(8))
        assert T.cross_entropy(np.array([0.25, 0.75]), 0) == pytest.approx(np.log(4))
        assert T.cross_entropy(np.eye(4)[2], 2) == pytest.approx(0.0, abs=1e-11)
        assert T.cross_entropy(np.eye(4)[2], 0) == pytest.approx(-np.log(1e-12))

    def test_cross_entropy_index(self):
        with pytest.raises(IndexError):
            T.cross_entropy(np.full(8, 1 / 8), 8)

    def test_fused_gradient(self):
        g = T.softmax_cross_entropy_backward(np.full(8, 1 / 8), 0)
        assert np.array_equal(g, np.array([-7 / 8] + [1 / 8] * 7))


class TestDropout:
    def test_identity_cases(self):
        x = np.random.default_rng(0).normal(size=100)
        assert T.dropout(x, 0.0, True, np.random.default_rng(1))[0] is x
        assert T.dropout(x, 0.5, False)[0] is x

    def test_mean_preserved(self):
        y, mask = T.dropout(np.ones(10**6), 0.5, True, np.random.default_rng(2))
        assert abs(y.mean() - 1.0) < 0.01
        assert set(np.unique(y)) == {0.0, 2.0}

    def test_rate_range(self):
        with pytest.raises(ValueError):
            T.dropout(np.ones(3), 1.0, True, np.random.default_rng(0))


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        Adam(p).step(p, {"w": np.zeros(2)})
        assert np.array_equal(p["w"], [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = {"w": np.array([0.5, 0.5, 0.5])}
        Adam(p, lr=1e-3).step(p, {"w": np.array([3.0, -0.2, 1e-3])})
        np.testing.assert_allclose(np.abs(p["w"] - 0.5), 1e-3, rtol=1e-4)

    def test_quadratic_bowl(self):
        p = {"w": np.array([1.0])}
        opt = Adam(p, lr=1e-2)
        losses = []
        for _ in range(100):
            losses.append(float(p["w"][0] ** 2))
            opt.step(p, {"w": 2 * p["w"]})
        assert all(b < a for a, b in zip(losses, losses[1:]))
