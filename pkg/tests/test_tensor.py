import itertools

import numpy as np
import pytest

from ffc import tensor as T
from ffc.errors import ConfigError, DimensionError, DomainError


def direct_conv(x, w, stride, pad):
    """Nested-loop convolution used as the brute-force reference."""
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b, o, i, j in itertools.product(range(n), range(cout), range(ho), range(wo)):
        total = 0.0
        for ci, a, bb in itertools.product(range(c), range(kh), range(kw)):
            total += xp[b, ci, i * stride + a, j * stride + bb] * w[o, ci, a, bb]
        out[b, o, i, j] = total
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2], [3, 4]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), a), a)

    def test_hand_value(self):
        out = T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]]))
        np.testing.assert_array_equal(out, [[17], [39]])

    def test_zero_annihilates(self, rng):
        out = T.matmul(np.zeros((2, 3)), rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(out, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_associativity_f64(self, rng):
        for _ in range(20):
            a, b, c = (rng.standard_normal(s) for s in ((3, 4), (4, 5), (5, 2)))
            lhs = T.matmul(T.matmul(a, b), c)
            rhs = T.matmul(a, T.matmul(b, c))
            np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


class TestIm2col:
    def test_single_patch(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(T.im2col(x, 2, 2), [[0, 1, 2, 3]])

    def test_ones_three_by_three(self):
        cols = T.im2col(np.ones((1, 1, 3, 3)), 2, 2)
        np.testing.assert_array_equal(cols, np.ones((4, 4)))

    def test_padding_border_rows_contain_zeros(self, rng):
        x = rng.uniform(1, 2, (1, 1, 3, 3))
        cols = T.im2col(x, 1, 1, stride=1, pad=1).reshape(5, 5)
        assert np.all(cols[0] == 0) and np.all(cols[-1] == 0)
        assert np.all(cols[:, 0] == 0) and np.all(cols[:, -1] == 0)
        np.testing.assert_array_equal(cols[1:-1, 1:-1], x[0, 0])

    def test_non_integral_output_is_config_error(self):
        with pytest.raises(ConfigError):
            T.im2col(np.zeros((1, 1, 4, 4)), 3, 3, stride=2, pad=0)

    def test_matches_direct_convolution_exhaustively(self, rng):
        # every (kernel, stride, pad) that tiles a 1x1x4x4 input
        cases = 0
        for k, s, p in itertools.product((1, 2, 3, 4), (1, 2, 3), (0, 1, 2)):
            if (4 + 2 * p - k) % s:
                continue
            x = rng.standard_normal((1, 1, 4, 4))
            w = rng.standard_normal((2, 1, k, k))
            ho = (4 + 2 * p - k) // s + 1
            got = (T.im2col(x, k, k, s, p) @ w.reshape(2, -1).T).reshape(1, ho, ho, 2)
            np.testing.assert_allclose(got.transpose(0, 3, 1, 2), direct_conv(x, w, s, p), atol=1e-12)
            cases += 1
        assert cases >= 20

    def test_channels_last_is_a_column_permutation(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        a = T.im2col(x, 3, 3, 1, 1)
        b = T.im2col(x, 3, 3, 1, 1, channels_last=True)
        perm = np.arange(27).reshape(3, 3, 3).transpose(1, 2, 0).ravel()
        np.testing.assert_array_equal(a[:, perm], b)

    @pytest.mark.parametrize("channels_last", [False, True])
    def test_col2im_is_adjoint(self, rng, channels_last):
        x = rng.standard_normal((2, 3, 5, 5))
        cols = T.im2col(x, 3, 3, 2, 1, channels_last)
        y = rng.standard_normal(cols.shape)
        lhs = (cols * y).sum()
        rhs = (x * T.col2im(y, x.shape, 3, 3, 2, 1, channels_last)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestReduce:
    def test_mean(self):
        assert T.reduce(np.array([1.0, 2, 3, 4]), 0, "mean") == 2.5

    def test_argmax_lowest_index_on_tie(self):
        assert T.reduce(np.array([0, 5, 5]), 0, "argmax") == 1

    def test_sum_of_zeros(self):
        assert T.reduce(np.zeros(3), 0, "sum") == 0

    def test_argmax_repeatable(self, rng):
        x = rng.integers(0, 3, (50, 6))
        first = T.reduce(x, 1, "argmax")
        for _ in range(5):
            np.testing.assert_array_equal(T.reduce(x, 1, "argmax"), first)

    def test_empty_axis(self):
        with pytest.raises(DomainError):
            T.reduce(np.zeros((2, 0)), 1, "sum")

    def test_axis_out_of_range(self):
        with pytest.raises(DomainError):
            T.reduce(np.zeros(3), 1, "sum")


def test_row_major_indexing():
    x = np.arange(24).reshape(2, 3, 4)
    for idx in itertools.product(range(2), range(3), range(4)):
        assert x.ravel()[T.flat_index(idx, x.shape)] == x[idx]


def test_tensor_shape_product_checked():
    with pytest.raises(DimensionError):
        T.tensor([1, 2, 3], shape=(2, 2))


def test_precision_switch():
    assert T.get_dtype() == np.float32
    with T.precision("f64"):
        assert T.zeros(2).dtype == np.float64
    assert T.zeros(2).dtype == np.float32
