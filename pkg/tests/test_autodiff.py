"""Tensor op semantics and gradient correctness.

Expected values come from hand arithmetic or brute-force recomputation
in the test itself, never from the ops under test.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmkgr import autodiff as ad
from mmkgr.autodiff import DimensionError, NonFiniteError, Parameter
from mmkgr.gradcheck import finite_diff_check
from mmkgr.optim import Adam


def fd_ok(loss_fn, params, tol=1e-4):
    report = finite_diff_check(loss_fn, params, epsilon=1e-5, tolerance=tol)
    assert report.passed, str(report)


class TestBasicOps:
    def test_identity_matmul(self):
        x = np.arange(12.0).reshape(3, 4)
        out = ad.matmul(ad.constant(np.eye(3)), ad.constant(x))
        assert np.array_equal(out.data, x)

    def test_scale_zero(self):
        out = ad.scale(ad.constant([[1.0, -2.0], [3.0, 4.0]]), 0.0)
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_matmul_hand_fixture(self):
        # 2x3 . 3x1 worked out by hand
        a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = np.array([[2.0], [1.0], [-1.0]])
        out = ad.matmul(ad.constant(a), ad.constant(b))
        assert np.array_equal(out.data, np.array([[1.0], [7.0]]))

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_add_shape_error(self):
        with pytest.raises(DimensionError):
            ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.Tensor(np.array([1.0, np.inf]))

    def test_non_finite_op_result_rejected(self):
        big = ad.constant(np.array([1e308]))
        with pytest.raises(NonFiniteError):
            ad.add(big, big)

    def test_division_by_zero_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.div(ad.constant(1.0), ad.constant(0.0))

    def test_concat_and_slices_roundtrip(self):
        a, b = np.ones((2, 3)), 2 * np.ones((3, 3))
        merged = ad.concat([ad.constant(a), ad.constant(b)], axis=0)
        assert merged.shape == (5, 3)
        back = ad.slice_rows(merged, 2, 5)
        assert np.array_equal(back.data, b)
        cols = ad.slice_cols(merged, 1, 3)
        assert cols.shape == (5, 2)

    def test_take_rows_gathers(self):
        table = np.arange(12.0).reshape(4, 3)
        out = ad.take_rows(ad.constant(table), [3, 0, 3])
        assert np.array_equal(out.data, table[[3, 0, 3]])

    def test_take_rows_out_of_range(self):
        with pytest.raises(DimensionError):
            ad.take_rows(ad.constant(np.zeros((2, 2))), [2])

    def test_replace_row_values(self):
        x = ad.constant(np.zeros((3, 2)))
        out = ad.replace_row(x, 1, ad.constant([5.0, 6.0]))
        assert np.array_equal(out.data, [[0, 0], [5, 6], [0, 0]])

    def test_replace_rows_rejects_duplicates(self):
        with pytest.raises(DimensionError):
            ad.replace_rows(ad.constant(np.zeros((3, 2))), [1, 1],
                            ad.constant(np.ones((2, 2))))

    def test_tile_rows(self):
        out = ad.tile_rows(ad.constant([1.0, 2.0]), 3)
        assert np.array_equal(out.data, [[1, 2], [1, 2], [1, 2]])
        with pytest.raises(DimensionError):
            ad.tile_rows(ad.constant([1.0]), 0)


class TestSoftmaxAttention:
    def test_uniform_vector_softmax(self):
        out = ad.softmax(ad.constant(np.zeros(7)))
        assert np.allclose(out.data, np.full(7, 1.0 / 7), atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax(ad.constant(rng.normal(size=(5, 9)) * 10), axis=-1)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_softmax_simplex_property(self, values):
        out = ad.softmax(ad.constant(np.array(values)))
        assert np.all(out.data >= 0)
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_softmax_zero_axis_error(self):
        with pytest.raises(DimensionError):
            ad.softmax(ad.constant(np.zeros((3, 0))))

    def test_single_key_attention_returns_value_row(self):
        rng = np.random.default_rng(1)
        q = ad.constant(rng.normal(size=(4, 3)))
        k = ad.constant(rng.normal(size=(1, 3)))
        v = ad.constant(rng.normal(size=(1, 5)))
        out = ad.scaled_dot_attention(q, k, v)
        assert np.allclose(out.data, np.tile(v.data, (4, 1)), atol=1e-15)

    def test_attention_matches_brute_force(self):
        rng = np.random.default_rng(2)
        q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 6))
        out = ad.scaled_dot_attention(ad.constant(q), ad.constant(k), ad.constant(v))
        scores = q @ k.T / np.sqrt(4)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(out.data, weights @ v, atol=1e-14)

    def test_attention_output_is_convex_combination(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(5, 3))
        out = ad.scaled_dot_attention(
            ad.constant(rng.normal(size=(4, 2))),
            ad.constant(rng.normal(size=(5, 2))),
            ad.constant(v),
        )
        assert np.all(out.data.max(axis=1) <= v.max(axis=0).max() + 1e-12)
        assert np.all(out.data.min(axis=1) >= v.min(axis=0).min() - 1e-12)

    def test_masked_attention_excludes_blocked_keys(self):
        rng = np.random.default_rng(4)
        q = ad.constant(rng.normal(size=(2, 3)))
        k = ad.constant(rng.normal(size=(4, 3)))
        v = ad.constant(rng.normal(size=(4, 3)))
        mask = np.zeros((2, 4))
        mask[:, 2:] = -1e9
        masked = ad.scaled_dot_attention(q, k, v, mask=mask)
        trimmed = ad.scaled_dot_attention(q, ad.slice_rows(k, 0, 2), ad.slice_rows(v, 0, 2))
        assert np.allclose(masked.data, trimmed.data, atol=1e-12)


class TestGradients:
    """Every differentiable op against the finite-difference oracle,
    three seeds each."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matmul_add_chain(self, seed):
        rng = np.random.default_rng(seed)
        w = Parameter(rng.normal(size=(4, 3)), name="w")
        b = Parameter(rng.normal(size=3), name="b")
        x = ad.constant(rng.normal(size=(5, 4)))
        fd_ok(lambda: ad.tsum(ad.mul(y := ad.add(ad.matmul(x, w), b), y)), [("w", w), ("b", b)])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_elementwise_ops(self, seed):
        rng = np.random.default_rng(seed)
        p = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), name="p")

        def loss():
            a = ad.exp(ad.scale(p, 0.3))
            b = ad.log(p)
            c = ad.sqrt(p)
            d = ad.gelu(p)
            e = ad.sigmoid(p)
            f = ad.softplus(p)
            g = ad.sin(p)
            return ad.tsum(ad.mul(ad.add(ad.add(a, b), ad.add(c, d)), ad.add(e, ad.add(f, g))))

        fd_ok(loss, [("p", p)])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_absolute_away_from_zero(self, seed):
        rng = np.random.default_rng(seed)
        p = Parameter(rng.uniform(0.5, 1.5, size=6) * rng.choice([-1, 1], size=6), name="p")
        fd_ok(lambda: ad.tsum(ad.absolute(p)), [("p", p)])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_softmax_layernorm_attention(self, seed):
        rng = np.random.default_rng(seed)
        q = Parameter(rng.normal(size=(3, 4)), name="q")
        k = Parameter(rng.normal(size=(5, 4)), name="k")
        v = Parameter(rng.normal(size=(5, 4)), name="v")
        gain = Parameter(1.0 + 0.1 * rng.normal(size=4), name="gain")
        bias = Parameter(0.1 * rng.normal(size=4), name="bias")

        def loss():
            att = ad.scaled_dot_attention(q, k, v)
            normed = ad.layer_norm(att, gain, bias)
            sm = ad.softmax(normed, axis=-1)
            return ad.tsum(ad.mul(sm, att))

        fd_ok(loss, [("q", q), ("k", k), ("v", v), ("gain", gain), ("bias", bias)])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gather_scatter_ops(self, seed):
        rng = np.random.default_rng(seed)
        table = Parameter(rng.normal(size=(6, 3)), name="table")
        vec = Parameter(rng.normal(size=3), name="vec")

        def loss():
            picked = ad.take_rows(table, [0, 2, 2, 5])
            swapped = ad.replace_row(picked, 1, vec)
            tiled = ad.tile_rows(vec, 4)
            merged = ad.concat([swapped, tiled], axis=0)
            return ad.tsum(ad.mul(merged, merged))

        fd_ok(loss, [("table", table), ("vec", vec)])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_replace_rows_and_logsumexp_rows(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(rng.normal(size=(5, 4)), name="x")
        v = Parameter(rng.normal(size=(2, 4)), name="v")

        def loss():
            swapped = ad.replace_rows(x, [1, 3], v)
            return ad.tsum(ad.logsumexp_rows(swapped))

        fd_ok(loss, [("x", x), ("v", v)])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_reductions_and_div(self, seed):
        rng = np.random.default_rng(seed)
        a = Parameter(rng.uniform(0.5, 2.0, size=(4, 3)), name="a")
        b = Parameter(rng.uniform(0.5, 2.0, size=(4, 3)), name="b")

        def loss():
            ratio = ad.div(a, b)
            per_row = ad.tsum(ratio, axis=1)
            return ad.add(ad.tmean(per_row), ad.logsumexp(ad.tsum(ratio, axis=0)))

        fd_ok(loss, [("a", a), ("b", b)])

    def test_frozen_parameter_excluded(self):
        p = Parameter(np.ones(3), name="p")
        frozen = Parameter(np.ones(3), name="frozen", trainable=False)
        report = finite_diff_check(
            lambda: ad.tsum(ad.mul(p, p)), [("p", p), ("frozen", frozen)]
        )
        assert set(report.block_errors) == {"p"}

    def test_quadratic_precision(self):
        theta = Parameter(np.array([0.3, -1.2, 2.0]), name="theta")
        report = finite_diff_check(lambda: ad.tsum(ad.mul(theta, theta)),
                                   [("theta", theta)], epsilon=1e-5, tolerance=1e-8)
        assert report.passed and report.max_rel_error < 1e-8

    def test_gradient_accumulates_over_reuse(self):
        p = Parameter(np.array([2.0]), name="p")
        loss = ad.add(ad.mul(p, p), ad.scale(p, 3.0))  # p^2 + 3p -> 2p + 3 = 7
        loss = ad.tsum(loss)
        loss.backward()
        assert np.allclose(p.grad, [7.0])

    def test_non_finite_loss_raises_in_check(self):
        p = Parameter(np.array([2.0]), name="p")
        with pytest.raises(NonFiniteError):
            finite_diff_check(lambda: ad.log(ad.sub(p, 2.0)), [("p", p)])


class TestDeterminism:
    def test_ops_bitwise_deterministic(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))

        def pipeline():
            x = ad.matmul(ad.constant(a), ad.constant(b))
            x = ad.softmax(x, axis=1)
            x = ad.layer_norm(x, ad.constant(np.ones(6)), ad.constant(np.zeros(6)))
            return ad.tsum(ad.gelu(x)).data

        assert pipeline().tobytes() == pipeline().tobytes()


class TestAdam:
    def test_zero_gradient_leaves_parameter_unchanged(self):
        p = Parameter(np.array([1.5, -0.5]), name="p")
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_constant_gradient_moves_against_sign(self):
        p = Parameter(np.array([0.0]), name="p")
        opt = Adam([p], lr=0.01)
        for _ in range(50):
            p.grad = np.array([1.0])
            opt.step()
        assert p.data[0] < 0

        q = Parameter(np.array([0.0]), name="q")
        opt2 = Adam([q], lr=0.01)
        for _ in range(50):
            q.grad = np.array([-1.0])
            opt2.step()
        assert q.data[0] > 0

    def test_single_step_hand_computed(self):
        # lr=0.1, g=1 => m=0.1, v=0.001, m_hat=1, v_hat=1,
        # delta = -0.1 * 1 / (1 + 1e-8)
        p = Parameter(np.array([0.7]), name="p")
        opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        p.grad = np.array([1.0])
        opt.step()
        expected = 0.7 - 0.1 * 1.0 / (1.0 + 1e-8)
        assert abs(p.data[0] - expected) < 1e-15

    def test_frozen_parameter_not_updated(self):
        p = Parameter(np.array([1.0]), name="p", trainable=False)
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == 1.0

    def test_step_counter_increases(self):
        p = Parameter(np.array([1.0]), name="p")
        opt = Adam([p], lr=0.1)
        for expected in (1, 2, 3):
            p.grad = np.array([0.5])
            opt.step()
            assert opt.step_count == expected
