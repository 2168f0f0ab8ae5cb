import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rand, triple_loop_matmul
from stasmil.tensorops import (SeededRng, ShapeError, adaptive_max_pool,
                               adaptive_max_pool_backward, adaptive_max_pool_compressed,
                               as_tensor, dropout_mask, grad_check, layer_norm,
                               layer_norm_backward, leaky_relu, matmul, pool_bins)


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), x), x)

    def test_row_times_column(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert np.array_equal(out, np.array([[11.0]]))

    def test_matches_triple_loop_exactly(self):
        a, b = rand((5, 4), 1), rand((4, 3), 2)
        assert np.array_equal(matmul(a, b), triple_loop_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(rand((2, 3)), rand((2, 3)))

    def test_transpose_consistency(self):
        for seed in range(5):
            a, b = rand((6, 4), seed), rand((6, 3), seed + 50)
            assert np.array_equal(matmul(a.T, b).T, matmul(b.T, a))

    def test_associativity_with_identity(self):
        a = rand((7, 7), 3)
        assert np.array_equal(matmul(matmul(a, np.eye(7)), a), matmul(a, matmul(np.eye(7), a)))

    def test_large_path_agrees_with_exact(self):
        a, b = rand((200, 40), 4), rand((40, 8), 5)
        exact = np.vstack([matmul(a[i:i + 1], b) for i in range(200)])
        assert np.allclose(matmul(a, b), exact, rtol=1e-13, atol=0)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out, _ = layer_norm(np.array([[3.0, 3.0, 3.0]]), np.ones(3), np.zeros(3))
        assert np.array_equal(out, np.zeros((1, 3)))

    def test_already_normalized_row(self):
        out, _ = layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-300)
        assert np.allclose(out, [[1.0, -1.0]], atol=1e-12)

    def test_matches_mean_var_oracle(self):
        x = rand((4, 9), 6)
        gain, shift = rand((9,), 7), rand((9,), 8)
        out, _ = layer_norm(x, gain, shift)
        for i in range(4):
            mu = x[i].mean()
            sd = np.sqrt(x[i].var() + 1e-5)
            assert np.max(np.abs(out[i] - (gain * (x[i] - mu) / sd + shift))) < 1e-12

    def test_standardization_property(self):
        x = rand((8, 33), 9)
        out, _ = layer_norm(x, np.ones(33), np.zeros(33), eps=1e-12)
        assert np.max(np.abs(out.mean(axis=1))) < 1e-12
        assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-9

    def test_zero_length_row_rejected(self):
        with pytest.raises(ShapeError):
            layer_norm(np.empty((2, 0)), np.ones(0), np.zeros(0))

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            layer_norm(np.ones((1, 2)), np.ones(2), np.zeros(2), eps=0.0)

    def test_backward_matches_fd(self):
        x, gain, shift = rand((3, 5), 10), rand((5,), 11), rand((5,), 12)
        w = rand((3, 5), 13)

        def loss_and_grad(p):
            out, cache = layer_norm(p["x"], p["gain"], p["shift"])
            dx, dg, db = layer_norm_backward(w, cache)
            return float((w * out).sum()), {"x": dx, "gain": dg, "shift": db}

        for rep in grad_check(loss_and_grad, {"x": x, "gain": gain, "shift": shift}, 1e-6):
            assert rep.passed, rep


class TestLeakyRelu:
    def test_definition(self):
        assert np.array_equal(leaky_relu(np.array([2.0, -2.0]), 0.01), [2.0, -0.02])

    def test_zero_slope_is_relu(self):
        assert np.array_equal(leaky_relu(np.array([-1.0, 1.0]), 0.0), [0.0, 1.0])

    def test_unit_slope_is_identity(self):
        assert np.array_equal(leaky_relu(np.array([-3.0, 3.0]), 1.0), [-3.0, 3.0])

    def test_slope_range(self):
        with pytest.raises(ValueError):
            leaky_relu(np.array([1.0]), -0.1)
        with pytest.raises(ValueError):
            leaky_relu(np.array([1.0]), 1.5)


class TestDropout:
    def test_p_zero_is_all_ones(self, rng):
        assert np.array_equal(dropout_mask((4, 5), 0.0, rng, training=True), np.ones((4, 5)))

    def test_inference_is_all_ones(self, rng):
        assert np.array_equal(dropout_mask((4, 5), 0.2, rng, training=False), np.ones((4, 5)))

    def test_keep_fraction(self):
        mask = dropout_mask((100_000,), 0.2, SeededRng(1), training=True)
        kept = float((mask > 0).mean())
        assert abs(kept - 0.8) < 0.01
        assert np.allclose(mask[mask > 0], 1.0 / 0.8)

    def test_p_one_rejected(self, rng):
        with pytest.raises(ValueError):
            dropout_mask((2,), 1.0, rng, training=True)

    def test_identical_seeds_identical_masks(self):
        a = dropout_mask((64,), 0.3, SeededRng(9), training=True)
        b = dropout_mask((64,), 0.3, SeededRng(9), training=True)
        assert np.array_equal(a, b)


def pool_oracle(x, target):
    """Evaluate the documented bin formula directly."""
    n = x.shape[0]
    pooled = np.zeros((target, x.shape[1]))
    prov = np.zeros(target, dtype=int)
    for i in range(target):
        lo = int(np.floor(i * n / target))
        hi = int(np.ceil((i + 1) * n / target))
        pooled[i] = x[lo:hi].max(axis=0)
        prov[i] = lo + int(np.argmax(np.linalg.norm(x[lo:hi], axis=1)))
    return pooled, prov


class TestAdaptiveMaxPool:
    def test_two_bin_example(self):
        x = np.array([[1.0], [3.0], [2.0], [5.0]])
        pooled, prov, _ = adaptive_max_pool(x, 2)
        assert np.array_equal(pooled, [[3.0], [5.0]])
        assert np.array_equal(prov, [1, 3])

    def test_identity_when_target_equals_n(self):
        x = rand((7, 3), 14)
        pooled, prov, _ = adaptive_max_pool(x, 7)
        assert np.array_equal(pooled, x)
        assert np.array_equal(prov, np.arange(7))

    def test_overlapping_bins(self):
        x = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
        pooled, _, _ = adaptive_max_pool(x, 2)
        # bins [0,3) and [2,5)
        assert np.array_equal(pooled, [[3.0], [5.0]])

    def test_exhaustive_against_oracle(self):
        for n in range(1, 17):
            for t in range(1, 17):
                x = rand((n, 3), 100 * n + t)
                pooled, prov, _ = adaptive_max_pool(x, t)
                exp_pooled, exp_prov = pool_oracle(x, t)
                assert np.array_equal(pooled, exp_pooled), (n, t)
                assert np.array_equal(prov, exp_prov), (n, t)

    def test_empty_input_rejected(self):
        with pytest.raises(ShapeError):
            adaptive_max_pool(np.empty((0, 3)), 2)

    def test_backward_routes_to_argmax(self):
        x = np.array([[1.0, 5.0], [4.0, 2.0], [3.0, 3.0]])
        pooled, _, cache = adaptive_max_pool(x, 1)
        dx = adaptive_max_pool_backward(np.array([[1.0, 1.0]]), cache)
        assert np.array_equal(dx, [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])

    def test_compressed_expands_to_plain(self):
        for n in range(1, 17):
            for t in range(1, 17):
                x = rand((n, 2), 7 * n + t)
                plain, prov, _ = adaptive_max_pool(x, t)
                uniq, counts, slot_map, prov_c, _ = adaptive_max_pool_compressed(x, t)
                assert np.array_equal(uniq[slot_map], plain)
                assert np.array_equal(prov_c, prov)
                assert counts.sum() == t
                assert len(uniq) == len(set(pool_bins(n, t)))


class TestGradCheck:
    def test_quadratic_loss(self):
        w = rand((4, 3), 15)
        x = rand((3,), 16)

        def loss_and_grad(p):
            y = p["w"] @ x
            return 0.5 * float(y @ y), {"w": np.outer(y, x)}

        reports = grad_check(loss_and_grad, {"w": w}, tol=1e-7)
        assert all(r.passed for r in reports)
        assert max(r.max_rel_error for r in reports) < 1e-7

    def test_zero_gradient_reports_zero(self):
        frozen = rand((3,), 17)

        def loss_and_grad(p):
            return 1.5, {"frozen": np.zeros(3)}

        (rep,) = grad_check(loss_and_grad, {"frozen": frozen}, tol=1e-7)
        assert rep.max_rel_error == 0.0 and rep.passed

    def test_non_finite_loss_rejected(self):
        def loss_and_grad(p):
            return float("nan"), {"x": np.zeros(1)}

        with pytest.raises(ValueError):
            grad_check(loss_and_grad, {"x": np.zeros(1)}, tol=1e-4)


class TestSeededRng:
    def test_identical_streams(self):
        a, b = SeededRng(42), SeededRng(42)
        assert np.array_equal(a.normal((16,)), b.normal((16,)))
        assert np.array_equal(a.permutation(10), b.permutation(10))

    def test_state_roundtrip(self):
        r = SeededRng(1)
        r.random((7,))
        state = r.state
        x = r.random((5,))
        r2 = SeededRng(999)
        r2.set_state(state)
        assert np.array_equal(r2.random((5,)), x)


class TestAsTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            as_tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            as_tensor([np.inf])

    def test_converts_to_float64(self):
        t = as_tensor(np.ones((2, 2), dtype=np.float32))
        assert t.dtype == np.float64 and t.flags["C_CONTIGUOUS"]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 1000))
def test_matmul_transpose_property(m, n, seed):
    a, b = rand((m, n), seed), rand((m, 3), seed + 1)
    assert np.array_equal(matmul(a.T, b).T, matmul(b.T, a))
