"""Autodiff engine: values, gradients vs central differences, census exactness."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cpsp.tensor as T
from cpsp.tensor import (
    ContractError,
    DimensionError,
    MacMeter,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(a, 1e-8)]))


def finite_diff(loss_fn, params, h=1e-5):
    """Central-difference gradients of a scalar loss over a list of Tensors.

    The loss is re-evaluated with no tape, so the oracle never touches the
    reverse pass it is checking.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn().data)
            flat[i] = keep - h
            dn = float(loss_fn().data)
            flat[i] = keep
            gf[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.item() == 11.0  # 1*3 + 2*4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_against_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(5, 2))
        out = T.matmul(Tensor(a), Tensor(b))
        expected = np.stack([a[i] @ b for i in range(4)])
        np.testing.assert_allclose(out.data, expected, atol=1e-14)

    def test_macs(self):
        with MacMeter() as meter:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        assert meter.forward == 24  # m*k*n


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_direct_evaluation(self):
        # e^5 / (e^5 + 1) by hand
        out = T.softmax_rows(Tensor([[15.0, 10.0]]))
        np.testing.assert_allclose(out.data, [[0.993307, 0.006693]], atol=1e-6)

    @given(
        st.floats(-50, 50),
        st.floats(-30, 30),
        st.floats(-1e4, 1e4),
    )
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, a, delta, c):
        lhs = T.softmax_rows(Tensor([[c + a, c + a + delta]])).data
        rhs = T.softmax_rows(Tensor([[0.0, delta]])).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = T.softmax_rows(Tensor(rng.normal(scale=30, size=(20, 9))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data >= 0).all()


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 2]))
        np.testing.assert_allclose(loss.data, math.log(4), atol=1e-12)

    def test_confident(self):
        # -ln sigma(20) evaluated directly; cancellation in lse - z leaves
        # a few ulps of 10.0, so compare at 1e-15 absolute.
        loss = T.cross_entropy(Tensor([[10.0, -10.0]]), np.array([0]))
        np.testing.assert_allclose(loss.data, math.log1p(math.exp(-20.0)), atol=1e-15)
        assert loss.data < 2.1e-9

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestBackwardBasics:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            backward(T.sum_all(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_quadratic(self):
        w = Tensor(np.array([1.5, -2.0, 0.5]), requires_grad=True)
        with Tape():
            backward(T.sum_all(T.mul(w, w)))
        np.testing.assert_allclose(w.grad, 2 * w.data, atol=1e-14)

    def test_non_scalar_rejected(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape():
            out = T.mul(w, w)
            with pytest.raises(ContractError):
                backward(out)

    def test_unreachable_leaf_untouched(self):
        w = Tensor(np.ones(3), requires_grad=True)
        other = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            backward(T.sum_all(T.mul(w, w)))
        assert other.grad is None

    def test_tape_consumed(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            backward(T.sum_all(w))
            assert tape.live_elements == 0
            with pytest.raises(ContractError):
                T.sum_all(w)


def mlp_loss(ws, x, labels):
    h = T.gelu(T.add_rowvec(T.matmul(Tensor(x), ws[0]), ws[1]))
    h = T.gelu(T.add_rowvec(T.matmul(h, ws[2]), ws[3]))
    logits = T.add_rowvec(T.matmul(h, ws[4]), ws[5])
    return T.cross_entropy(logits, labels)


class TestFiniteDifferences:
    def test_three_layer_mlp(self):
        rng = np.random.default_rng(7)
        dims = [5, 6, 4, 3]
        ws = []
        for i in range(3):
            ws.append(Tensor(rng.normal(scale=0.5, size=(dims[i], dims[i + 1])), requires_grad=True, is_param=True))
            ws.append(Tensor(rng.normal(scale=0.1, size=dims[i + 1]), requires_grad=True, is_param=True))
        x = rng.normal(size=(4, 5))
        labels = rng.integers(0, 3, size=4)

        with Tape():
            backward(mlp_loss(ws, x, labels))
        oracle = finite_diff(lambda: mlp_loss(ws, x, labels), ws)
        for w, g in zip(ws, oracle):
            assert rel_err(w.grad, g) < 1e-4

    @pytest.mark.parametrize("with_prefix", [False, True])
    def test_attention_block(self, with_prefix):
        rng = np.random.default_rng(11)
        b, n, d, h, p = 2, 5, 8, 2, 3
        params = {
            "w_qkv": Tensor(rng.normal(scale=0.3, size=(d, 3 * d)), requires_grad=True, is_param=True),
            "b_qkv": Tensor(rng.normal(scale=0.1, size=3 * d), requires_grad=True, is_param=True),
            "w_out": Tensor(rng.normal(scale=0.3, size=(d, d)), requires_grad=True, is_param=True),
            "b_out": Tensor(rng.normal(scale=0.1, size=d), requires_grad=True, is_param=True),
        }
        x = Tensor(rng.normal(size=(b, n, d)), requires_grad=True)
        probe = Tensor(rng.normal(size=(b, n, d)))  # breaks symmetry: no zero grads
        prefix = None
        if with_prefix:
            prefix = (
                Tensor(rng.normal(size=(b, p, d)), requires_grad=True),
                Tensor(rng.normal(size=(b, p, d)), requires_grad=True),
            )

        def loss_fn():
            out = T.multi_head_attention(
                x, params["w_qkv"], params["b_qkv"], params["w_out"], params["b_out"], h,
                prefix_k=prefix[0] if prefix else None,
                prefix_v=prefix[1] if prefix else None,
            )
            return T.mean_all(T.mul(out, probe))

        with Tape():
            backward(loss_fn())
        leaves = [x, *params.values()] + (list(prefix) if prefix else [])
        oracle = finite_diff(loss_fn, leaves)
        for leaf, g in zip(leaves, oracle):
            assert rel_err(leaf.grad, g) < 1e-4

    def test_layer_norm_and_cosine(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        gamma = Tensor(rng.normal(scale=0.5, size=6) + 1.0, requires_grad=True, is_param=True)
        beta = Tensor(rng.normal(scale=0.2, size=6), requires_grad=True, is_param=True)
        k = Tensor(rng.normal(size=6), requires_grad=True, is_param=True)

        def loss_fn():
            y = T.layer_norm(x, gamma, beta)
            c = T.cosine_rows(y, k)
            return T.sum_all(T.mul(c, c))

        with Tape():
            backward(loss_fn())
        leaves = [x, gamma, beta, k]
        oracle = finite_diff(loss_fn, leaves)
        for leaf, g in zip(leaves, oracle):
            assert rel_err(leaf.grad, g) < 1e-4


class TestCosineRows:
    def test_zero_norm_is_zero(self):
        out = T.cosine_rows(Tensor(np.zeros((2, 4))), Tensor(np.ones(4)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_aligned_is_one(self):
        v = np.array([1.0, 2.0, -1.0])
        out = T.cosine_rows(Tensor(3.0 * v[None, :]), Tensor(v))
        np.testing.assert_allclose(out.data, [1.0], atol=1e-14)


class TestCensus:
    def test_live_matches_walk(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True, is_param=True)
        x = Tensor(rng.normal(size=(3, 4)))
        with Tape() as tape:
            h = T.gelu(T.matmul(x, w))
            T.softmax_rows(h)
            assert tape.live_elements == tape.census()
            # matmul keeps x (param w excluded); gelu keeps its input and the
            # tanh factor; softmax keeps its output.  All are (3, 4) buffers.
            assert tape.live_elements == 12 + (12 + 12) + 12

    def test_params_do_not_count(self):
        w = Tensor(np.ones((4, 4)), requires_grad=True, is_param=True)
        x = Tensor(np.ones((2, 4)), requires_grad=True)
        with Tape() as tape:
            T.matmul(x, w)
            assert tape.live_elements == x.size

    def test_shared_buffer_counted_once(self):
        x = Tensor(np.ones((3, 3)), requires_grad=True)
        with Tape() as tape:
            T.mul(x, x)
            assert tape.live_elements == 9

    def test_frozen_graph_records_nothing(self):
        x = Tensor(np.ones((3, 3)))
        w = Tensor(np.ones((3, 3)))
        with Tape() as tape:
            T.gelu(T.matmul(x, w))
            assert tape.live_elements == 0
            assert not tape.nodes


class TestDeterminism:
    def test_bit_identical_runs(self):
        def run():
            rng = np.random.default_rng(99)
            w = Tensor(rng.normal(size=(6, 6)), requires_grad=True, is_param=True)
            x = Tensor(rng.normal(size=(4, 6)))
            with Tape():
                loss = T.cross_entropy(T.matmul(x, w), np.array([0, 1, 2, 3]))
                backward(loss)
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestFiniteness:
    def test_inf_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.inf, 1.0])

    def test_overflow_caught(self):
        x = Tensor([[1e300, 1e300]])
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            T.mul(x, x)


class TestMacBackwardConvention:
    def test_backward_is_twice_forward(self):
        w = Tensor(np.ones((3, 4)), requires_grad=True, is_param=True)
        x = Tensor(np.ones((2, 3)))
        with MacMeter() as meter, Tape():
            out = T.matmul(x, w)
            backward(T.sum_all(out))
        assert meter.forward == 24
        assert meter.backward == 48
