"""Prompt pool: composition weights, expansion, freezing."""

import numpy as np
import pytest

import cpsp.tensor as T
from cpsp.prompts import PromptPool, compose, expand_for_task, set_frozen
from cpsp.tensor import ContractError, Tape, Tensor, backward

D = 16


def make_pool(tasks=1, quota=2, plen=3, seed=0, layers=(0, 1)):
    pool = PromptPool(D, prefix_len=plen, quota=quota, injected_layers=layers,
                      rng=np.random.default_rng(seed))
    for t in range(tasks):
        expand_for_task(pool, t)
    return pool


class TestCompose:
    def test_single_component_unit_weight(self):
        pool = make_pool(tasks=1, quota=1)
        rng = np.random.default_rng(1)
        zq = rng.normal(size=(1, D))
        # force alpha = 1: key parallel to z_q gated by the attention vector
        gated = zq[0] * pool.attn_vecs.data[0]
        pool.keys.data = (gated / np.linalg.norm(gated))[None, :]
        prefix = compose(zq, pool)
        np.testing.assert_allclose(prefix.weights, [[1.0]], atol=1e-12)
        k, v = prefix.layers[0]
        np.testing.assert_allclose(
            k.data[0].reshape(-1), pool.prompts[(0, "k")].data[0], atol=1e-12
        )
        np.testing.assert_allclose(
            v.data[0].reshape(-1), pool.prompts[(0, "v")].data[0], atol=1e-12
        )

    def test_two_identical_components_double(self):
        pool = make_pool(tasks=1, quota=1)
        rng = np.random.default_rng(2)
        zq = rng.normal(size=(2, D))
        single = compose(zq, pool)

        twin = make_pool(tasks=1, quota=1)
        twin.keys = Tensor(np.vstack([pool.keys.data] * 2), is_param=True)
        twin.attn_vecs = Tensor(np.vstack([pool.attn_vecs.data] * 2), is_param=True)
        for key in twin.prompts:
            twin.prompts[key] = Tensor(np.vstack([pool.prompts[key].data] * 2), is_param=True)
        doubled = compose(zq, twin)
        for layer in (0, 1):
            np.testing.assert_allclose(
                doubled.layers[layer][0].data, 2 * single.layers[layer][0].data, atol=1e-12
            )

    def test_zero_norm_gives_zero_weight(self):
        pool = make_pool(tasks=1, quota=1)
        pool.attn_vecs.data[:] = 0.0
        prefix = compose(np.ones((1, D)), pool)
        np.testing.assert_array_equal(prefix.weights, [[0.0]])
        np.testing.assert_array_equal(prefix.layers[0][0].data, 0.0)

    def test_homogeneous_in_prompts(self):
        pool = make_pool(tasks=2)
        zq = np.random.default_rng(3).normal(size=(2, D))
        base = compose(zq, pool)
        for key in pool.prompts:
            pool.prompts[key] = Tensor(3.0 * pool.prompts[key].data, is_param=True)
        scaled = compose(zq, pool)
        for layer in pool.injected_layers:
            np.testing.assert_allclose(scaled.layers[layer][0].data,
                                       3.0 * base.layers[layer][0].data, atol=1e-12)
            np.testing.assert_allclose(scaled.layers[layer][1].data,
                                       3.0 * base.layers[layer][1].data, atol=1e-12)
        np.testing.assert_allclose(scaled.weights, base.weights, atol=1e-15)

    def test_empty_pool_rejected(self):
        pool = PromptPool(D, rng=np.random.default_rng(0))
        with pytest.raises(ContractError):
            compose(np.ones((1, D)), pool)

    def test_gradients_match_finite_differences(self):
        from test_tensor import finite_diff, rel_err

        pool = make_pool(tasks=1, quota=2, plen=2, layers=(0,))
        rng = np.random.default_rng(5)
        zq = rng.normal(size=(3, D))
        probes = {
            layer: (rng.normal(size=(3, 2, D)), rng.normal(size=(3, 2, D)))
            for layer in pool.injected_layers
        }

        def loss_fn():
            prefix = compose(zq, pool)
            total = None
            for layer, (rk, rv) in probes.items():
                k, v = prefix.layers[layer]
                term = T.add(T.sum_all(T.mul(k, Tensor(rk))), T.sum_all(T.mul(v, Tensor(rv))))
                total = term if total is None else T.add(total, term)
            return total

        params = list(pool.parameters().values())
        with Tape():
            backward(loss_fn())
        oracle = finite_diff(loss_fn, params)
        for p, g in zip(params, oracle):
            assert rel_err(p.grad, g) < 1e-4


class TestExpansion:
    def test_count_law(self):
        pool = PromptPool(32, quota=2, rng=np.random.default_rng(0))
        for t in range(10):
            expand_for_task(pool, t)
        assert pool.num_components == 20

    def test_out_of_order_rejected(self):
        pool = make_pool(tasks=1)
        with pytest.raises(ContractError):
            expand_for_task(pool, 3)

    def test_new_keys_orthogonal(self):
        pool = PromptPool(32, quota=2, rng=np.random.default_rng(7))
        for t in range(5):
            old = pool.keys.data.copy()
            expand_for_task(pool, t)
            new = pool.keys.data[old.shape[0]:]
            if old.size:
                assert np.abs(old @ new.T).max() < 1e-10

    def test_expansion_preserves_old_composition(self):
        pool = make_pool(tasks=1, quota=2)
        zq = np.random.default_rng(9).normal(size=(2, D))
        before = compose(zq, pool)
        expand_for_task(pool, 1)
        # silence the new components: zero attention vectors => zero cosines
        pool.attn_vecs.data[2:] = 0.0
        after = compose(zq, pool)
        for layer in pool.injected_layers:
            np.testing.assert_allclose(after.layers[layer][0].data,
                                       before.layers[layer][0].data, atol=1e-12)
        np.testing.assert_allclose(after.weights[:, :2], before.weights, atol=1e-12)
        np.testing.assert_array_equal(after.weights[:, 2:], 0.0)

    def test_parameter_count_structure(self):
        # parameters depend only on m, D, prefix_len, injected layers
        pool = make_pool(tasks=3, quota=2, plen=4, layers=(0, 1))
        m = pool.num_components
        assert pool.parameter_count() == m * (2 * D + 2 * 2 * 4 * D)


class TestFreezing:
    def _train_steps(self, pool, steps=5):
        from cpsp.training import AdamState, adam_step

        rng = np.random.default_rng(11)
        zq = rng.normal(size=(2, D))
        params = pool.parameters()
        state = AdamState(params)
        for _ in range(steps):
            with Tape():
                prefix = compose(zq, pool)
                loss = None
                for layer in pool.injected_layers:
                    k, v = prefix.layers[layer]
                    term = T.add(T.sum_all(T.mul(k, k)), T.sum_all(T.mul(v, v)))
                    loss = term if loss is None else T.add(loss, term)
                if loss.requires_grad:  # a fully frozen pool records nothing
                    backward(loss)
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            if grads:
                adam_step(state, {n: params[n] for n in grads}, grads, lr=0.05)
            for p in params.values():
                p.zero_grad()

    def test_frozen_pool_is_bit_identical(self):
        pool = make_pool(tasks=2)
        set_frozen(pool, True)
        before = {n: p.data.tobytes() for n, p in pool.parameters().items()}
        self._train_steps(pool)
        after = {n: p.data.tobytes() for n, p in pool.parameters().items()}
        assert before == after

    def test_unfrozen_pool_moves(self):
        pool = make_pool(tasks=2)
        before = {n: p.data.copy() for n, p in pool.parameters().items()}
        self._train_steps(pool)
        assert any(not np.array_equal(before[n], p.data) for n, p in pool.parameters().items())

    def test_freeze_round_trip(self):
        pool = make_pool(tasks=1)
        set_frozen(pool, True)
        set_frozen(pool, False)
        before = {n: p.data.copy() for n, p in pool.parameters().items()}
        self._train_steps(pool, steps=2)
        assert any(not np.array_equal(before[n], p.data) for n, p in pool.parameters().items())
