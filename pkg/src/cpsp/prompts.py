"""Learnable prompt pool with query-weighted composition.

Components accumulate over tasks (a fixed quota per task, keys orthogonally
initialised against the existing ones).  Composition weights every
component's key/value prefix rows by the cosine between the query feature
gated by the component's attention vector and the component's key; the
weighted sum stays differentiable in all component parameters, so earlier
components keep training unless explicitly frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import cpsp.tensor as T
from cpsp.tensor import ContractError, Tensor

__all__ = ["PromptComponent", "PromptPool", "PromptPrefix", "compose", "expand_for_task", "set_frozen"]


@dataclass
class PromptComponent:
    """Read-only view of one component's parameters."""

    key: np.ndarray
    attention_vector: np.ndarray
    prompt_blocks: dict  # (layer, "k"|"v") -> (prefix_len, D) array


@dataclass
class PromptPrefix:
    """Per-injected-layer key/value prefix rows plus the composition weights."""

    layers: dict  # layer -> (Tensor (B,P,D), Tensor (B,P,D))
    weights: np.ndarray  # (B, m)

    @property
    def prefix_len(self) -> int:
        k, _ = next(iter(self.layers.values()))
        return k.shape[1]


class PromptPool:
    """Expandable set of prompt components.

    ``quota`` components are appended per task by :meth:`expand_for_task`.
    ``freeze_previous`` zeroes gradients of pre-existing components after
    each expansion instead of keeping them end-to-end trainable.
    """

    def __init__(self, feature_dim, prefix_len=8, quota=2, injected_layers=(0, 1),
                 rng=None, freeze_previous=False):
        if prefix_len < 1:
            raise ContractError("prefix_len must be >= 1")
        self.feature_dim = feature_dim
        self.prefix_len = prefix_len
        self.quota = quota
        self.injected_layers = tuple(injected_layers)
        self.freeze_previous = freeze_previous
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.tasks_seen = 0
        self.frozen = False
        self.keys = Tensor(np.zeros((0, feature_dim)), is_param=True)
        self.attn_vecs = Tensor(np.zeros((0, feature_dim)), is_param=True)
        self.prompts = {
            (layer, kv): Tensor(np.zeros((0, prefix_len * feature_dim)), is_param=True)
            for layer in self.injected_layers
            for kv in ("k", "v")
        }

    @property
    def num_components(self) -> int:
        return self.keys.shape[0]

    def parameters(self) -> dict:
        out = {"pool.keys": self.keys, "pool.attn": self.attn_vecs}
        for (layer, kv), t in self.prompts.items():
            out[f"pool.prompt.{layer}.{kv}"] = t
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def component(self, m: int) -> PromptComponent:
        if not 0 <= m < self.num_components:
            raise IndexError(f"component {m} out of range")
        blocks = {
            key: t.data[m].reshape(self.prefix_len, self.feature_dim).copy()
            for key, t in self.prompts.items()
        }
        return PromptComponent(self.keys.data[m].copy(), self.attn_vecs.data[m].copy(), blocks)

    def _set_trainable(self) -> None:
        flag = not self.frozen
        for p in self.parameters().values():
            p.requires_grad = flag

    def mask_previous_gradients(self) -> None:
        """With ``freeze_previous``, zero gradient rows of pre-quota components."""
        if not self.freeze_previous or self.tasks_seen <= 1:
            return
        old = (self.tasks_seen - 1) * self.quota
        for p in self.parameters().values():
            if p.grad is not None:
                p.grad[:old] = 0.0


def expand_for_task(pool: PromptPool, task_index: int) -> PromptPool:
    """Append this task's quota of fresh components.

    New keys are drawn at random and Gram-Schmidt orthogonalised against all
    existing keys; the pool is unfrozen so the new task can train.
    """
    if task_index != pool.tasks_seen:
        raise ContractError(
            f"tasks must expand in order: expected {pool.tasks_seen}, got {task_index}"
        )
    d = pool.feature_dim
    total_after = (pool.tasks_seen + 1) * pool.quota
    if total_after > d:
        raise ContractError(f"cannot orthogonalise {total_after} keys in {d} dims")

    keys = [k for k in pool.keys.data]
    new_keys = []
    for _ in range(pool.quota):
        v = pool.rng.normal(size=d)
        for u in keys:
            v = v - (v @ u) * u / (u @ u)
        v = v / np.linalg.norm(v)
        keys.append(v)
        new_keys.append(v)
    new_attn = pool.rng.normal(0.0, d**-0.5, size=(pool.quota, d))

    pool.keys = Tensor(np.vstack([pool.keys.data, np.array(new_keys)]), is_param=True)
    pool.attn_vecs = Tensor(np.vstack([pool.attn_vecs.data, new_attn]), is_param=True)
    for key in pool.prompts:
        fresh = pool.rng.normal(0.0, 0.1, size=(pool.quota, pool.prefix_len * d))
        pool.prompts[key] = Tensor(np.vstack([pool.prompts[key].data, fresh]), is_param=True)
    pool.tasks_seen += 1
    pool.frozen = False
    pool._set_trainable()
    return pool


def set_frozen(pool: PromptPool, frozen: bool) -> None:
    """Freeze or unfreeze every pool parameter (bit-exact while frozen)."""
    pool.frozen = bool(frozen)
    pool._set_trainable()


def compose(z_q, pool: PromptPool) -> PromptPrefix:
    """Weight every component by cos(z_q ⊙ attention_vector, key) and sum.

    ``z_q`` is a (B, D) query feature treated as a constant; the result is
    differentiable in all component parameters.  Zero-norm keys or gated
    queries contribute weight 0.
    """
    if pool.num_components == 0:
        raise ContractError("compose needs a nonempty pool")
    zq = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q, dtype=np.float64)
    if zq.ndim == 1:
        zq = zq[None, :]
    if zq.ndim != 2 or zq.shape[1] != pool.feature_dim:
        raise ContractError(f"z_q must be (B, {pool.feature_dim})")
    zq_t = Tensor(zq)

    cosines = []
    for m in range(pool.num_components):
        gated = T.mul_rowvec(zq_t, T.take_row(pool.attn_vecs, m))
        cosines.append(T.cosine_rows(gated, T.take_row(pool.keys, m)))
    alpha = T.stack_cols(cosines)

    bsz = zq.shape[0]
    layers = {}
    for layer in pool.injected_layers:
        k = T.reshape(T.matmul(alpha, pool.prompts[(layer, "k")]),
                      (bsz, pool.prefix_len, pool.feature_dim))
        v = T.reshape(T.matmul(alpha, pool.prompts[(layer, "v")]),
                      (bsz, pool.prefix_len, pool.feature_dim))
        layers[layer] = (k, v)
    return PromptPrefix(layers=layers, weights=alpha.data.copy())
