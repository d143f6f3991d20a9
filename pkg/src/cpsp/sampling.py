"""Attention-guided patch sampling and its baselines.

Patch positions are 1-based throughout (1..N); a token's original sequence
index is position + 1 because the class token owns index 1.  All functions
accept stacked inputs: distributions may be (N,) or (B, N) and index sets
come back with matching leading shape.

Sampling without replacement follows the successive-renormalisation law
(draw from p, remove, renormalise, repeat), realised by perturbing the score
logits with Gumbel noise and taking the top k — the two procedures induce
the same distribution over ordered draws, and the logit form stays exact at
temperatures far below float underflow of the probabilities themselves.

Randomness is derived from named streams: ``stream_rng(seed, domain, *path)``
wraps ``np.random.SeedSequence(seed, spawn_key=(domain, *path))``.  Domains:
0 = patch sampling (task, epoch, batch), 1 = batch shuffling (task, epoch),
2 = parameter init (consumer-specific path), 3 = dataset generation.
Distinct paths give independent streams; replaying a path replays its draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from cpsp.tensor import ContractError, Tensor
from cpsp.vit import AttentionTrace, TokenSequence

__all__ = [
    "CpsConfig",
    "CriticalDistribution",
    "DOMAIN_DATA",
    "DOMAIN_INIT",
    "DOMAIN_SAMPLER",
    "DOMAIN_SHUFFLE",
    "assemble_sparse",
    "critical_scores",
    "patch_budget",
    "sample_without_replacement",
    "stream_rng",
    "to_distribution",
    "top_k",
    "uniform_sample",
]

DOMAIN_SAMPLER = 0
DOMAIN_SHUFFLE = 1
DOMAIN_INIT = 2
DOMAIN_DATA = 3


def stream_rng(seed: int, domain: int, *path: int) -> np.random.Generator:
    """Named independent stream: root seed -> (domain, path...)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(domain, *path)))


@dataclass(frozen=True)
class CpsConfig:
    """Sampling hyperparameters: softmax temperature, patch reduction, seed."""

    temperature: float = 0.1
    reduction_ratio: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be > 0")
        if not 0.0 <= self.reduction_ratio < 1.0:
            raise ContractError("reduction_ratio must lie in [0, 1)")

    def budget(self, num_patches: int) -> int:
        return patch_budget(num_patches, self.reduction_ratio)


def patch_budget(num_patches: int, reduction_ratio: float) -> int:
    """Number of kept patches: floor((1 - r) * N).  Rejects budgets below 1."""
    if not 0.0 <= reduction_ratio < 1.0:
        raise ContractError("reduction_ratio must lie in [0, 1)")
    k = math.floor((1.0 - reduction_ratio) * num_patches)
    if k < 1:
        raise ContractError(
            f"reduction_ratio {reduction_ratio} leaves no patches of {num_patches}"
        )
    return k


@dataclass
class CriticalDistribution:
    """Scores and the sampling distribution they induce.

    ``log_weights`` are the softmax logits (scores / temperature, shifted);
    they are what the Gumbel draws perturb, so extreme temperatures never
    underflow.  Distributions built straight from probabilities get
    ``log(p)`` with zero-probability entries at -inf.
    """

    scores: np.ndarray
    probs: np.ndarray
    log_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != self.scores.shape:
            raise ContractError("scores/probs shapes disagree")
        if (self.probs < 0).any():
            raise ContractError("probabilities must be nonnegative")
        if not np.allclose(self.probs.sum(axis=-1), 1.0, atol=1e-12):
            raise ContractError("probabilities must sum to 1")
        if self.log_weights is None:
            with np.errstate(divide="ignore"):
                self.log_weights = np.log(self.probs)

    @classmethod
    def from_probs(cls, probs) -> "CriticalDistribution":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(scores=probs.copy(), probs=probs)

    @property
    def num_patches(self) -> int:
        return self.probs.shape[-1]


def critical_scores(trace: AttentionTrace) -> np.ndarray:
    """Per-patch score: head-summed class attention times value norm."""
    return trace.cls_to_patch * trace.value_norms


def to_distribution(scores, temperature: float) -> CriticalDistribution:
    """Temperature softmax over scores, computed with max subtraction."""
    if not temperature > 0:
        raise ContractError("temperature must be > 0")
    scores = np.asarray(scores, dtype=np.float64)
    logits = scores / temperature
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    return CriticalDistribution(scores=scores, probs=probs, log_weights=shifted)


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside [1, {n}]")


def sample_without_replacement(dist: CriticalDistribution, k: int, rng) -> np.ndarray:
    """Draw k distinct patch positions by successive renormalised draws.

    Gumbel-perturbed logits sorted descending realise exactly that law; the
    first returned position is marginally distributed as p.  Zero-probability
    positions are chosen only once the support is exhausted.
    """
    _check_k(k, dist.num_patches)
    gumbel = rng.gumbel(size=dist.log_weights.shape)
    keys = dist.log_weights + gumbel
    order = np.argsort(-keys, axis=-1, kind="stable")
    return order[..., :k] + 1


def top_k(dist: CriticalDistribution, k: int) -> np.ndarray:
    """The k most probable positions, ties broken toward lower positions."""
    _check_k(k, dist.num_patches)
    order = np.argsort(-dist.probs, axis=-1, kind="stable")
    return order[..., :k] + 1


def uniform_sample(num_patches: int, k: int, rng, num: int | None = None) -> np.ndarray:
    """Uniform without replacement; the random-drop baseline."""
    _check_k(k, num_patches)
    if num is None:
        return rng.permutation(num_patches)[:k] + 1
    return np.stack([rng.permutation(num_patches)[:k] for _ in range(num)]) + 1


def assemble_sparse(seq: TokenSequence, indices) -> TokenSequence:
    """Class token first, then the selected patches with their original
    sequence indices (positional information already embedded).

    ``indices`` are original token indices (2..N+1), one row per sample or a
    single shared row; the input sequence must hold its patches in natural
    order.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.tile(idx, (seq.batch_size, 1))
    if idx.shape[0] != seq.batch_size:
        raise ContractError("index rows do not match the batch")
    n_patches = seq.length - 1
    if idx.size and (idx.min() < 2 or idx.max() > n_patches + 1):
        raise ContractError(f"orig indices must lie in [2, {n_patches + 1}]")
    for row in idx:
        if len(np.unique(row)) != row.size:
            raise ContractError("duplicate patch index")
    expected = np.arange(1, n_patches + 2)
    if not (seq.orig_indices == expected).all():
        raise ContractError("assemble_sparse expects a full sequence in natural order")

    emb = seq.embeddings.data
    cols = idx - 1  # orig index -> column (class token occupies column 0)
    gathered = np.take_along_axis(emb, cols[:, :, None], axis=1)
    out = np.concatenate([emb[:, :1], gathered], axis=1)
    orig = np.concatenate([np.ones((idx.shape[0], 1), dtype=np.int64), idx], axis=1)
    return TokenSequence(Tensor(np.ascontiguousarray(out)), orig)
