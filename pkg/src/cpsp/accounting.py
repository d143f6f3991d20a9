"""Closed-form activation census and multiply-accumulate accounting.

``predict_activations`` reproduces, from configuration alone, the exact
number of float elements the tape retains after one forward pass of the
training step for a given trainable set.  It is written term-by-term against
the retention policy in :mod:`cpsp.tensor` and the forward structure in
:mod:`cpsp.vit` / :mod:`cpsp.training`; the test suite holds the two routes
(static formula vs. live tape census) bit-equal.  Elements, not bytes: a
bytes view is elements * 8 at 64-bit precision.

Trainable sets and what they cover:

* ``{"prompt", "classifier"}`` — the sparse prompt-training step: prompt
  composition, the prompted backbone pass from the first injected block on,
  the head and the loss.
* ``{"classifier"}`` — the full-input classifier step: the backbone runs
  gradient-free, so only the head input and loss probabilities persist.
* ``{"backbone", "classifier"}`` — naive fine-tuning: everything from the
  patch projection up is retained.
* the empty set — a pure inference pass retains nothing.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from cpsp.tensor import ContractError, MacMeter
from cpsp.vit import BackboneConfig

__all__ = ["ResourceReport", "count_macs", "predict_activations", "wall_clock"]

_VALID_SETS = (
    frozenset(),
    frozenset({"classifier"}),
    frozenset({"prompt", "classifier"}),
    frozenset({"backbone", "classifier"}),
)


def _attention_quadratic(n_tokens: int, num_heads: int, n_keys: int) -> int:
    """Retained attention probabilities for one block: H * n * n_k."""
    return num_heads * n_tokens * n_keys


def _block_elements(n: int, config: BackboneConfig, prefix: int, with_ln1: bool) -> int:
    """Retained elements of one transformer block at n tokens.

    ln1 (when taped): x_hat + inv_std            -> n*D + n
    attention: input, q, ctx                     -> 3 * n*D
               k, v with prefix rows             -> 2 * (n+P)*D
               probabilities                     -> H * n * (n+P)
    ln2: x_hat + inv_std                         -> n*D + n
    mlp: fc1 input n*D; gelu input + tanh factor
         and fc2 input at mlp_dim                -> n*D + 3 * n*M
    """
    d, m, h = config.feature_dim, config.mlp_dim, config.num_heads
    n_k = n + prefix
    total = 3 * n * d + 2 * n_k * d + _attention_quadratic(n, h, n_k)
    total += n * d + n  # ln2
    total += n * d + 3 * n * m  # mlp
    if with_ln1:
        total += n * d + n
    return total


def _compose_elements(num_components: int, feature_dim: int, batch: int) -> int:
    """Retained elements of prompt composition for a batch.

    query feature (shared across components)      -> B*D
    per component: gated copy of the attention
    vector and the key row (2*D), the gated query
    (B*D), its row norms, the key norm and the
    cosine output (2*B + 1)                       -> m*(2D + B*D + 2B + 1)
    stacked weights                               -> B*m
    """
    m, d = num_components, feature_dim
    return batch * d + m * (2 * d + batch * d + 2 * batch + 1) + batch * m


def predict_activations(
    n_tokens: int,
    config: BackboneConfig,
    trainable,
    *,
    batch_size: int = 1,
    num_classes: int = 1,
    prefix_len: int = 0,
    num_components: int = 0,
) -> int:
    """Exact retained-element count after one training-step forward.

    ``n_tokens`` counts the class token; ``num_classes`` is the width of the
    cross-entropy (the classes the loss actually ranges over).
    """
    if n_tokens < 1:
        raise ContractError("n_tokens must be >= 1")
    trainable = frozenset(trainable)
    if trainable not in _VALID_SETS:
        raise ContractError(f"unsupported trainable set {sorted(trainable)}")
    b, d = batch_size, config.feature_dim
    n = n_tokens

    if not trainable:
        return 0
    if trainable == frozenset({"classifier"}):
        # taped head matmul input + loss probabilities
        return b * d + b * num_classes

    total = 0
    if trainable == frozenset({"backbone", "classifier"}):
        total += b * (n - 1) * config.input_patch_dim  # patch projection input
        first_taped = 0
        prefix_of = {i: 0 for i in range(config.num_layers)}
    else:
        if prefix_len < 1 or num_components < 1:
            raise ContractError("prompt mode needs prefix_len and num_components >= 1")
        total += _compose_elements(num_components, d, b)
        first_taped = min(config.prompt_layers)
        prefix_of = {
            i: (prefix_len if i in config.prompt_layers else 0)
            for i in range(config.num_layers)
        }

    for i in range(first_taped, config.num_layers):
        total += b * _block_elements(n, config, prefix_of[i], with_ln1=(i > first_taped))
    if trainable == frozenset({"backbone", "classifier"}):
        # ln1 of the first block is taped too: embeddings carry gradients
        total += b * (n * d + n)

    total += b * d + b  # final layer norm on the class token
    total += b * d  # head matmul input
    total += b * num_classes  # loss probabilities
    return total


def count_macs(meter: MacMeter) -> int:
    """Total multiply-accumulates recorded by a meter (forward + backward)."""
    return meter.total


def wall_clock() -> float:
    return time.perf_counter()


@dataclass
class ResourceReport:
    """Per-run resource summary; the census must equal the prediction."""

    peak_live_elements: int
    predicted_peak: int
    total_macs: int
    wall_time_s: float
    per_phase: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.peak_live_elements != self.predicted_peak:
            raise ContractError(
                f"census {self.peak_live_elements} != predicted {self.predicted_peak}"
            )
        if self.peak_live_elements < 0 or self.total_macs < 0:
            raise ContractError("counts must be nonnegative")

    @property
    def peak_bytes(self) -> int:
        return self.peak_live_elements * 8

    def to_json(self) -> str:
        return json.dumps(
            {
                "peak_live_elements": self.peak_live_elements,
                "predicted_peak": self.predicted_peak,
                "peak_bytes_f64": self.peak_bytes,
                "total_macs": self.total_macs,
                "wall_time_s": self.wall_time_s,
                "per_phase": self.per_phase,
            }
        )
