"""How patch selection works: attention-times-value-norm scores, the
temperature softmax, and without-replacement sampling vs. its baselines.

Run with:  python demos/02_patch_scoring_and_sampling.py
"""

import numpy as np

from cpsp.sampling import (
    CriticalDistribution,
    critical_scores,
    patch_budget,
    sample_without_replacement,
    stream_rng,
    to_distribution,
    top_k,
    uniform_sample,
)
from cpsp.vit import AttentionTrace

print("=== 1. scores: attention relevance x feature strength ===")
attention = np.array([[0.75, 0.10, 0.10, 0.05]])
value_norms = np.array([[2.0, 4.0, 1.0, 1.0]])
scores = critical_scores(AttentionTrace(attention, value_norms))
print(f"attention   = {attention[0]}")
print(f"value norms = {value_norms[0]}")
print(f"scores      = {scores[0]}   (elementwise product)")

print("\n=== 2. temperature controls sharpness ===")
for tau in (1.0, 0.3, 0.05):
    dist = to_distribution(scores, tau)
    print(f"tau={tau:4.2f} -> p = {np.round(dist.probs[0], 4)}")

print("\n=== 3. sampling without replacement follows the renormalised law ===")
p = np.array([0.6, 0.3, 0.1])
draws = 200_000
stacked = CriticalDistribution(scores=np.tile(p, (draws, 1)),
                               probs=np.tile(p, (draws, 1)))
pairs = sample_without_replacement(stacked, 2, stream_rng(7, 0, 0))
print("ordered pair frequencies vs the exact law p_i * p_j / (1 - p_i):")
for i in range(1, 4):
    for j in range(1, 4):
        if i == j:
            continue
        law = p[i - 1] * p[j - 1] / (1 - p[i - 1])
        freq = np.mean((pairs[:, 0] == i) & (pairs[:, 1] == j))
        print(f"  ({i},{j}): observed {freq:.4f}   exact {law:.4f}")

print("\n=== 4. the three selectors at the same budget ===")
n_patches, r = 16, 0.5
k = patch_budget(n_patches, r)
rng = stream_rng(42, 0, 1)
score_row = np.abs(rng.normal(size=(1, n_patches))) * np.linspace(2, 0.2, n_patches)
dist = to_distribution(score_row, 0.1)
print(f"budget: keep k = floor((1-r)*N) = {k} of {n_patches} patches")
print(f"stochastic:    {np.sort(sample_without_replacement(dist, k, rng)[0])}")
print(f"deterministic: {np.sort(top_k(dist, k)[0])}")
print(f"uniform drop:  {np.sort(uniform_sample(n_patches, k, rng))}")
print("(positions are 1-based; the class token is never dropped)")
