"""Two-phase per-task optimisation.

Phase 1 (epochs 1..floor(lambda*E)) trains prompt pool and classifier
jointly on sparse inputs sampled per mini-batch; phase 2 freezes the pool
and fine-tunes only the classifier on full inputs, with composed (frozen)
prompts still injected.  One cosine learning-rate schedule spans both phases
so the total rate budget does not depend on the split.

The frozen query encoder is deterministic on fixed task data, so its
embeddings, features and traces are computed once per task and looked up per
batch; patch indices are still drawn fresh for every mini-batch.

Every step logs loss, learning rate, the tape's retained-element peak and
the multiply-accumulate count (backward counted as twice the forward MACs of
the nodes it visits).  A non-finite loss aborts the run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

import cpsp.tensor as T
from cpsp.prompts import PromptPool, compose, set_frozen
from cpsp.sampling import (
    DOMAIN_SAMPLER,
    DOMAIN_SHUFFLE,
    CpsConfig,
    assemble_sparse,
    critical_scores,
    sample_without_replacement,
    stream_rng,
    to_distribution,
    top_k,
    uniform_sample,
)
from cpsp.tensor import ContractError, MacMeter, NonFiniteError, Tape, Tensor, backward
from cpsp.vit import AttentionTrace, TokenSequence, VisionTransformer

__all__ = [
    "AdamState",
    "PhasePlan",
    "RunAbortError",
    "RunTrace",
    "adam_step",
    "cosine_lr",
    "plan_phases",
    "train_task",
    "train_task_naive",
]

SAMPLING_METHODS = ("cps", "pd", "topk")
PROMPT_METHODS = SAMPLING_METHODS + ("full",)


class RunAbortError(RuntimeError):
    """Training hit a non-finite loss or failed a run-level contract."""


@dataclass(frozen=True)
class PhasePlan:
    """Epoch budget split: prompt_epochs = floor(phase_ratio * total)."""

    total_epochs: int
    phase_ratio: float
    prompt_epochs: int

    @property
    def classifier_epochs(self) -> int:
        return self.total_epochs - self.prompt_epochs


def plan_phases(total_epochs: int, phase_ratio: float) -> PhasePlan:
    if total_epochs < 1:
        raise ContractError("total_epochs must be >= 1")
    if not 0.0 <= phase_ratio <= 1.0:
        raise ContractError("phase_ratio must lie in [0, 1]")
    return PhasePlan(total_epochs, phase_ratio, math.floor(phase_ratio * total_epochs))


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamState:
    """First/second moment buffers plus a shared step counter."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.steps = 0


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """Bias-corrected Adam update, in place, for the named parameters."""
    state.steps += 1
    t = state.steps
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if name not in state.m:
            raise ContractError(f"parameter {name!r} unknown to this optimizer state")
        g = grads[name]
        if g.shape != p.data.shape:
            raise T.DimensionError(f"gradient shape mismatch for {name!r}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class RunTrace:
    """Per-step log of a run plus sampled-index records and op sequences.

    Serialised as JSON lines; step rows carry exactly
    {task, phase, epoch, batch, loss, lr, live_elements_peak, macs} and
    index rows carry {batch_id, indices}.
    """

    STEP_KEYS = ("task", "phase", "epoch", "batch", "loss", "lr",
                 "live_elements_peak", "macs")

    def __init__(self):
        self.rows = []
        self.index_rows = []
        self.op_sequences = {}

    def log_step(self, **kw):
        if kw["loss"] is not None and not math.isfinite(kw["loss"]):
            raise RunAbortError(f"non-finite loss logged: {kw}")
        self.rows.append({k: kw[k] for k in self.STEP_KEYS})

    def log_indices(self, batch_id: str, indices) -> None:
        self.index_rows.append({"batch_id": batch_id, "indices": np.asarray(indices).tolist()})

    def record_ops(self, task: int, phase: int, ops) -> None:
        self.op_sequences.setdefault((task, phase), list(ops))

    def select(self, **match):
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def peak_live(self, **match) -> int:
        rows = self.select(**match)
        return max((r["live_elements_peak"] for r in rows), default=0)

    def total_macs(self, **match) -> int:
        return sum(r["macs"] for r in self.select(**match))

    def mean_loss(self, **match) -> float:
        rows = self.select(**match)
        return float(np.mean([r["loss"] for r in rows])) if rows else float("nan")

    def to_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")
            for row in self.index_rows:
                fh.write(json.dumps(row) + "\n")

    @staticmethod
    def read_jsonl(path: str) -> "RunTrace":
        trace = RunTrace()
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                if "batch_id" in row:
                    trace.index_rows.append(row)
                else:
                    trace.rows.append(row)
        return trace


def _unpack(task_data):
    if hasattr(task_data, "patches"):
        return np.asarray(task_data.patches), np.asarray(task_data.labels)
    patches, labels = task_data
    return np.asarray(patches), np.asarray(labels)


def _encode_dataset(model: VisionTransformer, patches: np.ndarray, chunk=64):
    """One frozen pass over the data: embeddings, query features, trace."""
    n = patches.shape[0]
    cfg = model.config
    emb = np.empty((n, cfg.num_patches + 1, cfg.feature_dim))
    zq = np.empty((n, cfg.feature_dim))
    att = np.empty((n, cfg.num_patches))
    vno = np.empty((n, cfg.num_patches))
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        seq = model.embed(patches[sl])
        emb[sl] = seq.embeddings.data
        z, trace = model.query_forward(seq)
        zq[sl] = z
        att[sl] = trace.cls_to_patch
        vno[sl] = trace.value_norms
    return emb, zq, att, vno


def _compose_frozen(pool: PromptPool, zq: np.ndarray, chunk=256):
    """Prefix rows for every sample under a frozen pool (cached for phase 2)."""
    n = zq.shape[0]
    cache = None
    with T.no_grad():
        for lo in range(0, n, chunk):
            prefix = compose(zq[lo : lo + chunk], pool)
            if cache is None:
                cache = {
                    layer: (
                        np.empty((n,) + k.shape[1:]),
                        np.empty((n,) + v.shape[1:]),
                    )
                    for layer, (k, v) in prefix.layers.items()
                }
            for layer, (k, v) in prefix.layers.items():
                cache[layer][0][lo : lo + chunk] = k.data
                cache[layer][1][lo : lo + chunk] = v.data
    return cache


def _select_indices(method, att, vno, temperature, k, num_patches, rng):
    """The one step the sampling methods differ on: (B, k) patch positions."""
    if method == "pd":
        return uniform_sample(num_patches, k, rng, num=att.shape[0])
    dist = to_distribution(critical_scores(AttentionTrace(att, vno)), temperature)
    if method == "cps":
        return sample_without_replacement(dist, k, rng)
    return top_k(dist, k)


def train_task(
    task_data,
    model: VisionTransformer,
    pool: PromptPool,
    cps_config: CpsConfig,
    plan: PhasePlan,
    seed: int,
    *,
    method: str = "cps",
    class_ids=None,
    batch_size: int = 16,
    base_lr: float = 1e-3,
    task_index: int = 0,
    trace: RunTrace | None = None,
    log_indices: bool = False,
) -> RunTrace:
    """Run both phases of one task and return the (extended) trace."""
    if method not in PROMPT_METHODS:
        raise ContractError(f"unknown method {method!r}")
    patches, labels = _unpack(task_data)
    if labels.size == 0:
        raise ContractError("empty task")
    if any(p.requires_grad for p in model.params.values()):
        raise ContractError("backbone must be frozen for prompt training")

    cfg = model.config
    num_patches = cfg.num_patches
    class_ids = np.asarray(class_ids if class_ids is not None else np.unique(labels))
    local = {c: i for i, c in enumerate(class_ids.tolist())}
    local_labels = np.array([local[int(y)] for y in labels], dtype=np.int64)
    k = num_patches if method == "full" else cps_config.budget(num_patches)

    trace = trace if trace is not None else RunTrace()
    try:
        emb_all, zq_all, att_all, vno_all = _encode_dataset(model, patches)
    except NonFiniteError as exc:
        raise RunAbortError(f"task {task_index}: query encoding failed: {exc}") from exc

    n = labels.size
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = plan.total_epochs * steps_per_epoch
    params = {**pool.parameters(), **model.head_parameters()}
    state = AdamState(params)
    natural = np.arange(1, num_patches + 2, dtype=np.int64)
    prefix_cache = None
    step = 0

    for epoch in range(1, plan.total_epochs + 1):
        phase = 1 if epoch <= plan.prompt_epochs else 2
        if phase == 2 and prefix_cache is None:
            set_frozen(pool, True)
            prefix_cache = _compose_frozen(pool, zq_all)
        order = stream_rng(seed, DOMAIN_SHUFFLE, task_index, epoch).permutation(n)
        for b in range(steps_per_epoch):
            sel = order[b * batch_size : (b + 1) * batch_size]
            lr = cosine_lr(step, total_steps, base_lr)
            try:
                if phase == 1:
                    loss, peak, macs, ops = _prompt_phase_step(
                        model, pool, method, cps_config, k, emb_all, zq_all,
                        att_all, vno_all, local_labels, class_ids, sel, natural,
                        seed, task_index, epoch, b, lr, params, state, trace,
                        log_indices,
                    )
                else:
                    loss, peak, macs, ops = _classifier_phase_step(
                        model, emb_all, prefix_cache, local_labels, class_ids,
                        sel, natural, lr, params, state,
                    )
            except NonFiniteError as exc:
                raise RunAbortError(
                    f"non-finite loss: task {task_index} epoch {epoch} batch {b}: {exc}"
                ) from exc
            trace.record_ops(task_index, phase, ops)
            trace.log_step(task=task_index, phase=phase, epoch=epoch, batch=b,
                           loss=loss, lr=lr, live_elements_peak=peak, macs=macs)
            step += 1
    return trace


def _apply_grads(pool, params, state, lr):
    if pool is not None:
        pool.mask_previous_gradients()
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    adam_step(state, {n: params[n] for n in grads}, grads, lr)
    for p in params.values():
        p.zero_grad()
    return ["adam_step"]


def _prompt_phase_step(model, pool, method, cps_config, k, emb_all, zq_all,
                       att_all, vno_all, local_labels, class_ids, sel, natural,
                       seed, task_index, epoch, b, lr, params, state, trace,
                       log_indices):
    ops = ["query_forward"]
    seq = TokenSequence(Tensor(emb_all[sel]), natural)
    if method == "full":
        sparse = seq
    else:
        rng = stream_rng(seed, DOMAIN_SAMPLER, task_index, epoch, b)
        pos = _select_indices(method, att_all[sel], vno_all[sel],
                              cps_config.temperature, k, model.config.num_patches, rng)
        ops.append(f"select_indices:{method}")
        if log_indices:
            trace.log_indices(f"{task_index}.{epoch}.{b}", pos)
        sparse = assemble_sparse(seq, pos + 1)
        ops.append("assemble_sparse")

    with MacMeter() as meter, Tape() as tape:
        prefix = compose(zq_all[sel], pool)
        logits = model.prompt_forward(sparse, prefix, trainable={"prompt", "classifier"})
        loss = T.cross_entropy(T.take_cols(logits, class_ids), local_labels[sel])
        peak = tape.live_elements
        backward(loss)
    ops += ["compose", "prompt_forward", "cross_entropy", "backward"]
    ops += _apply_grads(pool, params, state, lr)
    return float(loss.data), peak, meter.total, ops


def _classifier_phase_step(model, emb_all, prefix_cache, local_labels, class_ids,
                           sel, natural, lr, params, state):
    ops = ["query_forward", "compose(frozen,cached)"]
    seq = TokenSequence(Tensor(emb_all[sel]), natural)
    layers = {
        layer: (Tensor(kc[sel]), Tensor(vc[sel]))
        for layer, (kc, vc) in prefix_cache.items()
    }
    with MacMeter() as meter:
        with T.no_grad():
            feat = model.forward_features(seq, layers)
        with Tape() as tape:
            logits = T.add_rowvec(T.matmul(Tensor(feat.data), model.head_w), model.head_b)
            loss = T.cross_entropy(T.take_cols(logits, class_ids), local_labels[sel])
            peak = tape.live_elements
            backward(loss)
    ops += ["prompt_forward(full,no-prompt-grad)", "cross_entropy", "backward"]
    ops += _apply_grads(None, params, state, lr)
    return float(loss.data), peak, meter.total, ops


def train_task_naive(
    task_data,
    model: VisionTransformer,
    epochs: int,
    seed: int,
    *,
    class_ids=None,
    batch_size: int = 16,
    base_lr: float = 1e-3,
    task_index: int = 0,
    trace: RunTrace | None = None,
) -> RunTrace:
    """Naive fine-tuning baseline: every backbone and head parameter trains
    on full sequences, no prompts, no query pass."""
    patches, labels = _unpack(task_data)
    if labels.size == 0:
        raise ContractError("empty task")
    model.set_backbone_trainable(True)
    class_ids = np.asarray(class_ids if class_ids is not None else np.unique(labels))
    local = {c: i for i, c in enumerate(class_ids.tolist())}
    local_labels = np.array([local[int(y)] for y in labels], dtype=np.int64)

    trace = trace if trace is not None else RunTrace()
    n = labels.size
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = epochs * steps_per_epoch
    params = {**model.backbone_parameters(), **model.head_parameters()}
    state = AdamState(params)
    step = 0
    for epoch in range(1, epochs + 1):
        order = stream_rng(seed, DOMAIN_SHUFFLE, task_index, epoch).permutation(n)
        for b in range(steps_per_epoch):
            sel = order[b * batch_size : (b + 1) * batch_size]
            lr = cosine_lr(step, total_steps, base_lr)
            try:
                with MacMeter() as meter, Tape() as tape:
                    seq = model.embed(patches[sel])
                    feat = model.forward_features(seq)
                    logits = T.add_rowvec(T.matmul(feat, model.head_w), model.head_b)
                    loss = T.cross_entropy(T.take_cols(logits, class_ids), local_labels[sel])
                    peak = tape.live_elements
                    backward(loss)
            except NonFiniteError as exc:
                raise RunAbortError(
                    f"non-finite loss: task {task_index} epoch {epoch} batch {b}: {exc}"
                ) from exc
            _apply_grads(None, params, state, lr)
            trace.record_ops(task_index, 1, ["embed", "forward", "cross_entropy",
                                             "backward", "adam_step"])
            trace.log_step(task=task_index, phase=1, epoch=epoch, batch=b,
                           loss=float(loss.data), lr=lr,
                           live_elements_peak=peak, macs=meter.total)
            step += 1
    return trace
