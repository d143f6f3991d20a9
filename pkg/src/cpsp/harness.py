"""Class-incremental protocol on a synthetic planted-signature stream.

Every class owns a fixed set of patch positions (its signature) carrying a
fixed template plus small noise; everything else is low-amplitude background.
That gives a ground truth for which patches matter, so attention-guided
sampling can be scored by how often it hits the signature, while accuracy
and forgetting follow the usual class-incremental bookkeeping: train tasks in
order, evaluate after each task on every earlier test set with full token
sequences, never revisit training data.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

import cpsp.tensor as T
from cpsp.accounting import ResourceReport, predict_activations, wall_clock
from cpsp.prompts import PromptPool, compose, expand_for_task
from cpsp.sampling import (
    DOMAIN_DATA,
    DOMAIN_INIT,
    CpsConfig,
    patch_budget,
    stream_rng,
)
from cpsp.tensor import ContractError, Tensor
from cpsp.training import (
    AdamState,
    RunAbortError,
    RunTrace,
    adam_step,
    cosine_lr,
    plan_phases,
    train_task,
    train_task_naive,
)
from cpsp.vit import (
    BackboneConfig,
    TokenSequence,
    VisionTransformer,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "AccuracyMatrix",
    "Hyper",
    "LabeledSet",
    "RunResult",
    "Stream",
    "SyntheticSpec",
    "acc_metric",
    "evaluate",
    "fgt_metric",
    "generate_stream",
    "hit_rate",
    "joint_upper_bound",
    "load_stream",
    "pretrain_backbone",
    "run_sequence",
    "save_stream",
]

METHODS = ("cps", "pd", "topk", "full", "sgd_naive")


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry, noise levels and sizes of the synthetic stream."""

    grid_side: int = 8
    patch_dim: int = 16
    classes_per_task: int = 4
    num_tasks: int = 5
    signature_size: int = 8
    signal_noise: float = 0.05
    background_noise: float = 0.1
    train_per_class: int = 100
    test_per_class: int = 50
    pretrain_classes: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.signature_size > self.grid_side**2:
            raise ContractError("signature larger than the patch grid")
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise ContractError("need at least one task and one class per task")

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def task_class_count(self) -> int:
        return self.num_tasks * self.classes_per_task


@dataclass(frozen=True)
class Hyper:
    """Training hyperparameters shared by every method.

    By default earlier tasks' prompt components keep training end to end;
    ``freeze_previous_components`` pins them after their own task instead,
    trading plasticity for stability.
    """

    reduction_ratio: float = 0.4
    temperature: float = 0.1
    phase_ratio: float = 0.4
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = 1e-3
    prefix_len: int = 8
    quota: int = 2
    seed: int = 0
    freeze_previous_components: bool = False


@dataclass
class LabeledSet:
    patches: np.ndarray  # (n, N, patch_dim)
    labels: np.ndarray  # (n,) global class ids

    def __len__(self):
        return self.labels.size


@dataclass
class Stream:
    spec: SyntheticSpec
    pretrain: LabeledSet
    tasks: list
    tests: list
    signatures: dict  # class id -> 1-based patch positions (signature_size,)
    task_classes: list  # per task, ndarray of global class ids


def _class_samples(spec, cls, positions, templates, count, split_tag):
    rng = stream_rng(spec.seed, DOMAIN_DATA, 1, cls, split_tag)
    n_patch = spec.num_patches
    x = rng.normal(0.0, spec.background_noise, size=(count, n_patch, spec.patch_dim))
    noise = rng.normal(0.0, spec.signal_noise,
                       size=(count, spec.signature_size, spec.patch_dim))
    x[:, positions - 1] += templates[None, :, :] + noise
    return x


def generate_stream(spec: SyntheticSpec) -> Stream:
    """Deterministic synthetic stream: pretraining classes plus disjoint tasks."""
    total = spec.pretrain_classes + spec.task_class_count
    signatures, templates = {}, {}
    for cls in range(total):
        rng = stream_rng(spec.seed, DOMAIN_DATA, 0, cls)
        signatures[cls] = np.sort(rng.permutation(spec.num_patches)[: spec.signature_size]) + 1
        templates[cls] = rng.normal(size=(spec.signature_size, spec.patch_dim))

    def build(classes, count, split_tag):
        xs, ys = [], []
        for cls in classes:
            xs.append(_class_samples(spec, cls, signatures[cls], templates[cls],
                                     count, split_tag))
            ys.append(np.full(count, cls, dtype=np.int64))
        return LabeledSet(np.concatenate(xs), np.concatenate(ys))

    pretrain = build(range(spec.pretrain_classes), spec.train_per_class, 0)
    tasks, tests, task_classes = [], [], []
    for t in range(spec.num_tasks):
        lo = spec.pretrain_classes + t * spec.classes_per_task
        classes = np.arange(lo, lo + spec.classes_per_task)
        task_classes.append(classes)
        tasks.append(build(classes, spec.train_per_class, 0))
        tests.append(build(classes, spec.test_per_class, 1))
    return Stream(spec, pretrain, tasks, tests, signatures, task_classes)


# ---------------------------------------------------------------------------
# dataset persistence: manifest JSON + raw little-endian binaries
# ---------------------------------------------------------------------------


def save_stream(stem: str, stream: Stream) -> None:
    entries = []
    offset = 0
    label_chunks, patch_chunks = [], []
    label_offset = 0

    def add(name, ls):
        nonlocal offset, label_offset
        arr = np.ascontiguousarray(ls.patches, dtype="<f8")
        lab = np.ascontiguousarray(ls.labels, dtype="<i8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "label_offset": label_offset})
        patch_chunks.append(arr.tobytes())
        label_chunks.append(lab.tobytes())
        offset += arr.size
        label_offset += lab.size

    add("pretrain", stream.pretrain)
    for t, ls in enumerate(stream.tasks):
        add(f"task.{t}", ls)
    for t, ls in enumerate(stream.tests):
        add(f"test.{t}", ls)
    manifest = {
        "format": "cpsp-stream-1",
        "spec": stream.spec.__dict__,
        "sets": entries,
        "signatures": {str(c): s.tolist() for c, s in stream.signatures.items()},
        "task_classes": [c.tolist() for c in stream.task_classes],
    }
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh)
    with open(stem + ".patches.bin", "wb") as fh:
        fh.write(b"".join(patch_chunks))
    with open(stem + ".labels.bin", "wb") as fh:
        fh.write(b"".join(label_chunks))


def load_stream(stem: str) -> Stream:
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "cpsp-stream-1":
        raise ContractError("unrecognised stream manifest")
    patches = np.fromfile(stem + ".patches.bin", dtype="<f8")
    labels = np.fromfile(stem + ".labels.bin", dtype="<i8")
    sets = {}
    for entry in manifest["sets"]:
        size = int(np.prod(entry["shape"]))
        count = entry["shape"][0]
        sets[entry["name"]] = LabeledSet(
            patches[entry["offset"] : entry["offset"] + size]
            .reshape(entry["shape"]).astype(np.float64),
            labels[entry["label_offset"] : entry["label_offset"] + count].astype(np.int64),
        )
    spec = SyntheticSpec(**manifest["spec"])
    return Stream(
        spec,
        sets["pretrain"],
        [sets[f"task.{t}"] for t in range(spec.num_tasks)],
        [sets[f"test.{t}"] for t in range(spec.num_tasks)],
        {int(c): np.array(v) for c, v in manifest["signatures"].items()},
        [np.array(v) for v in manifest["task_classes"]],
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class AccuracyMatrix:
    """Lower-triangular record: entry (t, i) is accuracy on task i's test set
    after training task t (zero-based)."""

    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def record(self, after_task: int, on_task: int, accuracy: float) -> None:
        if on_task > after_task:
            raise ContractError("upper triangle is undefined")
        if not 0.0 <= accuracy <= 1.0:
            raise ContractError("accuracy outside [0, 1]")
        self.values[after_task, on_task] = accuracy

    def row_complete(self, t: int) -> bool:
        return bool(np.isfinite(self.values[t, : t + 1]).all())

    def occupancy(self) -> int:
        return int(np.isfinite(self.values).sum())


def _values(matrix) -> np.ndarray:
    return matrix.values if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix)


def acc_metric(matrix, num_tasks: int) -> float:
    """Average accuracy over all tasks after the final task."""
    vals = _values(matrix)
    row = vals[num_tasks - 1, :num_tasks]
    if not np.isfinite(row).all():
        raise ContractError(f"row {num_tasks} incomplete")
    return float(row.mean())


def fgt_metric(matrix, num_tasks: int):
    """Mean drop from each task's best historical accuracy to its final one.

    Undefined for a single task (returns None); negative values indicate
    backward transfer.
    """
    if num_tasks < 2:
        return None
    vals = _values(matrix)
    drops = []
    for i in range(num_tasks - 1):
        history = vals[i : num_tasks - 1, i]
        if not (np.isfinite(history).all() and np.isfinite(vals[num_tasks - 1, i])):
            raise ContractError("matrix incomplete for forgetting")
        drops.append(history.max() - vals[num_tasks - 1, i])
    return float(np.mean(drops))


def hit_rate(sampled_indices, signature) -> float:
    """|sampled ∩ signature| / min(k, signature size), in 1-based positions."""
    sampled = np.asarray(sampled_indices).ravel()
    sig = np.asarray(signature).ravel()
    overlap = np.intersect1d(sampled, sig).size
    return overlap / min(sampled.size, sig.size)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain_backbone(
    pretrain_set: LabeledSet,
    config: BackboneConfig,
    *,
    seed: int = 0,
    batch_size: int = 32,
    base_lr: float = 1e-3,
    max_epochs: int = 30,
    target_acc: float = 0.95,
    min_acc: float = 0.60,
    checkpoint_stem: str | None = None,
) -> VisionTransformer:
    """Train backbone plus a temporary head until the training accuracy
    target (or the epoch cap), then freeze and optionally checkpoint.

    The returned model keeps the frozen backbone; the temporary head is the
    caller's to replace.  Aborts if the cap is hit below ``min_acc``.
    """
    classes = np.unique(pretrain_set.labels)
    if classes.size < 2:
        raise ContractError("pretraining needs at least 2 classes")
    model = VisionTransformer(config, classes.size, stream_rng(seed, DOMAIN_INIT, 0))
    local = {c: i for i, c in enumerate(classes.tolist())}
    labels = np.array([local[int(y)] for y in pretrain_set.labels])
    patches = pretrain_set.patches
    n = labels.size
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = max_epochs * steps_per_epoch
    params = {**model.backbone_parameters(), **model.head_parameters()}
    state = AdamState(params)
    step = 0
    acc = 0.0
    for epoch in range(1, max_epochs + 1):
        order = stream_rng(seed, DOMAIN_INIT, 3, epoch).permutation(n)
        hits = 0
        for b in range(steps_per_epoch):
            sel = order[b * batch_size : (b + 1) * batch_size]
            lr = cosine_lr(step, total_steps, base_lr)
            with T.Tape():
                seq = model.embed(patches[sel])
                feat = model.forward_features(seq)
                logits = T.add_rowvec(T.matmul(feat, model.head_w), model.head_b)
                loss = T.cross_entropy(logits, labels[sel])
                T.backward(loss)
            hits += int((np.argmax(logits.data, axis=1) == labels[sel]).sum())
            grads = {nm: p.grad for nm, p in params.items() if p.grad is not None}
            adam_step(state, {nm: params[nm] for nm in grads}, grads, lr)
            for p in params.values():
                p.zero_grad()
            step += 1
        acc = hits / n
        if acc >= target_acc:
            break
    if acc < min_acc:
        raise RunAbortError(
            f"pretraining stalled at train accuracy {acc:.3f} < {min_acc}"
        )
    model.freeze_backbone()
    if checkpoint_stem is not None:
        save_checkpoint(checkpoint_stem, model.backbone_parameters())
    return model


def backbone_from_checkpoint(stem: str, config: BackboneConfig) -> VisionTransformer:
    model = VisionTransformer(config, 2, np.random.default_rng(0))
    model.load_backbone(load_checkpoint(stem))
    model.freeze_backbone()
    return model


# ---------------------------------------------------------------------------
# evaluation (full sequences, pure)
# ---------------------------------------------------------------------------


def evaluate(model, pool, test_set: LabeledSet, seen_classes, *, cache=None, chunk=64) -> float:
    """Accuracy on one test set, predicting among the classes seen so far.

    Inference always uses full sequences.  ``cache`` (optional dict) stores
    the frozen-encoder embeddings and query features of the test set, which
    never change across tasks.  Mutates nothing else.
    """
    seen = np.asarray(seen_classes)
    labels = test_set.labels
    n = labels.size
    if cache is not None and "emb" in cache:
        emb_all, zq_all = cache["emb"], cache["zq"]
    else:
        emb_all = np.empty((n, model.config.num_patches + 1, model.config.feature_dim))
        zq_all = np.empty((n, model.config.feature_dim))
        for lo in range(0, n, chunk):
            sl = slice(lo, min(lo + chunk, n))
            seq = model.embed(test_set.patches[sl])
            emb_all[sl] = seq.embeddings.data
            if pool is not None:
                zq_all[sl], _ = model.query_forward(seq)
        if cache is not None:
            cache["emb"], cache["zq"] = emb_all, zq_all

    natural = np.arange(1, model.config.num_patches + 2, dtype=np.int64)
    hits = 0
    with T.no_grad():
        for lo in range(0, n, chunk):
            sl = slice(lo, min(lo + chunk, n))
            seq = TokenSequence(Tensor(emb_all[sl]), natural)
            prefix = compose(zq_all[sl], pool) if pool is not None else None
            feat = model.forward_features(seq, prefix)
            logits = feat.data @ model.head_w.data + model.head_b.data
            pred = seen[np.argmax(logits[:, seen], axis=1)]
            hits += int((pred == labels[sl]).sum())
    return hits / n


# ---------------------------------------------------------------------------
# the sequence runner
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    trace: RunTrace
    report: ResourceReport
    method: str
    hyper: Hyper

    @property
    def acc(self) -> float:
        return acc_metric(self.matrix, self.matrix.num_tasks)

    @property
    def fgt(self):
        return fgt_metric(self.matrix, self.matrix.num_tasks)


def _predicted_run_peak(method, spec, hyper, config, plan, class_width) -> int:
    """Closed-form peak over everything the run tapes, phase by phase."""
    n_full = spec.num_patches + 1
    batch = min(hyper.batch_size, spec.train_per_class * spec.classes_per_task)
    if method == "sgd_naive":
        return predict_activations(n_full, config, {"backbone", "classifier"},
                                   batch_size=batch, num_classes=class_width)
    if method == "full":
        n_train = n_full
    else:
        n_train = patch_budget(spec.num_patches, hyper.reduction_ratio) + 1
    peaks = []
    if plan.prompt_epochs > 0:
        peaks.append(predict_activations(
            n_train, config, {"prompt", "classifier"}, batch_size=batch,
            num_classes=class_width, prefix_len=hyper.prefix_len,
            num_components=spec.num_tasks * hyper.quota,
        ))
    if plan.classifier_epochs > 0:
        peaks.append(predict_activations(
            n_full, config, {"classifier"}, batch_size=batch,
            num_classes=class_width,
        ))
    return max(peaks)


def joint_upper_bound(spec: SyntheticSpec, hyper: Hyper, *,
                      backbone: VisionTransformer, stream: Stream | None = None) -> float:
    """Context-only reference: train once on all task data pooled.

    Same per-class epoch budget as a sequential run, full inputs, prompts
    composed from a single expansion.  Returns mean accuracy over the task
    test sets; no forgetting is defined for a joint run.
    """
    stream = stream if stream is not None else generate_stream(spec)
    config = backbone.config
    offset = spec.pretrain_classes
    total = spec.task_class_count
    model = VisionTransformer(config, total, stream_rng(hyper.seed, DOMAIN_INIT, 5))
    model.load_backbone({n: p.data for n, p in backbone.backbone_parameters().items()})
    model.freeze_backbone()
    model.reset_head(total, stream_rng(hyper.seed, DOMAIN_INIT, 6))
    pool = PromptPool(config.feature_dim, prefix_len=hyper.prefix_len,
                      quota=hyper.quota * spec.num_tasks,
                      injected_layers=config.prompt_layers,
                      rng=stream_rng(hyper.seed, DOMAIN_INIT, 7))
    expand_for_task(pool, 0)
    data = (np.concatenate([t.patches for t in stream.tasks]),
            np.concatenate([t.labels for t in stream.tasks]) - offset)
    train_task(data, model, pool, CpsConfig(temperature=hyper.temperature,
                                            reduction_ratio=0.0, seed=hyper.seed),
               plan_phases(hyper.epochs, 1.0), hyper.seed, method="full",
               class_ids=np.arange(total), batch_size=hyper.batch_size,
               base_lr=hyper.base_lr)
    seen = np.arange(total)
    accs = [evaluate(model, pool,
                     LabeledSet(ts.patches, ts.labels - offset), seen)
            for ts in stream.tests]
    return float(np.mean(accs))


def run_sequence(
    method: str,
    spec: SyntheticSpec,
    hyper: Hyper,
    *,
    backbone: VisionTransformer | None = None,
    stream: Stream | None = None,
    config: BackboneConfig | None = None,
    log_indices: bool = False,
) -> RunResult:
    """Train the task sequence with one method and evaluate incrementally.

    ``backbone`` is a pretrained (frozen) model to copy weights from; when
    omitted the backbone is pretrained on the stream's pretraining split
    ("sgd_naive" instead starts from the same weights unfrozen).  Everything
    downstream is derived from (spec, hyper, method), so reruns reproduce the
    accuracy matrix bit-exactly.
    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; choose from {METHODS}")
    stream = stream if stream is not None else generate_stream(spec)
    if config is None:
        config = backbone.config if backbone is not None else BackboneConfig(
            grid_side=spec.grid_side, input_patch_dim=spec.patch_dim)
    if config.grid_side != spec.grid_side or config.input_patch_dim != spec.patch_dim:
        raise ContractError("backbone geometry does not match the stream spec")
    if backbone is None:
        backbone = pretrain_backbone(stream.pretrain, config, seed=spec.seed)

    total_classes = spec.task_class_count
    model = VisionTransformer(config, total_classes, stream_rng(hyper.seed, DOMAIN_INIT, 1))
    model.load_backbone({n: p.data for n, p in backbone.backbone_parameters().items()})
    model.reset_head(total_classes, stream_rng(hyper.seed, DOMAIN_INIT, 4))
    # continual labels are offset by the pretraining classes
    offset = spec.pretrain_classes

    if method == "sgd_naive":
        model.set_backbone_trainable(True)
        pool = None
        reduction, lam = 0.0, 1.0
    else:
        model.freeze_backbone()
        pool = PromptPool(config.feature_dim, prefix_len=hyper.prefix_len,
                          quota=hyper.quota, injected_layers=config.prompt_layers,
                          rng=stream_rng(hyper.seed, DOMAIN_INIT, 2),
                          freeze_previous=hyper.freeze_previous_components)
        if method == "full":
            reduction, lam = 0.0, 1.0
        else:
            reduction, lam = hyper.reduction_ratio, hyper.phase_ratio

    cps = CpsConfig(temperature=hyper.temperature, reduction_ratio=reduction,
                    seed=hyper.seed)
    plan = plan_phases(hyper.epochs, lam)
    matrix = AccuracyMatrix(spec.num_tasks)
    trace = RunTrace()
    eval_caches = [dict() for _ in range(spec.num_tasks)]
    t_start = wall_clock()

    for t in range(spec.num_tasks):
        classes = stream.task_classes[t] - offset
        data = (stream.tasks[t].patches, stream.tasks[t].labels - offset)
        if method == "sgd_naive":
            train_task_naive(data, model, epochs=hyper.epochs, seed=hyper.seed,
                             class_ids=classes, batch_size=hyper.batch_size,
                             base_lr=hyper.base_lr, task_index=t, trace=trace)
        else:
            expand_for_task(pool, t)
            train_task(data, model, pool, cps, plan, hyper.seed, method=method,
                       class_ids=classes, batch_size=hyper.batch_size,
                       base_lr=hyper.base_lr, task_index=t, trace=trace,
                       log_indices=log_indices)
        seen = np.concatenate([stream.task_classes[j] for j in range(t + 1)]) - offset
        for i in range(t + 1):
            shifted = LabeledSet(stream.tests[i].patches, stream.tests[i].labels - offset)
            # frozen-encoder caching is only sound when the backbone is frozen
            cache = eval_caches[i] if method != "sgd_naive" else None
            matrix.record(t, i, evaluate(model, pool, shifted, seen, cache=cache))

    wall = wall_clock() - t_start
    measured_peak = trace.peak_live()
    per_phase = {}
    for phase in (1, 2):
        rows = trace.select(phase=phase)
        if rows:
            per_phase[f"phase{phase}"] = {
                "peak_live_elements": trace.peak_live(phase=phase),
                "macs": trace.total_macs(phase=phase),
                "steps": len(rows),
            }
    report = ResourceReport(
        peak_live_elements=measured_peak,
        predicted_peak=_predicted_run_peak(method, spec, hyper, config, plan,
                                           class_width=spec.classes_per_task),
        total_macs=trace.total_macs(),
        wall_time_s=wall,
        per_phase=per_phase,
    )
    return RunResult(matrix=matrix, trace=trace, report=report, method=method,
                     hyper=hyper)
