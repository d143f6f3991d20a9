"""Critical-patch sparse prompting for class-incremental learning.

A small numpy library: a reverse-mode tape whose retained-buffer census is
exact, a micro vision transformer with key/value prompt prefixes, attention
guided patch sampling, a two-phase prompt/classifier trainer, a synthetic
class-incremental harness and closed-form memory/compute accounting.
"""

from cpsp.accounting import ResourceReport, count_macs, predict_activations
from cpsp.harness import (
    AccuracyMatrix,
    Hyper,
    SyntheticSpec,
    acc_metric,
    fgt_metric,
    generate_stream,
    hit_rate,
    pretrain_backbone,
    run_sequence,
)
from cpsp.prompts import PromptPool, compose, expand_for_task, set_frozen
from cpsp.sampling import (
    CpsConfig,
    CriticalDistribution,
    assemble_sparse,
    critical_scores,
    patch_budget,
    sample_without_replacement,
    stream_rng,
    to_distribution,
    top_k,
    uniform_sample,
)
from cpsp.tensor import (
    ContractError,
    DimensionError,
    MacMeter,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    no_grad,
)
from cpsp.training import (
    PhasePlan,
    RunAbortError,
    RunTrace,
    cosine_lr,
    plan_phases,
    train_task,
    train_task_naive,
)
from cpsp.vit import (
    AttentionTrace,
    BackboneConfig,
    TokenSequence,
    VisionTransformer,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "AccuracyMatrix",
    "AttentionTrace",
    "BackboneConfig",
    "ContractError",
    "CpsConfig",
    "CriticalDistribution",
    "DimensionError",
    "Hyper",
    "MacMeter",
    "NonFiniteError",
    "PhasePlan",
    "PromptPool",
    "ResourceReport",
    "RunAbortError",
    "RunTrace",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TokenSequence",
    "VisionTransformer",
    "acc_metric",
    "assemble_sparse",
    "backward",
    "compose",
    "cosine_lr",
    "count_macs",
    "critical_scores",
    "expand_for_task",
    "fgt_metric",
    "generate_stream",
    "hit_rate",
    "load_checkpoint",
    "no_grad",
    "patch_budget",
    "plan_phases",
    "predict_activations",
    "pretrain_backbone",
    "run_sequence",
    "sample_without_replacement",
    "save_checkpoint",
    "set_frozen",
    "stream_rng",
    "to_distribution",
    "top_k",
    "train_task",
    "train_task_naive",
    "uniform_sample",
]

__version__ = "0.1.0"
