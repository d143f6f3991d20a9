"""Shared fixtures: the default stream, one pretrained backbone, and a
memoizing runner for the multi-seed experiments the acceptance suite needs."""

import time

import numpy as np
import pytest

from cpsp.harness import (
    Hyper,
    SyntheticSpec,
    generate_stream,
    pretrain_backbone,
    run_sequence,
)
from cpsp.vit import BackboneConfig

DEFAULT_SPEC = SyntheticSpec(seed=0)
EXPERIMENT_SEEDS = tuple(range(1, 11))
# desk-scale training budget: spec-default batch/temperature, a short epoch
# budget and a learning rate sized for the micro model so phase 1 converges
# before the decoupling point
EXPERIMENT_EPOCHS = 6
EXPERIMENT_LR = 2e-2
DPCT_RATIO = 0.5  # floor(0.5 * 6) = 3 prompt epochs, 3 classifier epochs


@pytest.fixture(scope="session")
def default_stream():
    return generate_stream(DEFAULT_SPEC)


@pytest.fixture(scope="session")
def default_backbone(default_stream):
    config = BackboneConfig(grid_side=DEFAULT_SPEC.grid_side,
                            input_patch_dim=DEFAULT_SPEC.patch_dim)
    return pretrain_backbone(default_stream.pretrain, config, seed=DEFAULT_SPEC.seed,
                             max_epochs=20)


class ExperimentRunner:
    """Lazily computed, memoized multi-seed runs plus their wall time."""

    def __init__(self, stream, backbone):
        self.stream = stream
        self.backbone = backbone
        self._cache = {}
        self.elapsed = {}

    def hyper(self, reduction_ratio, phase_ratio, seed, epochs=EXPERIMENT_EPOCHS):
        return Hyper(reduction_ratio=reduction_ratio, phase_ratio=phase_ratio,
                     epochs=epochs, base_lr=EXPERIMENT_LR, seed=seed)

    def runs(self, method, reduction_ratio, phase_ratio, seeds=EXPERIMENT_SEEDS,
             epochs=EXPERIMENT_EPOCHS):
        key = (method, reduction_ratio, phase_ratio, tuple(seeds), epochs)
        if key not in self._cache:
            t0 = time.perf_counter()
            self._cache[key] = [
                run_sequence(method, DEFAULT_SPEC,
                             self.hyper(reduction_ratio, phase_ratio, seed, epochs),
                             backbone=self.backbone, stream=self.stream)
                for seed in seeds
            ]
            self.elapsed[key] = time.perf_counter() - t0
        return self._cache[key]

    def accs(self, *args, **kw):
        return np.array([r.acc for r in self.runs(*args, **kw)])

    def fgts(self, *args, **kw):
        return np.array([r.fgt for r in self.runs(*args, **kw)])


@pytest.fixture(scope="session")
def experiments(default_stream, default_backbone):
    return ExperimentRunner(default_stream, default_backbone)
