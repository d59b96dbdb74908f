"""Bayesian tuning of crossbar amplification factors and of training hyperparameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from mbnn.bayesopt import (
    CONTINUOUS,
    INTEGER,
    LOG,
    Dimension,
    SearchSpace,
    TrialRecord,
    optimize,
)
from mbnn.mapping import CrossbarBackend
from mbnn.nn import FP8, NetworkModel, OptimizerConfig, evaluate, make_optimizer_config, train

K_RANGE = (3000.0, 5000.0)
N_TRIALS = 15

BATCH_SIZE_RANGE = (64, 128)
T_CLIP_RANGE = (0.5, 1.0)
LR_RANGE = (1e-3, 1e-2)


@dataclass
class KTuningResult:
    ks: tuple[float, ...]
    accuracy: float
    history: list[TrialRecord] = field(default_factory=list)


def k_space(n_layers: int = 2, k_range=K_RANGE) -> SearchSpace:
    return SearchSpace([Dimension(f"k{i + 1}", CONTINUOUS, *k_range) for i in range(n_layers)])


def tune_k(model: NetworkModel, backend: CrossbarBackend, val_images, val_labels,
           n_trials: int = N_TRIALS, seed: int = 0, k_range=K_RANGE, include_current: bool = True,
           callback: Optional[Callable[[TrialRecord], None]] = None) -> KTuningResult:
    """Search one K per layer for the best validation accuracy and apply it to ``backend``.

    Conductances are never touched; only the output scaling changes. With
    ``include_current`` the backend's present K vector is the first trial, so
    the result can never score below the untuned crossbars on this data.
    """
    n = len(backend.crossbars)
    low, high = k_range
    if low == high:
        backend.set_ks([low] * n)
        acc = evaluate(model, val_images, val_labels, backend)
        record = TrialRecord(0, {f"k{i + 1}": low for i in range(n)}, acc)
        return KTuningResult(tuple(backend.ks), acc, [record])

    space = k_space(n, k_range)

    def objective(point):
        ks = [point[f"k{i + 1}"] for i in range(n)]
        return evaluate(model, val_images, val_labels, backend.with_ks(ks))

    initial = []
    if include_current and all(low <= k <= high for k in backend.ks):
        initial = [{f"k{i + 1}": k for i, k in enumerate(backend.ks)}]
    result = optimize(objective, space, n_trials, seed, initial, callback)
    ks = tuple(result.best.point[f"k{i + 1}"] for i in range(n))
    backend.set_ks(ks)
    return KTuningResult(ks, result.best.objective, result.history)


@dataclass
class HyperparameterResult:
    optimizer: str
    config: OptimizerConfig
    t_clip: float
    val_accuracy: float
    history: list[TrialRecord] = field(default_factory=list)


def hyperparameter_space() -> SearchSpace:
    return SearchSpace([
        Dimension("batch_size", INTEGER, *BATCH_SIZE_RANGE),
        Dimension("t_clip", CONTINUOUS, *T_CLIP_RANGE),
        Dimension("lr", LOG, *LR_RANGE),
    ])


def tune_hyperparameters(optimizer: str, train_set, val_set, n_trials: int = N_TRIALS, epochs: int = 20,
                         seed: int = 0, representation: str = FP8,
                         callback: Optional[Callable[[TrialRecord], None]] = None,
                         epoch_callback=None) -> HyperparameterResult:
    """Search batch size, t_clip and learning rate for one optimizer preset.

    The objective of a trial is the best validation accuracy over ``epochs``
    epochs of training from a fresh, seeded initialization. Divergent trials
    score -inf.
    """

    def objective(point):
        cfg = make_optimizer_config(optimizer, point["lr"], point["batch_size"])
        model = NetworkModel.initialize(point["t_clip"], representation, seed)
        history = train(model, cfg, train_set.images, train_set.labels, epochs, seed,
                        val_set.images, val_set.labels, epoch_callback)
        return max((m.val_accuracy for m in history), default=-math.inf)

    result = optimize(objective, hyperparameter_space(), n_trials, seed, callback=callback)
    p = result.best.point
    return HyperparameterResult(
        optimizer, make_optimizer_config(optimizer, p["lr"], p["batch_size"]), p["t_clip"],
        result.best.objective, result.history,
    )

