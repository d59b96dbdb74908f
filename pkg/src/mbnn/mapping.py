"""Mapping a trained network's binary filters onto one crossbar per convolution layer."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from mbnn.crossbar import (
    IDEAL_K,
    PARALLEL,
    SEQUENTIAL,
    Crossbar,
    DeviceParams,
    VariationSpec,
    inject_variation,
    matmul,
    program,
    set_amplification,
)
from mbnn.im2col import DimensionError, unroll_filters
from mbnn.nn import INPUT_SHAPE, NetworkModel


class CrossbarBackend:
    """Routes each lowered convolution through its layer's crossbar."""

    name = "crossbar"

    def __init__(self, crossbars: Sequence[Crossbar]):
        self.crossbars = list(crossbars)

    def conv_matmul(self, layer: int, cols: np.ndarray, f_m: np.ndarray) -> np.ndarray:
        xb = self.crossbars[layer]
        if f_m.shape != xb.weights.shape:
            raise DimensionError(f"layer {layer}: filters {f_m.shape} vs crossbar {xb.weights.shape}")
        return matmul(xb, cols)

    @property
    def ks(self) -> tuple[float, ...]:
        return tuple(xb.k for xb in self.crossbars)

    def set_ks(self, ks: Sequence[float]) -> None:
        if len(ks) != len(self.crossbars):
            raise ValueError(f"need {len(self.crossbars)} amplification factors, got {len(ks)}")
        self.crossbars = [set_amplification(xb, k) for xb, k in zip(self.crossbars, ks)]

    def with_ks(self, ks: Sequence[float]) -> "CrossbarBackend":
        other = CrossbarBackend(self.crossbars)
        other.set_ks(ks)
        return other


def layer_positions(model: NetworkModel) -> list[int]:
    """Number of output positions M per convolution for a 28x28 input."""
    h, w = INPUT_SHAPE[1:]
    o1 = model.conv1.output_shape(h, w)
    p1 = (o1[0] // 2, o1[1] // 2)
    o2 = model.conv2.output_shape(*p1)
    return [o1[0] * o1[1], o2[0] * o2[1]]


def map_model(model: NetworkModel, params: DeviceParams = DeviceParams(), mode: str = SEQUENTIAL,
              variation: Optional[VariationSpec] = None,
              ks: Sequence[float] = (IDEAL_K, IDEAL_K)) -> CrossbarBackend:
    """Program both layers and optionally perturb them.

    Each layer draws from its own stream spawned from ``variation.seed``.
    """
    crossbars = []
    streams = np.random.SeedSequence(variation.seed if variation else 0).spawn(2)
    for i, (w_b, m) in enumerate(zip(model.binary_weights, layer_positions(model))):
        xb = program(unroll_filters(w_b), params, mode, replicas=m if mode == PARALLEL else 1, k=ks[i])
        if variation is not None:
            xb = inject_variation(xb, variation, np.random.default_rng(streams[i]))
        crossbars.append(xb)
    return CrossbarBackend(crossbars)
