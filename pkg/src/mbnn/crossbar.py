"""Memristive crossbar simulator for binary weight matrices.

Each logical weight is one memristor: +1 is programmed to R_ON and -1 to R_OFF.
A column of fixed resistors at ``G_c = (G_ON + G_OFF) / 2`` is subtracted from
every column, so an input row ``V`` produces

    O_m[k, j] = K * sum_i V[k, i] * (G[i, j] - G_c)

and with ideal devices ``K = 2 / (G_ON - G_OFF)`` (4000 for 1 kOhm / 2 kOhm)
reproduces ``D_m @ F_m`` exactly.

In sequential mode one conductance matrix serves all M input rows. In parallel
mode the filter matrix is duplicated M times and row ``k`` is read from
replica ``k``; under variation each replica gets its own device samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from mbnn.im2col import DimensionError

SEQUENTIAL = "sequential"
PARALLEL = "parallel"
MODES = (SEQUENTIAL, PARALLEL)

IDEAL_K = 4000.0
MIN_RESISTANCE = 1.0  # ohm; Gaussian samples below this are clamped


class ProgrammingError(ValueError):
    """Raised when a non-binary weight is written to a crossbar."""


@dataclass(frozen=True)
class DeviceParams:
    r_on: float = 1000.0
    r_off: float = 2000.0

    def __post_init__(self):
        if not 0 < self.r_on < self.r_off:
            raise ValueError(f"need 0 < R_ON < R_OFF, got {self.r_on}, {self.r_off}")

    @property
    def g_on(self) -> float:
        return 1.0 / self.r_on

    @property
    def g_off(self) -> float:
        return 1.0 / self.r_off

    @property
    def g_ref(self) -> float:
        """Reference column conductance G_c."""
        return (self.g_on + self.g_off) / 2.0

    @property
    def ideal_k(self) -> float:
        return 2.0 / (self.g_on - self.g_off)


@dataclass(frozen=True)
class VariationSpec:
    """Gaussian resistance spread: std ``sigma`` ohm for R_ON devices, ``2 * sigma`` for R_OFF."""

    sigma: float = 0.0
    seed: int = 0

    OFF_MULTIPLIER = 2.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def sigma_on(self) -> float:
        return self.sigma

    @property
    def sigma_off(self) -> float:
        return self.OFF_MULTIPLIER * self.sigma


@dataclass(frozen=True)
class Crossbar:
    """A programmed array. ``conductance`` is (C, N) sequential or (M, C, N) parallel."""

    weights: np.ndarray
    conductance: np.ndarray
    params: DeviceParams
    k: float = IDEAL_K
    mode: str = SEQUENTIAL
    variation: Optional[VariationSpec] = None

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def columns(self) -> int:
        return self.weights.shape[1]

    @property
    def replicas(self) -> int:
        return 1 if self.mode == SEQUENTIAL else self.conductance.shape[0]

    @property
    def g_ref(self) -> float:
        return self.params.g_ref


def program(f_m, params: DeviceParams = DeviceParams(), mode: str = SEQUENTIAL,
            replicas: int = 1, k: float = IDEAL_K) -> Crossbar:
    """Write a {-1, +1} matrix (C x N) to nominal conductances."""
    f_m = np.asarray(f_m)
    if f_m.ndim != 2:
        raise DimensionError(f"F_m must be 2-d, got shape {f_m.shape}")
    if not np.all((f_m == 1) | (f_m == -1)):
        raise ProgrammingError("crossbar weights must be exactly -1 or +1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    weights = f_m.astype(np.int8)
    g = np.where(weights > 0, params.g_on, params.g_off)
    if mode == PARALLEL:
        if replicas < 1:
            raise ValueError("parallel mode needs at least one replica")
        g = np.broadcast_to(g, (replicas,) + g.shape).copy()
    return Crossbar(weights=weights, conductance=g, params=params, k=float(k), mode=mode)


def nominal_resistance(xb: Crossbar) -> np.ndarray:
    return np.where(xb.weights > 0, xb.params.r_on, xb.params.r_off)


def inject_variation(xb: Crossbar, spec: VariationSpec,
                     rng: Optional[np.random.Generator] = None) -> Crossbar:
    """Resample every device around its programmed state.

    Samples are drawn from the nominal state, not from the current conductances,
    so applying a spec twice gives the same crossbar. ``rng`` overrides the seed
    stored in ``spec`` (used to give each layer its own stream).
    """
    if spec.sigma == 0:
        g = np.where(xb.weights > 0, xb.params.g_on, xb.params.g_off)
        g = np.broadcast_to(g, xb.conductance.shape).copy()
        return replace(xb, conductance=g, variation=spec)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    r_nom = nominal_resistance(xb)
    std = np.where(xb.weights > 0, spec.sigma_on, spec.sigma_off)
    shape = xb.conductance.shape
    r = rng.normal(np.broadcast_to(r_nom, shape), np.broadcast_to(std, shape))
    r = np.maximum(r, MIN_RESISTANCE)
    return replace(xb, conductance=1.0 / r, variation=spec)


def set_amplification(xb: Crossbar, k: float) -> Crossbar:
    return replace(xb, k=float(k))


def matmul(xb: Crossbar, d_m) -> np.ndarray:
    """Analog product of input voltages (..., M, C) with the array, giving (..., M, N)."""
    d_m = np.asarray(d_m, dtype=np.float64)
    if d_m.ndim < 2 or d_m.shape[-1] != xb.rows:
        raise DimensionError(f"input rows of length {d_m.shape[-1:]} do not match {xb.rows} crossbar rows")
    delta = xb.conductance - xb.g_ref
    if xb.mode == SEQUENTIAL:
        currents = (d_m.reshape(-1, xb.rows) @ delta).reshape(*d_m.shape[:-1], xb.columns)
    else:
        if d_m.shape[-2] != xb.replicas:
            raise DimensionError(f"{d_m.shape[-2]} input rows for {xb.replicas} parallel replicas")
        currents = np.einsum("...mc,mcn->...mn", d_m, delta)
    return xb.k * currents


def bhattacharyya_normal(mu1: float, s1: float, mu2: float, s2: float) -> float:
    """Bhattacharyya coefficient of two normal densities (0 for distinct point masses)."""
    if s1 == 0 or s2 == 0:
        return 1.0 if (s1 == s2 and mu1 == mu2) else 0.0
    var_sum = s1 * s1 + s2 * s2
    return math.sqrt(2.0 * s1 * s2 / var_sum) * math.exp(-((mu1 - mu2) ** 2) / (4.0 * var_sum))


def state_overlap(xb: Crossbar) -> float:
    """Overlap between the R_ON and R_OFF resistance distributions of a varied crossbar."""
    spec = xb.variation or VariationSpec(0.0)
    return bhattacharyya_normal(xb.params.r_on, spec.sigma_on, xb.params.r_off, spec.sigma_off)
