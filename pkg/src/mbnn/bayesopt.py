"""Small Bayesian optimizer: GP surrogate with expected improvement, maximizing.

The engine is fixed so runs are reproducible:

* the first ``N_INIT`` points come from a scrambled Sobol design;
* afterwards a zero-mean GP with a squared-exponential kernel (length scale
  0.2 on the unit cube, noise 1e-4, targets standardized) is fitted to the
  history and expected improvement is maximized over 1000 random candidates,
  the best few of which are polished with L-BFGS-B;
* integer dimensions are rounded and already-evaluated points are skipped.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm, qmc

CONTINUOUS = "continuous"
INTEGER = "integer"
LOG = "log-continuous"
KINDS = (CONTINUOUS, INTEGER, LOG)

N_INIT = 5
LENGTH_SCALE = 0.2
NOISE = 1e-4
N_CANDIDATES = 1000
N_POLISH = 5
MAX_ENUMERATION = 100_000


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    low: float
    high: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or self.low >= self.high:
            raise ValueError(f"dimension {self.name!r} needs finite low < high, got [{self.low}, {self.high}]")
        if self.kind == LOG and self.low <= 0:
            raise ValueError(f"log dimension {self.name!r} needs a positive lower bound")

    def to_unit(self, value: float) -> float:
        if self.kind == LOG:
            return (math.log(value) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))
        return (value - self.low) / (self.high - self.low)

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == LOG:
            value = math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low)))
            return float(min(max(value, self.low), self.high))  # exp/log round-off can step past a bound
        value = self.low + u * (self.high - self.low)
        if self.kind == INTEGER:
            return int(min(max(round(value), math.ceil(self.low)), math.floor(self.high)))
        return float(value)


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __init__(self, dimensions: Sequence[Dimension]):
        object.__setattr__(self, "dimensions", tuple(dimensions))
        names = [d.name for d in self.dimensions]
        if not names or len(set(names)) != len(names):
            raise ValueError("search space needs at least one dimension and unique names")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def __len__(self) -> int:
        return len(self.dimensions)

    def to_unit(self, point: Mapping[str, float]) -> np.ndarray:
        return np.array([d.to_unit(point[d.name]) for d in self.dimensions])

    def from_unit(self, u) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dimensions, u)}

    def contains(self, point: Mapping[str, float]) -> bool:
        for d in self.dimensions:
            v = point[d.name]
            if not d.low <= v <= d.high or (d.kind == INTEGER and v != int(v)):
                return False
        return True

    def is_discrete(self) -> bool:
        return all(d.kind == INTEGER for d in self.dimensions)


@dataclass
class TrialRecord:
    index: int
    point: dict
    objective: float
    seconds: float = 0.0


@dataclass
class OptimizationResult:
    best: TrialRecord
    history: list[TrialRecord] = field(default_factory=list)


class GaussianProcess:
    """Exact GP regression with a fixed squared-exponential kernel."""

    def __init__(self, x: np.ndarray, y: np.ndarray, length_scale: float = LENGTH_SCALE, noise: float = NOISE):
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.length_scale = length_scale
        self.y_mean = y.mean()
        self.y_std = y.std() if y.std() > 0 else 1.0
        z = (y - self.y_mean) / self.y_std
        gram = self.kernel(self.x, self.x) + noise * np.eye(len(self.x))
        self.chol = cho_factor(gram, lower=True)
        self.alpha = cho_solve(self.chol, z)

    def kernel(self, a, b):
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-0.5 * sq / self.length_scale**2)

    def predict(self, xs):
        xs = np.atleast_2d(xs)
        k = self.kernel(xs, self.x)
        mean = k @ self.alpha
        v = cho_solve(self.chol, k.T)
        var = np.maximum(1.0 - np.einsum("ij,ji->i", k, v), 1e-12)
        return mean * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def expected_improvement(mean, std, best: float) -> np.ndarray:
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    gap = mean - best
    safe = np.where(std > 0, std, 1.0)
    z = gap / safe
    ei = gap * norm.cdf(z) + safe * norm.pdf(z)
    return np.where(std > 0, ei, np.maximum(gap, 0.0))


def _key(space: SearchSpace, point: Mapping[str, float]) -> tuple:
    return tuple(round(d.to_unit(point[d.name]), 9) for d in space.dimensions)


def _initial_design(space: SearchSpace, seed: int) -> np.ndarray:
    pts = qmc.Sobol(len(space), scramble=True, seed=seed).random_base2(3)
    return np.clip(pts, 1e-3, 1 - 1e-3)


def _first_unseen(space, candidates_u, seen) -> Optional[dict]:
    for u in candidates_u:
        point = space.from_unit(u)
        if _key(space, point) not in seen:
            return point
    return None


def suggest(history: Sequence[TrialRecord], space: SearchSpace, seed: int = 0) -> dict:
    """Next point to evaluate, deterministic in ``seed`` and ``history``."""
    seen = {_key(space, t.point) for t in history}
    n = len(history)
    rng = np.random.default_rng([seed, n])

    if n < N_INIT:
        design = _initial_design(space, seed)
        ordered = np.concatenate([design[n:], design[:n], rng.random((N_CANDIDATES, len(space)))])
        point = _first_unseen(space, ordered, seen)
        if point is not None:
            return point

    x = np.array([space.to_unit(t.point) for t in history])
    y = np.array([t.objective for t in history], dtype=np.float64)
    finite = np.isfinite(y)
    if not finite.any():
        point = _first_unseen(space, rng.random((N_CANDIDATES, len(space))), seen)
        return point if point is not None else space.from_unit(rng.random(len(space)))
    y = np.where(finite, y, y[finite].min())
    gp = GaussianProcess(x, y)
    best = y.max()

    def neg_ei(u):
        m, s = gp.predict(u[None])
        return -expected_improvement(m, s, best)[0]

    cand = rng.random((N_CANDIDATES, len(space)))
    m, s = gp.predict(cand)
    ei = expected_improvement(m, s, best)
    order = np.argsort(-ei, kind="stable")
    polished = []
    for i in order[:N_POLISH]:
        res = minimize(neg_ei, cand[i], method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(space))
        polished.append((res.fun, res.x))
    polished.sort(key=lambda t: t[0])
    ranked = [u for _, u in polished] + [cand[i] for i in order]
    point = _first_unseen(space, ranked, seen)
    if point is not None:
        return point

    if space.is_discrete():
        grids = [range(math.ceil(d.low), math.floor(d.high) + 1) for d in space.dimensions]
        total = math.prod(len(g) for g in grids)
        if total <= MAX_ENUMERATION:
            pts = [dict(zip(space.names, combo)) for combo in itertools.product(*grids)]
            unseen = [p for p in pts if _key(space, p) not in seen]
            if unseen:
                m, s = gp.predict(np.array([space.to_unit(p) for p in unseen]))
                return unseen[int(np.argmax(expected_improvement(m, s, best)))]
    # every candidate already evaluated: return the incumbent
    return dict(history[int(np.argmax(y))].point)


def best_of(history: Sequence[TrialRecord]) -> TrialRecord:
    values = [t.objective if not math.isnan(t.objective) else -math.inf for t in history]
    return history[int(np.argmax(values))]


def optimize(objective: Callable[[dict], float], space: SearchSpace, n_trials: int, seed: int = 0,
             initial_points: Sequence[Mapping[str, float]] = (),
             callback: Optional[Callable[[TrialRecord], None]] = None) -> OptimizationResult:
    """Maximize ``objective`` with ``n_trials`` evaluations.

    ``initial_points`` are evaluated first and count toward ``n_trials``. A trial
    whose objective raises or returns a non-finite value is recorded as -inf.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    history: list[TrialRecord] = []
    for i in range(n_trials):
        point = dict(initial_points[i]) if i < len(initial_points) else suggest(history, space, seed)
        start = time.perf_counter()
        try:
            value = float(objective(point))
        except Exception:  # noqa: BLE001 - a failed trial must not end the search
            value = -math.inf
        if not math.isfinite(value):
            value = -math.inf
        record = TrialRecord(i, point, value, time.perf_counter() - start)
        history.append(record)
        if callback:
            callback(record)
    return OptimizationResult(best_of(history), history)
