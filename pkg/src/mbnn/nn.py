"""Binarized CNN: layers, model, optimizers and training loop (numpy, float64 compute).

Architecture for 1x28x28 inputs, no biases anywhere::

    conv 16@2x2 (pad 1) -> BN -> maxpool 2 -> hardtanh      29x29 -> 14x14
    conv 32@2x2 (pad 1) -> BN -> maxpool 2 -> hardtanh      15x15 -> 7x7
    flatten (1568) -> fully connected (10)

Convolution weights are kept as real-valued shadow weights and binarized with
``sign`` (0 maps to -1) on every use. The two number representations are

* ``fr32``: shadow and FC weights are float32.
* ``fp8``: shadow and FC weights are Q0.7 fixed point (see :mod:`mbnn.fixedpoint`).

Batch-norm parameters and statistics are float32 in both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from mbnn import fixedpoint
from mbnn.im2col import (
    ConvLayerSpec,
    DimensionError,
    fold_filters,
    fold_output,
    unfold_output,
    unroll_filters,
    unroll_input,
    unroll_input_adjoint,
)

FR32 = "fr32"
FP8 = "fp8"
REPRESENTATIONS = (FR32, FP8)

INPUT_SHAPE = (1, 28, 28)
NUM_CLASSES = 10
FC_INPUTS = 1568

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite."""


# ---------------------------------------------------------------------------
# elementwise pieces


def binarize(w) -> np.ndarray:
    """Signum with sign(0) = -1."""
    return np.where(np.asarray(w) > 0, 1.0, -1.0)


def ste_backward(grad_wb, w, t_clip: float) -> np.ndarray:
    """Pass the gradient of the binary weights through where ``|w| <= t_clip``."""
    grad_wb = np.asarray(grad_wb, dtype=np.float64)
    w = np.asarray(w)
    if grad_wb.shape != w.shape:
        raise DimensionError(f"gradient shape {grad_wb.shape} != weight shape {w.shape}")
    return np.where(np.abs(w) <= t_clip, grad_wb, 0.0)


def hardtanh(x) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def hardtanh_backward(grad, x) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, grad, 0.0)


# ---------------------------------------------------------------------------
# convolution


class DigitalBackend:
    """Exact floating-point GEMM for the lowered convolutions."""

    name = "digital"

    def conv_matmul(self, layer: int, cols: np.ndarray, f_m: np.ndarray) -> np.ndarray:
        # one 2-d GEMM is much faster than a stack of thin (M, C) products
        return (cols.reshape(-1, cols.shape[-1]) @ f_m).reshape(*cols.shape[:-1], f_m.shape[1])


def conv_forward(x, spec: ConvLayerSpec, w_b, backend=None, layer: int = 0):
    """Convolve (B, C, H, W) inputs with binary filters through ``backend``.

    Returns the (B, f, o1, o2) output and the patch matrix for the backward pass.
    """
    backend = backend or DigitalBackend()
    x = np.asarray(x, dtype=np.float64)
    out_shape = spec.output_shape(x.shape[-2], x.shape[-1])
    cols = unroll_input(x, spec)
    f_m = unroll_filters(w_b)
    o_m = backend.conv_matmul(layer, cols, f_m)
    return fold_output(o_m, out_shape, spec.filters), cols


def conv_backward(grad_out, cols, spec: ConvLayerSpec, w_b, in_hw: tuple[int, int], need_input_grad=True):
    """Gradients w.r.t. the binary filters and (optionally) the layer input."""
    d_om = unfold_output(grad_out)  # (B, M, N)
    d_fm = cols.reshape(-1, cols.shape[-1]).T @ d_om.reshape(-1, d_om.shape[-1])
    grad_wb = fold_filters(d_fm, spec)
    grad_x = None
    if need_input_grad:
        d_cols = d_om @ unroll_filters(w_b).T
        grad_x = unroll_input_adjoint(d_cols, spec, *in_hw)
    return grad_wb, grad_x


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def initial(cls, channels: int) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, np.float32),
            beta=np.zeros(channels, np.float32),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x, state: BatchNormState, training: bool):
    """Per-channel normalization of (B, C, H, W); updates running stats in training mode."""
    if x.shape[1] != state.channels:
        raise DimensionError(f"{x.shape[1]} channels, batch norm expects {state.channels}")
    gamma = state.gamma.astype(np.float64)[None, :, None, None]
    beta = state.beta.astype(np.float64)[None, :, None, None]
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * n / max(n - 1, 1)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(np.float32)
    else:
        # inference: fold everything into one per-channel affine map
        inv_std = 1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)
        scale = state.gamma.astype(np.float64) * inv_std
        shift = state.beta.astype(np.float64) - state.running_mean.astype(np.float64) * scale
        y = x * scale[None, :, None, None]
        y += shift[None, :, None, None]
        return y, None
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma * x_hat + beta, (x_hat, inv_std)


def batchnorm_backward(grad, cache, state: BatchNormState):
    """Training-mode backward; returns (grad_x, grad_gamma, grad_beta)."""
    x_hat, inv_std = cache
    n = grad.shape[0] * grad.shape[2] * grad.shape[3]
    grad_gamma = (grad * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad.sum(axis=(0, 2, 3))
    scale = (state.gamma.astype(np.float64) * inv_std / n)[None, :, None, None]
    grad_x = scale * (n * grad - grad_beta[None, :, None, None] - x_hat * grad_gamma[None, :, None, None])
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# pooling


def maxpool_forward(x, training: bool = True):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped.

    With ``training=False`` no argmax cache is built (the backward pass is unavailable).
    """
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"cannot pool spatial extent {(h, w)}")
    if not training:
        hh, ww = 2 * h2, 2 * w2
        out = np.maximum(x[:, :, 0:hh:2, 0:ww:2], x[:, :, 0:hh:2, 1:ww:2])
        np.maximum(out, x[:, :, 1:hh:2, 0:ww:2], out=out)
        np.maximum(out, x[:, :, 1:hh:2, 1:ww:2], out=out)
        return out, None
    windows = x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(grad, cache):
    if cache is None:
        raise ValueError("max pooling ran in inference mode; no gradient cache")
    arg, shape = cache
    b, c, h, w = shape
    h2, w2 = h // 2, w // 2
    windows = np.zeros((b, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(windows, arg[..., None], grad[..., None], axis=-1)
    windows = windows.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    out = np.zeros(shape, dtype=grad.dtype)
    out[:, :, : 2 * h2, : 2 * w2] = windows
    return out


# ---------------------------------------------------------------------------
# classifier


def fc_forward(x, weights):
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"input length {x.shape[-1]} != fc fan-in {weights.shape[0]}")
    return x @ weights


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# model


def default_conv_specs() -> tuple[ConvLayerSpec, ConvLayerSpec]:
    return ConvLayerSpec(filters=16, in_channels=1), ConvLayerSpec(filters=32, in_channels=16)


def store(values, representation: str) -> np.ndarray:
    """Round values to the storage format of ``representation``."""
    if representation == FP8:
        return fixedpoint.round_trip(values)
    return np.asarray(values, dtype=np.float32)


def clip_bound(t_clip: float, representation: str) -> float:
    # on the Q0.7 grid, the largest code not exceeding t_clip
    if representation == FP8:
        return math.floor(t_clip * fixedpoint.SCALE) / fixedpoint.SCALE
    return t_clip


@dataclass
class NetworkModel:
    conv1: ConvLayerSpec
    conv2: ConvLayerSpec
    w1: np.ndarray
    w2: np.ndarray
    bn1: BatchNormState
    bn2: BatchNormState
    fc: np.ndarray
    t_clip: float
    representation: str = FP8

    @classmethod
    def initialize(cls, t_clip: float = 0.89, representation: str = FP8, seed: int = 0) -> "NetworkModel":
        """Uniform init in +-t_clip / sqrt(fan_in), rounded to the storage format."""
        if representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        rng = np.random.default_rng(seed)
        conv1, conv2 = default_conv_specs()

        def uniform(shape, fan_in):
            bound = t_clip / math.sqrt(fan_in)
            return store(rng.uniform(-bound, bound, size=shape), representation)

        w1 = uniform((conv1.filters, conv1.in_channels, *conv1.kernel), conv1.patch_length)
        w2 = uniform((conv2.filters, conv2.in_channels, *conv2.kernel), conv2.patch_length)
        fc = uniform((FC_INPUTS, NUM_CLASSES), FC_INPUTS)
        return cls(conv1, conv2, w1, w2, BatchNormState.initial(conv1.filters),
                   BatchNormState.initial(conv2.filters), fc, float(t_clip), representation)

    @property
    def binary_weights(self) -> tuple[np.ndarray, np.ndarray]:
        return binarize(self.w1), binarize(self.w2)

    def forward(self, x, backend=None, training: bool = False):
        """Return logits for a (B, 1, 28, 28) batch and the cache of intermediates."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        wb1, wb2 = self.binary_weights
        c = {"x": x}
        c["conv1"], c["cols1"] = conv_forward(x, self.conv1, wb1, backend, layer=0)
        c["bn1_out"], c["bn1"] = batchnorm_forward(c["conv1"], self.bn1, training)
        c["pool1_out"], c["pool1"] = maxpool_forward(c["bn1_out"], training)
        c["act1"] = hardtanh(c["pool1_out"])
        c["conv2"], c["cols2"] = conv_forward(c["act1"], self.conv2, wb2, backend, layer=1)
        c["bn2_out"], c["bn2"] = batchnorm_forward(c["conv2"], self.bn2, training)
        c["pool2_out"], c["pool2"] = maxpool_forward(c["bn2_out"], training)
        c["act2"] = hardtanh(c["pool2_out"])
        c["flat"] = c["act2"].reshape(x.shape[0], -1)
        logits = fc_forward(c["flat"], self.fc)
        return logits, c

    def backward(self, grad_logits, c) -> dict[str, np.ndarray]:
        """Gradients of every trainable parameter (STE applied to conv weights)."""
        wb1, wb2 = self.binary_weights
        grads = {"fc": c["flat"].T @ grad_logits}
        g = (grad_logits @ np.asarray(self.fc, dtype=np.float64).T).reshape(c["act2"].shape)
        g = hardtanh_backward(g, c["pool2_out"])
        g = maxpool_backward(g, c["pool2"])
        g, grads["bn2.gamma"], grads["bn2.beta"] = batchnorm_backward(g, c["bn2"], self.bn2)
        gw2, g = conv_backward(g, c["cols2"], self.conv2, wb2, c["act1"].shape[-2:])
        grads["w2"] = ste_backward(gw2, self.w2, self.t_clip)
        g = hardtanh_backward(g, c["pool1_out"])
        g = maxpool_backward(g, c["pool1"])
        g, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward(g, c["bn1"], self.bn1)
        gw1, _ = conv_backward(g, c["cols1"], self.conv1, wb1, c["x"].shape[-2:], need_input_grad=False)
        grads["w1"] = ste_backward(gw1, self.w1, self.t_clip)
        return grads

    # named access used by the optimizer loop
    def get_param(self, name: str) -> np.ndarray:
        if name.startswith("bn"):
            layer, attr = name.split(".")
            return getattr(getattr(self, layer), attr)
        return getattr(self, name)

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name.startswith("bn"):
            layer, attr = name.split(".")
            setattr(getattr(self, layer), attr, value)
        else:
            setattr(self, name, value)

    def predict_logits(self, images, backend=None, batch_size: int = 1000) -> np.ndarray:
        out = [self.forward(images[i : i + batch_size], backend)[0] for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))

    def predict(self, images, backend=None, batch_size: int = 1000) -> np.ndarray:
        return self.predict_logits(images, backend, batch_size).argmax(axis=1)


PARAM_NAMES = ("w1", "w2", "fc", "bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta")
BINARIZED = ("w1", "w2")


def evaluate(model: NetworkModel, images, labels, backend=None, batch_size: int = 1000) -> float:
    """Fraction of samples whose arg-max logit equals the label."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = model.predict(images, backend, batch_size)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# optimizers

ADAGRAD = "adagrad"
ADAM = "adam"
SGD = "sgd"
OPTIMIZER_KINDS = (ADAGRAD, ADAM, SGD)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    lr: float
    batch_size: int
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not 0 <= self.lr < 1:
            raise ValueError(f"learning rate must lie in [0, 1), got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.momentum < 0:
            raise ValueError("momentum must be >= 0")


# presets keyed by the CLI and report name
OPTIMIZER_PRESETS = {
    "adagrad": dict(kind=ADAGRAD),
    "adam": dict(kind=ADAM),
    "sgd": dict(kind=SGD, momentum=0.0),
    "sgd-m0.8": dict(kind=SGD, momentum=0.8),
}
ADAGRAD_EPS = 1e-10


def make_optimizer_config(name: str, lr: float, batch_size: int) -> OptimizerConfig:
    if name not in OPTIMIZER_PRESETS:
        raise ValueError(f"unknown optimizer preset {name!r}; choose from {sorted(OPTIMIZER_PRESETS)}")
    return OptimizerConfig(lr=lr, batch_size=int(batch_size), **OPTIMIZER_PRESETS[name])


class Optimizer:
    """Per-parameter AdaGrad / Adam / SGD-with-momentum state."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.state: dict[str, dict] = {}

    def step(self, name: str, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        cfg = self.config
        s = self.state.setdefault(name, {})
        if cfg.kind == SGD:
            if cfg.momentum:
                v = s["velocity"] = cfg.momentum * s.get("velocity", 0.0) + g
            else:
                v = g
            return w - cfg.lr * v
        if cfg.kind == ADAGRAD:
            acc = s["sum_sq"] = s.get("sum_sq", 0.0) + g * g
            return w - cfg.lr * g / (np.sqrt(acc) + ADAGRAD_EPS)
        t = s["t"] = s.get("t", 0) + 1
        m = s["m"] = cfg.beta1 * s.get("m", 0.0) + (1 - cfg.beta1) * g
        v = s["v"] = cfg.beta2 * s.get("v", 0.0) + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        return w - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_step(config: OptimizerConfig, state: dict, w, g) -> np.ndarray:
    """Functional form of a single-parameter update; ``state`` is mutated."""
    opt = Optimizer(config)
    opt.state = {"w": state}
    return opt.step("w", np.asarray(w, dtype=np.float64), np.asarray(g, dtype=np.float64))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: Optional[float] = None


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


@dataclass
class Trainer:
    """Owns the optimizer state and full-precision update accumulators of a model.

    Updates are computed on float64 accumulators, the binarized shadow weights
    are clipped to ``t_clip``, and the result is rounded to the model's storage
    format after every step. Keeping the accumulators means steps smaller than
    half a Q0.7 LSB still add up instead of being rounded away.
    """

    model: NetworkModel
    config: OptimizerConfig
    seed: int = 0
    epoch: int = 0
    optimizer: Optimizer = field(init=False)
    masters: dict = field(init=False)
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.optimizer = Optimizer(self.config)
        self.masters = {n: np.array(self.model.get_param(n), dtype=np.float64) for n in PARAM_NAMES}
        self.rng = np.random.default_rng(self.seed)

    def apply(self, grads: dict[str, np.ndarray]) -> None:
        model = self.model
        bound = clip_bound(model.t_clip, model.representation)
        for name in PARAM_NAMES:
            w = self.optimizer.step(name, self.masters[name], grads[name])
            if name in BINARIZED:
                w = np.clip(w, -bound, bound)
            elif name == "fc" and model.representation == FP8:
                w = np.clip(w, fixedpoint.VALUE_MIN, fixedpoint.VALUE_MAX)
            if name.startswith("bn"):
                stored = np.asarray(w, dtype=np.float32)
            else:
                stored = store(w, model.representation)
            if model.representation == FR32 or name.startswith("bn"):
                w = stored.astype(np.float64)
            self.masters[name] = w
            model.set_param(name, stored)

    def train_step(self, x, y) -> tuple[float, int]:
        logits, cache = self.model.forward(x, training=True)
        loss, grad = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} in epoch {self.epoch + 1}")
        self.apply(self.model.backward(grad, cache))
        return loss, int((logits.argmax(axis=1) == y).sum())

    def train_epoch(self, images, labels) -> EpochMetrics:
        n = len(images)
        total_loss, correct = 0.0, 0
        for idx in iterate_batches(n, self.config.batch_size, self.rng):
            loss, hits = self.train_step(images[idx], labels[idx])
            total_loss += loss * len(idx)
            correct += hits
        self.epoch += 1
        return EpochMetrics(self.epoch, total_loss / n, correct / n)


def train(model: NetworkModel, config: OptimizerConfig, images, labels, epochs: int, seed: int = 0,
          val_images=None, val_labels=None,
          callback: Optional[Callable[[EpochMetrics], None]] = None) -> list[EpochMetrics]:
    """Train in place for ``epochs`` epochs; returns per-epoch metrics."""
    trainer = Trainer(model, config, seed)
    history = []
    for _ in range(epochs):
        metrics = trainer.train_epoch(images, labels)
        if val_images is not None:
            metrics.val_accuracy = evaluate(model, val_images, val_labels)
        history.append(metrics)
        if callback:
            callback(metrics)
    return history


def train_epoch(model: NetworkModel, images, labels, config: OptimizerConfig, seed: int = 0) -> EpochMetrics:
    """One epoch with a fresh trainer (no optimizer state carried over)."""
    return Trainer(model, config, seed).train_epoch(images, labels)
