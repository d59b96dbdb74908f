"""Convolution lowering to a single matrix product.

Layout contract (stable, golden-tested):

* ``D_m`` has one row per output position, rows in row-major (y, x) order.
* Within a row, patch elements are channel-major, then kernel row-major:
  index ``c * k2 * k3 + r * k3 + s``.
* ``F_m`` column ``j`` is filter ``j`` flattened in that same order.
* ``O_m = D_m @ F_m`` has shape ``(M, N)`` and folds to ``(f, o1, o2)``.

Every function accepts an optional leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    """Raised for convolution geometries that do not tile the input."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ConvLayerSpec:
    """Geometry of one binarized convolution; ``padding`` is per side."""

    filters: int
    in_channels: int = 1
    kernel: tuple[int, int] = (2, 2)
    padding: int = 1
    stride: int = 1

    def __post_init__(self):
        k2, k3 = self.kernel
        if min(self.filters, self.in_channels, k2, k3, self.stride) < 1 or self.padding < 0:
            raise ConfigurationError(f"invalid convolution spec {self}")

    @property
    def patch_length(self) -> int:
        return self.in_channels * self.kernel[0] * self.kernel[1]

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        return (
            output_extent(height, self.kernel[0], self.padding, self.stride),
            output_extent(width, self.kernel[1], self.padding, self.stride),
        )


def output_extent(size: int, kernel: int, padding: int, stride: int) -> int:
    """``((size - kernel + 2 * padding) / stride) + 1``, required to be a positive integer."""
    span = size - kernel + 2 * padding
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"extent {size} with kernel {kernel}, padding {padding}, stride {stride} "
            f"gives non-integer output ({span}/{stride} + 1)"
        )
    return span // stride + 1


def _as_batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionError(f"expected {ndim}-d or batched {ndim + 1}-d array, got shape {x.shape}")


def unroll_input(x: np.ndarray, spec: ConvLayerSpec) -> np.ndarray:
    """Build ``D_m`` (M x C) from an input of shape (channels, H, W) or (B, channels, H, W)."""
    xb, single = _as_batched(np.asarray(x), 3)
    batch, channels, height, width = xb.shape
    if channels != spec.in_channels:
        raise DimensionError(f"input has {channels} channels, spec expects {spec.in_channels}")
    o1, o2 = spec.output_shape(height, width)
    k2, k3 = spec.kernel
    p, s = spec.padding, spec.stride
    padded = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k2, k3), axis=(2, 3))
    windows = windows[:, :, : (o1 - 1) * s + 1 : s, : (o2 - 1) * s + 1 : s]
    # (B, C, o1, o2, k2, k3) -> (B, o1, o2, C, k2, k3)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch, o1 * o2, spec.patch_length)
    return cols[0] if single else cols


def unroll_input_adjoint(cols: np.ndarray, spec: ConvLayerSpec, height: int, width: int) -> np.ndarray:
    """Transpose of :func:`unroll_input`: scatter-add patch rows back onto the input grid."""
    cb, single = _as_batched(np.asarray(cols), 2)
    batch = cb.shape[0]
    o1, o2 = spec.output_shape(height, width)
    k2, k3 = spec.kernel
    p, s = spec.padding, spec.stride
    if cb.shape[1:] != (o1 * o2, spec.patch_length):
        raise DimensionError(f"patch matrix shape {cb.shape[1:]} does not match spec")
    blocks = cb.reshape(batch, o1, o2, spec.in_channels, k2, k3).transpose(0, 3, 1, 2, 4, 5)
    padded = np.zeros((batch, spec.in_channels, height + 2 * p, width + 2 * p), dtype=cb.dtype)
    for r in range(k2):
        for c in range(k3):
            padded[:, :, r : r + s * o1 : s, c : c + s * o2 : s] += blocks[..., r, c]
    out = padded[:, :, p : p + height, p : p + width]
    return out[0] if single else out


def unroll_filters(filters: np.ndarray) -> np.ndarray:
    """Build ``F_m`` (C x N) from filters of shape (f, channels, k2, k3)."""
    filters = np.asarray(filters)
    if filters.ndim != 4:
        raise DimensionError(f"filters must be (f, channels, k2, k3), got {filters.shape}")
    return filters.reshape(filters.shape[0], -1).T


def fold_filters(f_m: np.ndarray, spec: ConvLayerSpec) -> np.ndarray:
    """Inverse of :func:`unroll_filters`."""
    k2, k3 = spec.kernel
    return np.asarray(f_m).T.reshape(spec.filters, spec.in_channels, k2, k3)


def fold_output(o_m: np.ndarray, out_shape: tuple[int, int], filters: int) -> np.ndarray:
    """Reshape ``O_m`` (M x N) into the convolution output (f, o1, o2)."""
    ob, single = _as_batched(np.asarray(o_m), 2)
    o1, o2 = out_shape
    if ob.shape[1:] != (o1 * o2, filters):
        raise DimensionError(f"O_m shape {ob.shape[1:]} is not ({o1 * o2}, {filters})")
    out = ob.reshape(ob.shape[0], o1, o2, filters).transpose(0, 3, 1, 2)
    return out[0] if single else out


def unfold_output(out: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fold_output`: (B, f, o1, o2) -> (B, M, N)."""
    ob, single = _as_batched(np.asarray(out), 3)
    b, f, o1, o2 = ob.shape
    cols = ob.transpose(0, 2, 3, 1).reshape(b, o1 * o2, f)
    return cols[0] if single else cols
