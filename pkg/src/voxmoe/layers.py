"""Dense 2D convolution layers and small nonlinearity helpers.

Shared by the image branch and the BEV detection head.  Convolutions are
zero-padded cross-correlations with stride 1 and odd kernels, so spatial
dimensions are preserved.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, UnsupportedKernelError

ACTIVATIONS = ("relu", "identity")


@dataclasses.dataclass(frozen=True)
class Conv2dLayer:
    weights: np.ndarray  # (kh, kw, c_in, c_out)
    bias: Optional[np.ndarray] = None
    activation: str = "relu"

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 4:
            raise ShapeError(f"conv2d weights must be 4-D, got shape {w.shape}")
        if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise UnsupportedKernelError(f"conv2d kernel must be odd, got {w.shape[:2]}")
        bias = self.bias
        if bias is not None:
            bias = np.asarray(bias, dtype=np.float64).ravel()
            if bias.shape[0] != w.shape[3]:
                raise ShapeError("conv2d bias length != out channels")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", bias)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


def conv2d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-padded stride-1 cross-correlation of (H, W, C_in) with (kh, kw, C_in, C_out)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != weights.shape[2]:
        raise ShapeError(f"input shape {x.shape} does not match weights {weights.shape}")
    kh, kw = weights.shape[:2]
    rh, rw = kh // 2, kw // 2
    h, w = x.shape[:2]
    padded = np.pad(x, ((rh, rh), (rw, rw), (0, 0)))
    out = np.zeros((h, w, weights.shape[3]), np.float64)
    for dh in range(kh):
        for dw in range(kw):
            out += padded[dh:dh + h, dw:dw + w, :] @ weights[dh, dw]
    if bias is not None:
        out = out + bias
    return out


def apply_activation(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def apply_conv2d_stack(x: np.ndarray, layers: Sequence[Conv2dLayer]) -> np.ndarray:
    for i, layer in enumerate(layers):
        if x.shape[2] != layer.in_channels:
            raise ShapeError(
                f"layer {i}: input has {x.shape[2]} channels, expects {layer.in_channels}")
        x = apply_activation(conv2d(x, layer.weights, layer.bias), layer.activation)
    return x


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalized exponentials along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)
