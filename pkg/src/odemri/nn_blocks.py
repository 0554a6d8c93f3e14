"""3x3 convolutions, activations and the block dynamics f(L, theta), each
with a hand-written backward pass.

Feature maps are float64 arrays shaped (B, C, H, W). Every convolution is
"same" size: stride 1, zero padding 1, cross-correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ShapeMismatchError

__all__ = [
    "ConvParams",
    "BlockLayout",
    "conv2d_forward",
    "conv2d_backward",
    "activation_forward",
    "activation_backward",
    "dynamics_f",
    "dynamics_f_backward",
    "init_conv",
    "ACTIVATIONS",
]

KERNEL = 3
ACTIVATIONS = ("relu", "tanh", "softplus")


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # (out, in, 3, 3)
    bias: np.ndarray  # (out,)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


def init_conv(rng: np.random.Generator, out_channels: int, in_channels: int) -> ConvParams:
    """Uniform fan-in init on [-s, s], s = 1/sqrt(9 * in_channels); zero bias."""
    s = 1.0 / np.sqrt(in_channels * KERNEL * KERNEL)
    w = rng.uniform(-s, s, size=(out_channels, in_channels, KERNEL, KERNEL))
    return ConvParams(w, np.zeros(out_channels))


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatchError(f"feature map must be (C,H,W) or (B,C,H,W), got {x.shape}")
    return x, False


def _im2col(x):
    # (B, C, H, W) -> (C*9, B*H*W), row order (c, kh, kw) to match weight.reshape(out, -1)
    b, c, h, w = x.shape
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack(
        [xp[:, :, i : i + h, j : j + w] for i in range(KERNEL) for j in range(KERNEL)], axis=1
    )
    return cols.reshape(c * KERNEL * KERNEL, b * h * w)


def _col2im(cols, shape):
    b, c, h, w = shape
    cols = cols.reshape(c, KERNEL, KERNEL, b, h, w)
    xp = np.zeros((c, b, h + 2, w + 2))
    for i in range(KERNEL):
        for j in range(KERNEL):
            xp[:, :, i : i + h, j : j + w] += cols[:, i, j]
    return xp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)


def conv2d_forward(x, params: ConvParams):
    """Returns ``(out, cache)``; ``cache`` feeds :func:`conv2d_backward`."""
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != params.in_channels:
        raise ShapeMismatchError(
            f"input has {xb.shape[1]} channels, conv expects {params.in_channels}"
        )
    b, _, h, w = xb.shape
    cols = _im2col(xb)
    wm = params.weight.reshape(params.out_channels, -1)
    out = (wm @ cols + params.bias[:, None]).reshape(params.out_channels, b, h, w)
    out = out.transpose(1, 0, 2, 3)
    cache = (xb.shape, cols, params, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(cache, grad_out):
    """Returns ``(grad_input, ConvParams_of_gradients)``."""
    shape, cols, params, squeeze = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g[None]
    b, _, h, w = shape
    if g.shape != (b, params.out_channels, h, w):
        raise ShapeMismatchError(f"grad_out shape {g.shape} does not match forward output")
    gm = g.transpose(1, 0, 2, 3).reshape(params.out_channels, -1)
    wm = params.weight.reshape(params.out_channels, -1)
    dw = (gm @ cols.T).reshape(params.weight.shape)
    db = gm.sum(axis=1)
    dx = _col2im(wm.T @ gm, shape)
    return (dx[0] if squeeze else dx), ConvParams(dw, db)


def activation_forward(x, kind: str):
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softplus":
        return np.logaddexp(0.0, x)
    raise InvalidArgumentError(f"unknown activation {kind!r}")


def activation_backward(x, grad_out, kind: str):
    """Gradient w.r.t. the activation *input* ``x``. relu'(0) is taken as 0."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return grad_out * (x > 0.0)
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1.0 - t * t)
    if kind == "softplus":
        # logistic sigmoid, written to avoid overflow for large |x|
        return grad_out * np.exp(-np.logaddexp(0.0, -x))
    raise InvalidArgumentError(f"unknown activation {kind!r}")


class BlockLayout:
    """Packing of a block's two convolutions into one flat parameter vector.

    Order: conv1.weight, conv1.bias, conv2.weight, conv2.bias.
    """

    def __init__(self, channels: int):
        if channels < 1:
            raise InvalidArgumentError("channels must be >= 1")
        self.channels = channels
        nw = channels * channels * KERNEL * KERNEL
        self._wshape = (channels, channels, KERNEL, KERNEL)
        self.slices = {
            "conv1.weight": slice(0, nw),
            "conv1.bias": slice(nw, nw + channels),
            "conv2.weight": slice(nw + channels, 2 * nw + channels),
            "conv2.bias": slice(2 * nw + channels, 2 * nw + 2 * channels),
        }
        self.size = 2 * nw + 2 * channels

    def unflatten(self, theta) -> tuple[ConvParams, ConvParams]:
        theta = np.asarray(theta)
        if theta.shape != (self.size,):
            raise ShapeMismatchError(f"theta has shape {theta.shape}, expected ({self.size},)")
        s = self.slices
        c1 = ConvParams(theta[s["conv1.weight"]].reshape(self._wshape), theta[s["conv1.bias"]])
        c2 = ConvParams(theta[s["conv2.weight"]].reshape(self._wshape), theta[s["conv2.bias"]])
        return c1, c2

    def flatten(self, conv1: ConvParams, conv2: ConvParams) -> np.ndarray:
        return np.concatenate(
            [conv1.weight.ravel(), conv1.bias.ravel(), conv2.weight.ravel(), conv2.bias.ravel()]
        )

    def weight_mask(self) -> np.ndarray:
        """1.0 at weight entries, 0.0 at biases."""
        m = np.zeros(self.size)
        m[self.slices["conv1.weight"]] = 1.0
        m[self.slices["conv2.weight"]] = 1.0
        return m

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return self.flatten(init_conv(rng, self.channels, self.channels), init_conv(rng, self.channels, self.channels))


def dynamics_f(L, theta, layout: BlockLayout, kind: str = "relu"):
    """f(L, theta) = conv2(act(conv1(L))). Returns ``(out, cache)``."""
    Lb, _ = _as_batch(L)
    if Lb.shape[1] != layout.channels:
        raise ShapeMismatchError(f"state has {Lb.shape[1]} channels, block expects {layout.channels}")
    c1, c2 = layout.unflatten(theta)
    z, cache1 = conv2d_forward(L, c1)
    a = activation_forward(z, kind)
    out, cache2 = conv2d_forward(a, c2)
    return out, (layout, kind, cache1, z, cache2)


def dynamics_f_backward(cache, grad_out):
    """Returns ``(grad_L, grad_theta)`` with ``grad_theta`` flat like ``theta``."""
    layout, kind, cache1, z, cache2 = cache
    ga, g2 = conv2d_backward(cache2, grad_out)
    gz = activation_backward(z, ga, kind)
    gL, g1 = conv2d_backward(cache1, gz)
    return gL, layout.flatten(g1, g2)
