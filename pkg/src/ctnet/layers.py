"""Layer kernels: forward rules, backward rules and the layer objects built on them.

Convolution layers compute cross-correlation, the way every mainstream
framework does.  ``convolve2d`` (kernel rotated by 180 degrees) exists for
demonstration and for checking the duality between the two.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .activations import activation_grad, activation_with_grad, apply_activation, check_kind
from .errors import ConfigError, StateError
from .tensor import SeededRng, rot180, shape4

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
DROPOUT_RATE = 0.3


def out_extent(size: int, k: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - k) // stride + 1


def pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


# --- convolution -------------------------------------------------------------


@dataclass
class ConvParams:
    kernels: np.ndarray  # (c_out, c_in, kh, kw)
    bias: np.ndarray  # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        shape4(self.kernels)
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match kernels {self.kernels.shape}"
            )


def _conv_geometry(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    n, c, h, w = shape4(x)
    o, ci, kh, kw = p.kernels.shape
    if c != ci:
        raise ConfigError(
            f"input shape {x.shape} has {c} channels but kernels {p.kernels.shape} expect {ci}"
        )
    oh = out_extent(h, kh, p.stride, p.padding)
    ow = out_extent(w, kw, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ConfigError(
            f"kernels {p.kernels.shape} with stride {p.stride}, padding {p.padding} "
            f"do not fit input shape {x.shape}"
        )
    return oh, ow


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix of shape (n*oh*ow, c*kh*kw) from an already padded input."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im(dcols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int):
    n, c, hp, wp = padded_shape
    d = dcols.reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp


def cross_correlate2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    oh, ow = _conv_geometry(x, p)
    o, c, kh, kw = p.kernels.shape
    cols = im2col(pad2d(x, p.padding), kh, kw, p.stride, oh, ow)
    out = cols @ p.kernels.reshape(o, -1).T + p.bias
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2))


def convolve2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    flipped = ConvParams(rot180(p.kernels), p.bias, p.stride, p.padding)
    return cross_correlate2d(x, flipped)


def feature_match_score(window: np.ndarray, kernel: np.ndarray) -> float:
    """Sum of elementwise products divided by the pixel count."""
    window = np.asarray(window, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if window.shape != kernel.shape or window.ndim != 2:
        raise ConfigError(
            f"window {window.shape} and kernel {kernel.shape} must be equal single planes"
        )
    return float((window * kernel).sum() / kernel.size)


# --- pooling ------------------------------------------------------------------


def pool2d(x: np.ndarray, mode: str = "max", window: int = 2, stride: int = 2):
    """Max or average pooling without padding.

    Returns ``(out, indices)``; ``indices`` holds the flat in-window argmax
    (row-major, ``i*window + j``) for max pooling and is ``None`` for avg.
    """
    n, c, h, w = shape4(x)
    if window < 1 or stride < 1:
        raise ConfigError(f"pool window and stride must be >= 1, got {window}, {stride}")
    if window > h or window > w:
        raise ConfigError(f"pool window {window} larger than input {h}x{w}")
    if mode not in ("max", "avg"):
        raise ConfigError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    oh, ow = out_extent(h, window, stride), out_extent(w, window, stride)
    planes = [
        x[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride]
        for i in range(window)
        for j in range(window)
    ]
    if mode == "avg":
        return sum(planes[1:], planes[0].copy()) / (window * window), None
    out = planes[0].copy()
    for plane in planes[1:]:
        np.maximum(out, plane, out=out)
    # first occurrence wins, matching argmax over the row-major window
    idx = np.full(out.shape, window * window - 1, dtype=np.int64)
    for p in range(window * window - 2, -1, -1):
        idx[planes[p] == out] = p
    return out, idx


def pool2d_backward(grad, in_shape, mode, window, stride, indices=None):
    dx = np.zeros(in_shape, dtype=grad.dtype)
    oh, ow = grad.shape[2:]
    for p in range(window * window):
        i, j = divmod(p, window)
        if mode == "max":
            contrib = np.where(indices == p, grad, 0)
        else:
            contrib = grad / (window * window)
        dx[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += contrib
    return dx


# --- batch norm ---------------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def fresh(cls, c: int, dtype=np.float32, momentum=BN_MOMENTUM, epsilon=BN_EPSILON):
        return cls(
            np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype),
            momentum, epsilon,
        )


def _bcast(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def _bn_normalize(x: np.ndarray, s: BatchNormState, training: bool):
    _, c, _, _ = shape4(x)
    if s.gamma.shape != (c,):
        raise ConfigError(f"batch norm has {s.gamma.shape[0]} features, input {x.shape} has {c}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        s.moving_mean[...] = s.momentum * s.moving_mean + (1 - s.momentum) * mean
        s.moving_var[...] = s.momentum * s.moving_var + (1 - s.momentum) * var
    else:
        mean, var = s.moving_mean, s.moving_var
    inv = (1.0 / np.sqrt(var + s.epsilon)).astype(x.dtype, copy=False)
    xhat = (x - _bcast(mean).astype(x.dtype, copy=False)) * _bcast(inv)
    return _bcast(s.gamma) * xhat + _bcast(s.beta), xhat, inv


def batch_norm_forward(x: np.ndarray, s: BatchNormState, training: bool = False) -> np.ndarray:
    """Normalize per channel; in training mode also update the moving statistics in place.

    Training mode uses the biased batch variance over (n, h, w) both for
    normalizing and for the moving-variance update.
    """
    return _bn_normalize(x, s, training)[0]


# --- dropout / dense ----------------------------------------------------------


def dropout_mask(shape, rate: float, rng: SeededRng, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    keep = rng.uniform(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout(x: np.ndarray, rate: float, training: bool, rng: Optional[SeededRng]) -> np.ndarray:
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise StateError("training-mode dropout needs an rng")
    return x * dropout_mask(x.shape, rate, rng, x.dtype)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``W @ x + b`` per batch item; ``weights`` has shape (units, features)."""
    n, c, h, w = shape4(x)
    if h != 1 or w != 1:
        raise ConfigError(f"dense input must be flattened (h = w = 1), got {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != c or bias.shape != (weights.shape[0],):
        raise ConfigError(
            f"dense weights {weights.shape} / bias {bias.shape} do not match input {x.shape}"
        )
    out = x.reshape(n, c) @ weights.T + bias
    return out.reshape(n, -1, 1, 1)


# --- loss ---------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the (n, k) probability matrix."""
    z = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels, dtype=np.int64)
    k = z.shape[1]
    if labels.shape != (z.shape[0],):
        raise ConfigError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels must lie in [0, {k}), got range {labels.min()}..{labels.max()}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(len(labels)), labels] - logsum
    probs = np.exp(shifted - logsum[:, None])
    return float(-logp.mean()), probs


def per_sample_losses(logits: np.ndarray, labels) -> np.ndarray:
    z = logits.reshape(logits.shape[0], -1).astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    return logsum - shifted[np.arange(len(labels)), np.asarray(labels)]


def softmax_cross_entropy_grad(probs: np.ndarray, labels) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return (g / len(labels)).reshape(g.shape[0], -1, 1, 1)


# --- layer objects ------------------------------------------------------------


class Layer:
    """Base layer: ``params`` are trained, ``buffers`` are not.

    ``forward`` caches what ``backward`` needs; ``backward`` returns the input
    gradient and fills ``grads`` (same keys and shapes as ``params``).
    """

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.kind} backward called without a cached forward pass")
        return self._cache

    def clear_cache(self):
        self._cache = None


class Rescale(Layer):
    kind = "rescale"

    def __init__(self, scale=1 / 255):
        super().__init__()
        self.scale = scale

    def forward(self, x, training=False, rng=None):
        self._cache = True
        return x * x.dtype.type(self.scale)

    def backward(self, grad):
        self._cached()
        return grad * grad.dtype.type(self.scale)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, kernels, bias, stride=1, padding=0):
        super().__init__()
        self.params = {"kernels": kernels, "bias": bias}
        self.stride, self.padding = stride, padding
        self.needs_input_grad = True

    def conv_params(self) -> ConvParams:
        return ConvParams(self.params["kernels"], self.params["bias"], self.stride, self.padding)

    def forward(self, x, training=False, rng=None):
        p = self.conv_params()
        oh, ow = _conv_geometry(x, p)
        o, c, kh, kw = p.kernels.shape
        xp = pad2d(x, self.padding)
        cols = im2col(xp, kh, kw, self.stride, oh, ow)
        out = cols @ p.kernels.reshape(o, -1).T + p.bias
        self._cache = (cols, xp.shape, x.shape, oh, ow)
        return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2))

    def backward(self, grad):
        cols, padded_shape, in_shape, oh, ow = self._cached()
        k = self.params["kernels"]
        o, c, kh, kw = k.shape
        gm = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        self.grads = {"kernels": (gm.T @ cols).reshape(k.shape), "bias": gm.sum(axis=0)}
        if not self.needs_input_grad:
            return None
        dxp = col2im(gm @ k.reshape(o, -1), padded_shape, kh, kw, self.stride, oh, ow)
        p = self.padding
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, state: BatchNormState):
        super().__init__()
        self.params = {"gamma": state.gamma, "beta": state.beta}
        self.buffers = {"moving_mean": state.moving_mean, "moving_var": state.moving_var}
        self.momentum, self.epsilon = state.momentum, state.epsilon

    @property
    def state(self) -> BatchNormState:
        return BatchNormState(
            self.params["gamma"], self.params["beta"],
            self.buffers["moving_mean"], self.buffers["moving_var"],
            self.momentum, self.epsilon,
        )

    def forward(self, x, training=False, rng=None):
        out, xhat, inv = _bn_normalize(x, self.state, training)
        self._cache = (xhat, inv, training)
        return out

    def backward(self, grad):
        xhat, inv, training = self._cached()
        gamma = self.params["gamma"]
        self.grads = {"gamma": (grad * xhat).sum(axis=(0, 2, 3)), "beta": grad.sum(axis=(0, 2, 3))}
        dxhat = grad * _bcast(gamma)
        if not training:
            return dxhat * _bcast(inv)
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return _bcast(inv) * (dxhat - s1 / m - xhat * s2 / m)


class Activation(Layer):
    kind = "activation"

    def __init__(self, activation="mish"):
        super().__init__()
        self.activation = check_kind(activation)

    def forward(self, x, training=False, rng=None):
        if training:
            y, self._cache = activation_with_grad(self.activation, x)
            return y
        self._cache = ("x", x)
        return apply_activation(self.activation, x)

    def backward(self, grad):
        cache = self._cached()
        if isinstance(cache, tuple):
            return grad * activation_grad(self.activation, cache[1])
        return grad * cache


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = window
        self.stride = stride or window

    def forward(self, x, training=False, rng=None):
        out, idx = pool2d(x, "max", self.window, self.stride)
        self._cache = (x.shape, idx)
        return out

    def backward(self, grad):
        in_shape, idx = self._cached()
        return pool2d_backward(grad, in_shape, "max", self.window, self.stride, idx)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=DROPOUT_RATE):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0:
            self._cache = 1.0
            return x
        if rng is None:
            raise StateError("training-mode dropout needs an rng")
        self._cache = dropout_mask(x.shape, self.rate, rng, x.dtype)
        return x * self._cache

    def backward(self, grad):
        return grad * self._cached()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1, 1, 1)

    def backward(self, grad):
        return grad.reshape(self._cached())


class Dense(Layer):
    kind = "dense"

    def __init__(self, weights, bias):
        super().__init__()
        self.params = {"weights": weights, "bias": bias}

    def forward(self, x, training=False, rng=None):
        self._cache = x
        return dense_forward(x, self.params["weights"], self.params["bias"])

    def backward(self, grad):
        x = self._cached()
        n = x.shape[0]
        g = grad.reshape(n, -1)
        xm = x.reshape(n, -1)
        self.grads = {"weights": g.T @ xm, "bias": g.sum(axis=0)}
        return (g @ self.params["weights"]).reshape(x.shape)


def layer_backward(layer: Layer, inputs: np.ndarray, upstream_grad: np.ndarray):
    """Gradients of a layer whose forward pass on ``inputs`` is cached.

    Returns ``(input_grad, param_grads)``.
    """
    if layer._cache is None:
        raise StateError(f"{layer.kind} has no cached forward state")
    input_grad = layer.backward(upstream_grad)
    if input_grad.shape != inputs.shape:
        raise StateError(
            f"cached forward pass was for shape {input_grad.shape}, not {inputs.shape}"
        )
    return input_grad, dict(layer.grads)
