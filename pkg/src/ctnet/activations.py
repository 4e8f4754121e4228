"""Elementwise activations and their derivatives.

=======  ==============================================================
name     definition
=======  ==============================================================
relu     max(0, x)
gelu     x * Phi(x),  Phi(x) = (1 + erf(x / sqrt 2)) / 2   (exact form)
selu     scale * (x if x > 0 else alpha * (exp(x) - 1)),
         alpha = 1.6732632423543772, scale = 1.0507009873554805
mish     x * tanh(softplus(x)),  softplus(x) = ln(1 + exp(x))
swish    x * sigmoid(x)
lisht    x * tanh(x)
=======  ==============================================================

softplus switches to its asymptotes for |x| > 20 (x above, exp(x) below)
so mish stays finite for any finite input.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError

ACTIVATIONS = ("relu", "gelu", "selu", "mish", "swish", "lisht")
DEFAULT_ACTIVATION = "mish"

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
SOFTPLUS_THRESHOLD = 20.0

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    mid = np.clip(x, -SOFTPLUS_THRESHOLD, SOFTPLUS_THRESHOLD)
    out = np.log1p(np.exp(mid))
    out = np.where(x > SOFTPLUS_THRESHOLD, x, out)
    low = np.exp(np.minimum(x, -SOFTPLUS_THRESHOLD))
    return np.where(x < -SOFTPLUS_THRESHOLD, low, out).astype(x.dtype, copy=False)


def _relu(x):
    return np.maximum(x, 0)


def _relu_grad(x):
    return (x > 0).astype(x.dtype)


def _gelu(x):
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _selu(x):
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0))
    return SELU_SCALE * np.where(x > 0, x, neg)


def _selu_grad(x):
    return SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0)))


def _mish(x):
    return x * np.tanh(softplus(x))


def _mish_grad(x):
    t = np.tanh(softplus(x))
    # d softplus / dx = sigmoid(x)
    return t + x * (1.0 - t * t) * expit(x)


def _swish(x):
    return x * expit(x)


def _swish_grad(x):
    s = expit(x)
    return s + x * s * (1.0 - s)


def _lisht(x):
    return x * np.tanh(x)


def _lisht_grad(x):
    t = np.tanh(x)
    return t + x * (1.0 - t * t)


_TABLE: dict[str, tuple[Callable, Callable]] = {
    "relu": (_relu, _relu_grad),
    "gelu": (_gelu, _gelu_grad),
    "selu": (_selu, _selu_grad),
    "mish": (_mish, _mish_grad),
    "swish": (_swish, _swish_grad),
    "lisht": (_lisht, _lisht_grad),
}


def check_kind(kind: str) -> str:
    if kind not in _TABLE:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {', '.join(ACTIVATIONS)}")
    return kind


def apply_activation(kind: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return _TABLE[check_kind(kind)][0](x).astype(x.dtype, copy=False)


def activation_with_grad(kind: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and derivative together, sharing the transcendental work for mish."""
    x = np.asarray(x)
    if check_kind(kind) != "mish":
        return apply_activation(kind, x), activation_grad(kind, x)
    sp = softplus(x)
    t = np.tanh(sp)
    y = x * t
    # sigmoid(x) = 1 - exp(-softplus(x))
    dy = t + x * (1.0 - t * t) * -np.expm1(-sp)
    return y.astype(x.dtype, copy=False), dy.astype(x.dtype, copy=False)


def activation_grad(kind: str, x: np.ndarray) -> np.ndarray:
    """Derivative of ``kind`` evaluated at the pre-activation ``x``."""
    x = np.asarray(x)
    return _TABLE[check_kind(kind)][1](x).astype(x.dtype, copy=False)
