"""Sequential networks: layer specs, validation, construction and passes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional

import numpy as np

from .activations import DEFAULT_ACTIVATION, check_kind
from .errors import ConfigError, StateError, UnknownLayerError
from .layers import (
    BN_EPSILON,
    BN_MOMENTUM,
    DROPOUT_RATE,
    Activation,
    BatchNorm,
    BatchNormState,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool,
    Rescale,
    out_extent,
    softmax_cross_entropy,
    softmax_cross_entropy_grad,
)
from .tensor import DEFAULT_DTYPE, SeededRng

LAYER_KINDS = ("rescale", "conv", "batchnorm", "activation", "maxpool", "dropout", "flatten", "dense")
SPATIAL_KINDS = ("conv", "maxpool")
CLASS_NAMES = ("Normal", "Pneumonia", "COVID-19")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network; only the fields its kind uses matter."""

    kind: str
    channels: Optional[int] = None  # conv output channels
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    window: int = 2  # maxpool
    units: Optional[int] = None  # dense
    rate: float = DROPOUT_RATE
    activation: str = DEFAULT_ACTIVATION
    scale: float = 1 / 255
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def to_dict(self) -> dict:
        keep = {
            "rescale": ("scale",),
            "conv": ("channels", "kernel", "stride", "padding"),
            "batchnorm": ("momentum", "epsilon"),
            "activation": ("activation",),
            "maxpool": ("window", "stride"),
            "dropout": ("rate",),
            "flatten": (),
            "dense": ("units",),
        }[self.kind]
        d = asdict(self)
        return {"kind": self.kind, **{k: d[k] for k in keep}}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kind = d.get("kind")
        if kind not in LAYER_KINDS:
            raise UnknownLayerError(f"unknown layer kind {kind!r}")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise UnknownLayerError(f"layer {kind!r} has unknown fields {sorted(extra)}")
        return cls(**d)


def conv(channels, kernel=3, stride=1, padding=1) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride, padding=padding)


def dense(units) -> LayerSpec:
    return LayerSpec("dense", units=units)


def maxpool(window=2, stride=None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=stride or window)


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def activation(kind=DEFAULT_ACTIVATION) -> LayerSpec:
    return LayerSpec("activation", activation=kind)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (3, 128, 128)  # (c, h, w)
    num_classes: int = 3

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            tuple(LayerSpec.from_dict(layer) for layer in d["layers"]),
            tuple(d["input_shape"]),
            int(d.get("num_classes", 3)),
        )


REFERENCE_WIDTHS = (8, 16, 32, 48, 64, 96)
REFERENCE_DENSE_UNITS = 112


def reference_spec(
    activation_kind: str = DEFAULT_ACTIVATION,
    dropout_rate: float = DROPOUT_RATE,
    image_size: int = 128,
    widths: Iterable[int] = REFERENCE_WIDTHS,
    dense_units: int = REFERENCE_DENSE_UNITS,
    bn_momentum: float = BN_MOMENTUM,
) -> NetworkSpec:
    """Rescale, six conv/bn/act/pool blocks, dense/bn/act/dropout, 3-way head.

    With the default widths the batch-norm features total
    8+16+32+48+64+96+112 = 376, i.e. 752 moving statistics.
    """
    bn = LayerSpec("batchnorm", momentum=bn_momentum)
    layers = [LayerSpec("rescale")]
    for w in widths:
        layers += [conv(w), bn, activation(activation_kind), maxpool(2)]
    layers += [
        LayerSpec("flatten"),
        dense(dense_units),
        bn,
        activation(activation_kind),
        LayerSpec("dropout", rate=dropout_rate),
        dense(3),
    ]
    return NetworkSpec(tuple(layers), (3, image_size, image_size), 3)


def validate_spec(spec: NetworkSpec, batchnorm_rule: bool = False) -> list[tuple[int, int, int]]:
    """Check a spec and return the (c, h, w) output shape of every layer.

    ``batchnorm_rule`` additionally requires a batch norm directly after every
    conv and after the first dense layer, as in the reference design.
    """
    c, h, w = spec.input_shape
    if min(c, h, w) < 1:
        raise ConfigError(f"input shape must be positive, got {spec.input_shape}")
    if not spec.layers:
        raise ConfigError("network spec has no layers")
    shapes = []
    seen_dense = False
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"{where}: unknown layer kind")
        if layer.kind == "rescale" and i != 0:
            raise ConfigError(f"{where}: rescale may only be the first layer")
        if layer.kind == "conv":
            if not layer.channels or layer.channels < 1 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                raise ConfigError(f"{where}: invalid conv hyperparameters {layer.to_dict()}")
            oh = out_extent(h, layer.kernel, layer.stride, layer.padding)
            ow = out_extent(w, layer.kernel, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise ConfigError(f"{where}: {layer.kernel}x{layer.kernel} kernel does not fit {h}x{w} input")
            c, h, w = layer.channels, oh, ow
        elif layer.kind == "maxpool":
            if layer.window < 1 or layer.stride < 1 or layer.window > min(h, w):
                raise ConfigError(f"{where}: pool window {layer.window} does not fit {h}x{w} input")
            h, w = out_extent(h, layer.window, layer.stride), out_extent(w, layer.window, layer.stride)
        elif layer.kind == "flatten":
            c, h, w = c * h * w, 1, 1
        elif layer.kind == "dense":
            if h != 1 or w != 1:
                raise ConfigError(f"{where}: needs flattened input, previous output is {c}x{h}x{w}")
            if not layer.units or layer.units < 1:
                raise ConfigError(f"{where}: units must be >= 1")
            c = layer.units
        elif layer.kind == "activation":
            try:
                check_kind(layer.activation)
            except ConfigError as exc:
                raise ConfigError(f"{where}: {exc}") from None
        elif layer.kind == "dropout":
            if not 0 <= layer.rate < 1:
                raise ConfigError(f"{where}: dropout rate must be in [0, 1)")
        elif layer.kind == "batchnorm":
            if not 0 < layer.momentum < 1 or layer.epsilon <= 0:
                raise ConfigError(f"{where}: momentum must be in (0, 1) and epsilon > 0")
        if batchnorm_rule and (layer.kind == "conv" or (layer.kind == "dense" and not seen_dense)):
            nxt = spec.layers[i + 1] if i + 1 < len(spec.layers) else None
            if nxt is None or nxt.kind != "batchnorm":
                raise ConfigError(f"{where}: must be followed by a batchnorm layer")
        seen_dense |= layer.kind == "dense"
        shapes.append((c, h, w))
    last = spec.layers[-1]
    if last.kind != "dense" or last.units != spec.num_classes:
        raise ConfigError(
            f"layer {len(spec.layers) - 1} ({last.kind}): network must end in a dense layer "
            f"with {spec.num_classes} units"
        )
    return shapes


def layer_param_shapes(layer: LayerSpec, in_channels: int) -> tuple[dict, dict]:
    """(trainable, non-trainable) parameter shapes for a layer fed ``in_channels``."""
    if layer.kind == "conv":
        k = layer.kernel
        return {"kernels": (layer.channels, in_channels, k, k), "bias": (layer.channels,)}, {}
    if layer.kind == "dense":
        return {"weights": (layer.units, in_channels), "bias": (layer.units,)}, {}
    if layer.kind == "batchnorm":
        return (
            {"gamma": (in_channels,), "beta": (in_channels,)},
            {"moving_mean": (in_channels,), "moving_var": (in_channels,)},
        )
    return {}, {}


def _he_uniform(rng: SeededRng, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return ((2.0 * rng.uniform(shape) - 1.0) * limit).astype(dtype)


def _make_layer(layer: LayerSpec, in_channels: int, rng: SeededRng, dtype) -> Layer:
    kind = layer.kind
    if kind == "rescale":
        return Rescale(layer.scale)
    if kind == "conv":
        shape = (layer.channels, in_channels, layer.kernel, layer.kernel)
        fan_in = in_channels * layer.kernel * layer.kernel
        return Conv2D(
            _he_uniform(rng, shape, fan_in, dtype), np.zeros(layer.channels, dtype),
            layer.stride, layer.padding,
        )
    if kind == "batchnorm":
        return BatchNorm(BatchNormState.fresh(in_channels, dtype, layer.momentum, layer.epsilon))
    if kind == "activation":
        return Activation(layer.activation)
    if kind == "maxpool":
        return MaxPool(layer.window, layer.stride)
    if kind == "dropout":
        return Dropout(layer.rate)
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        w = _he_uniform(rng, (layer.units, in_channels), in_channels, dtype)
        return Dense(w, np.zeros(layer.units, dtype))
    raise UnknownLayerError(f"unknown layer kind {kind!r}")


@dataclass
class Network:
    spec: NetworkSpec
    layers: list[Layer]
    rng: SeededRng
    mode: str = "inference"
    dtype: type = DEFAULT_DTYPE
    shapes: list = field(default_factory=list)
    last_logits: Optional[np.ndarray] = field(default=None, repr=False)

    # -- parameter views ---------------------------------------------------

    def _named(self, attr: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in getattr(layer, attr).items():
                out[f"{i:02d}.{layer.kind}.{name}"] = arr
        return out

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are the live parameters."""
        return self._named("params")

    def buffers(self) -> dict[str, np.ndarray]:
        return self._named("buffers")

    def train(self) -> "Network":
        self.mode = "training"
        return self

    def eval(self) -> "Network":
        self.mode = "inference"
        return self

    @property
    def training(self) -> bool:
        return self.mode == "training"

    def output_index(self, index: int) -> int:
        """Layer whose output represents ``index`` after its activation.

        A conv layer is followed through the batchnorm/activation layers of its
        block; every other layer maps to itself.
        """
        if self.layers[index].kind != "conv":
            return index
        j = index
        while j + 1 < len(self.layers) and self.layers[j + 1].kind in ("batchnorm", "activation"):
            j += 1
        return j

    # -- passes ------------------------------------------------------------

    def forward(self, batch: np.ndarray, capture: Optional[Iterable[int]] = None):
        """Run the layers; returns ``(logits, captured)``.

        ``captured`` maps each requested layer index to its post-activation
        output (see ``output_index``) and is ``None`` when nothing is requested.
        """
        expected = tuple(self.spec.input_shape)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise ConfigError(f"batch shape {batch.shape} does not match network input {expected}")
        taps = {}
        if capture is not None:
            for i in capture:
                if not 0 <= i < len(self.layers):
                    raise ConfigError(f"capture index {i} outside 0..{len(self.layers) - 1}")
                taps.setdefault(self.output_index(i), []).append(i)
        captured = {} if capture is not None else None
        x = batch.astype(self.dtype, copy=False)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, self.training, self.rng)
            for requested in taps.get(i, ()):
                captured[requested] = x
        return x.reshape(x.shape[0], -1), captured

    def backward_from(self, grad: np.ndarray, stop: int = 0, input_grad: bool = True):
        """Propagate ``grad`` (w.r.t. the logits) back to the input of layer ``stop``.

        Uses the caches of the latest forward pass in whatever mode it ran.
        With ``input_grad=False`` a conv at ``stop`` only computes its
        parameter gradients and ``None`` is returned.
        """
        g = grad.reshape(grad.shape[0], -1, 1, 1).astype(self.dtype, copy=False)
        for i in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[i]
            if i == stop and not input_grad and isinstance(layer, Conv2D):
                layer.needs_input_grad = False
                try:
                    return layer.backward(g)
                finally:
                    layer.needs_input_grad = True
            g = layer.backward(g)
        return g

    def backward(self, batch: np.ndarray, labels) -> tuple[float, dict[str, np.ndarray]]:
        """Training-mode forward + backward; returns batch-mean loss and gradients."""
        if not self.training:
            raise StateError("backward requires training mode; call net.train() first")
        logits, _ = self.forward(batch)
        self.last_logits = logits
        loss, probs = softmax_cross_entropy(logits, labels)
        first = next((i for i, layer in enumerate(self.layers) if layer.params), 0)
        self.backward_from(softmax_cross_entropy_grad(probs, np.asarray(labels)), first, input_grad=False)
        return loss, self._named("grads")


def build_network(spec: NetworkSpec, rng: SeededRng, dtype=DEFAULT_DTYPE, batchnorm_rule: bool = False) -> Network:
    """Validate ``spec`` and initialize parameters.

    Conv and dense weights are He-uniform, biases and beta zero, gamma and
    moving variance one, moving mean zero.  The dropout stream is a child of
    ``rng`` so initialization and dropout draws never overlap.
    """
    shapes = validate_spec(spec, batchnorm_rule)
    layers = []
    c = spec.input_shape[0]
    for layer, shape in zip(spec.layers, shapes):
        layers.append(_make_layer(layer, c, rng, dtype))
        c = shape[0]
    return Network(spec, layers, rng.spawn(0xD0), "inference", dtype, shapes)


def param_count(net: Network) -> tuple[int, int, int]:
    """``(total, trainable, non_trainable)`` element counts."""
    trainable = sum(a.size for a in net.params().values())
    non_trainable = sum(a.size for a in net.buffers().values())
    return trainable + non_trainable, trainable, non_trainable


def spec_param_count(spec: NetworkSpec) -> tuple[int, int, int]:
    """Parameter counts computed from a NetworkSpec alone, without allocating."""
    shapes = validate_spec(spec)
    c = spec.input_shape[0]
    trainable = non_trainable = 0
    for layer, shape in zip(spec.layers, shapes):
        t, nt = layer_param_shapes(layer, c)
        trainable += sum(int(np.prod(s)) for s in t.values())
        non_trainable += sum(int(np.prod(s)) for s in nt.values())
        c = shape[0]
    return trainable + non_trainable, trainable, non_trainable
