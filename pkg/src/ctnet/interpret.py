"""Activation grids and Grad-CAM heatmaps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import bilinear_resize, png_bytes
from .errors import ConfigError
from .network import Network

# Ramp anchors at indices 0, 85, 170, 255: blue, green, yellow, red.
RAMP_ANCHORS = ((0, (0, 0, 255)), (85, (0, 255, 0)), (170, (255, 255, 0)), (255, (255, 0, 0)))


def color_ramp() -> np.ndarray:
    """The 256x3 uint8 heat ramp.

    Entry ``i`` between anchors ``(a, ca)`` and ``(b, cb)`` is
    ``(ca*(b-i) + cb*(i-a) + (b-a)//2) // (b-a)`` per channel, integer
    arithmetic only, so the table is identical everywhere.
    """
    table = np.zeros((256, 3), dtype=np.uint8)
    for (a, ca), (b, cb) in zip(RAMP_ANCHORS, RAMP_ANCHORS[1:]):
        span = b - a
        for i in range(a, b + 1):
            table[i] = [(x * (b - i) + y * (i - a) + span // 2) // span for x, y in zip(ca, cb)]
    return table


RAMP = color_ramp()


def _as_batch(net: Network, image: np.ndarray) -> np.ndarray:
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ConfigError(f"expected one (c, h, w) image, got shape {np.shape(image)}")
    return x


@dataclass
class ActivationGrid:
    layer_index: int
    tiles: np.ndarray  # (channels, h, w) uint8
    rows: int
    cols: int

    @property
    def image(self) -> np.ndarray:
        c, h, w = self.tiles.shape
        out = np.zeros((self.rows * h, self.cols * w), dtype=np.uint8)
        for k in range(c):
            r, q = divmod(k, self.cols)
            out[r * h : (r + 1) * h, q * w : (q + 1) * w] = self.tiles[k]
        return out

    def png(self) -> bytes:
        return png_bytes(self.image)


def normalize_channels(planes: np.ndarray) -> np.ndarray:
    """Min-max each plane to 0..255; constant planes become mid-gray (128)."""
    planes = planes.astype(np.float64)
    lo = planes.min(axis=(1, 2), keepdims=True)
    hi = planes.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    scaled = np.divide(planes - lo, span, out=np.full_like(planes, 128 / 255), where=span > 0)
    return np.clip(np.floor(scaled * 255 + 0.5), 0, 255).astype(np.uint8)


def activation_grid(net: Network, image: np.ndarray, layer_index: int) -> ActivationGrid:
    """Tile the post-activation output of a conv or pool layer, row-major.

    The grid has ``ceil(sqrt(c))`` columns and as many rows as needed.
    """
    if not 0 <= layer_index < len(net.layers):
        raise ConfigError(f"layer index {layer_index} outside 0..{len(net.layers) - 1}")
    kind = net.layers[layer_index].kind
    if kind not in ("conv", "maxpool"):
        raise ConfigError(f"layer {layer_index} is {kind!r}; activation grids need a conv or maxpool layer")
    net.eval()
    _, captured = net.forward(_as_batch(net, image), capture=[layer_index])
    tiles = normalize_channels(captured[layer_index][0])
    c = tiles.shape[0]
    cols = math.ceil(math.sqrt(c))
    return ActivationGrid(layer_index, tiles, math.ceil(c / cols), cols)


@dataclass
class Heatmap:
    values: np.ndarray  # (h, w) in [0, 1]
    class_index: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])


def last_conv_index(net: Network) -> int:
    for i in range(len(net.layers) - 1, -1, -1):
        if net.layers[i].kind == "conv":
            return i
    raise ConfigError("network has no conv layer; Grad-CAM needs one")


def grad_cam_raw(net: Network, image: np.ndarray, class_index: int) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum at the last conv block, before upsampling."""
    conv = last_conv_index(net)
    k = net.spec.num_classes
    if not 0 <= class_index < k:
        raise ConfigError(f"class index {class_index} outside 0..{k - 1}")
    tap = net.output_index(conv)
    net.eval()
    logits, captured = net.forward(_as_batch(net, image), capture=[conv])
    feats = captured[conv][0].astype(np.float64)
    onehot = np.zeros_like(logits)
    onehot[0, class_index] = 1
    grads = net.backward_from(onehot, stop=tap + 1)[0].astype(np.float64)
    weights = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, feats, axes=1), 0)


def grad_cam(net: Network, image: np.ndarray, class_index: int) -> Heatmap:
    """Grad-CAM at the last conv block, upsampled to the input size and max-normalized."""
    raw = grad_cam_raw(net, image, class_index)
    h, w = net.spec.input_shape[1:]
    up = np.maximum(bilinear_resize(raw, h, w), 0)
    peak = up.max()
    if peak > 0:
        up = up / peak
    return Heatmap(up, class_index)


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Blend the heat ramp over ``image``: ``(1-alpha)*image + alpha*ramp(h)``.

    ``image`` is (h, w) or (h, w, 3) uint8; the result is (h, w, 3) uint8.
    Heat values index the ramp at ``floor(255*h + 0.5)``.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    hm = np.asarray(heatmap, dtype=np.float64)
    if img.shape[:2] != hm.shape:
        raise ConfigError(f"heatmap {hm.shape} does not match image {img.shape[:2]}")
    if not 0 <= alpha <= 1:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    idx = np.clip(np.floor(hm * 255 + 0.5), 0, 255).astype(np.int64)
    colors = RAMP[idx].astype(np.float64)
    mixed = (1 - alpha) * img.astype(np.float64) + alpha * colors
    return np.clip(np.floor(mixed + 0.5), 0, 255).astype(np.uint8)


def overlay_png(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.4) -> bytes:
    return png_bytes(overlay(image, heatmap, alpha))
