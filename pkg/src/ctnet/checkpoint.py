"""Checkpoint files.

Layout (all integers little-endian)::

    b"DCNN"                 magic
    u16                     format version (1)
    u64                     manifest length in bytes
    manifest                UTF-8 JSON
    blob blob ...           tensor blobs (see ctnet.tensor.to_blob)

The manifest records the network spec, epoch, dropout RNG state, optimizer
hyperparameters, free-form training state, and a tensor directory whose
``offset`` fields count bytes from the start of the blob section.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import FormatError, TruncatedError, VersionError
from .network import Network, NetworkSpec, build_network
from .optim import OPTIMIZERS
from .tensor import SeededRng, from_blob, to_blob

MAGIC = b"DCNN"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")


class Checkpoint(NamedTuple):
    net: Network
    optimizer: object
    epoch: int
    extra: dict


def _tensor_groups(net: Network, optimizer) -> list[tuple[str, str, np.ndarray]]:
    groups = [("param", k, v) for k, v in net.params().items()]
    groups += [("buffer", k, v) for k, v in net.buffers().items()]
    if optimizer is not None:
        groups += [("optim", k, v) for k, v in sorted(optimizer.tensors().items())]
    return groups


def checkpoint_bytes(net: Network, optimizer, epoch: int, extra: Optional[dict] = None) -> bytes:
    directory = []
    blobs = []
    pos = 0
    for group, name, arr in _tensor_groups(net, optimizer):
        blob = to_blob(arr)
        directory.append(
            {"group": group, "name": name, "shape": list(arr.shape), "offset": pos, "nbytes": len(blob)}
        )
        blobs.append(blob)
        pos += len(blob)
    manifest = {
        "spec": net.spec.to_dict(),
        "epoch": int(epoch),
        "seed": net.rng.seed,
        "rng_counter": net.rng.counter,
        "optimizer": optimizer.hyperparameters() if optimizer is not None else None,
        "extra": extra or {},
        "tensors": directory,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)


def save_checkpoint(net: Network, optimizer, epoch: int, path, extra: Optional[dict] = None) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    path = Path(path)
    data = checkpoint_bytes(net, optimizer, epoch, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def read_manifest(buf: bytes) -> tuple[dict, int]:
    if bytes(buf[:4]) != MAGIC:
        raise FormatError(f"not a checkpoint file (magic {bytes(buf[:4])!r}, expected {MAGIC!r})")
    if len(buf) < _HEADER.size:
        raise TruncatedError("checkpoint header is truncated")
    _, version, length = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    start = _HEADER.size
    if start + length > len(buf):
        raise TruncatedError("checkpoint manifest is truncated")
    try:
        manifest = json.loads(bytes(buf[start : start + length]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc}") from None
    return manifest, start + length


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    manifest, data_start = read_manifest(buf)
    try:
        spec = NetworkSpec.from_dict(manifest["spec"])
        entries = manifest["tensors"]
    except KeyError as exc:
        raise FormatError(f"checkpoint manifest lacks {exc}") from None
    net = build_network(spec, SeededRng(0))
    net.rng = SeededRng(int(manifest["seed"]), int(manifest["rng_counter"]))
    params, buffers = net.params(), net.buffers()
    optim_tensors = {}
    for entry in entries:
        arr, end = from_blob(buf, data_start + entry["offset"])
        if end - data_start - entry["offset"] != entry["nbytes"]:
            raise FormatError(f"tensor {entry['name']!r} size disagrees with the manifest")
        arr = arr.reshape(entry["shape"])
        group, name = entry["group"], entry["name"]
        if group == "optim":
            optim_tensors[name] = arr.copy()
            continue
        target = (params if group == "param" else buffers).get(name)
        if target is None or target.shape != arr.shape:
            raise FormatError(f"checkpoint tensor {name!r} does not match the network spec")
        target[...] = arr
    missing = (set(params) | set(buffers)) - {e["name"] for e in entries}
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
    optimizer = None
    hyper = manifest.get("optimizer")
    if hyper is not None:
        cls = OPTIMIZERS.get(hyper.get("name"))
        if cls is None:
            raise FormatError(f"unknown optimizer {hyper.get('name')!r} in checkpoint")
        optimizer = cls.restore(hyper, optim_tensors)
    return Checkpoint(net, optimizer, int(manifest["epoch"]), manifest.get("extra", {}))
