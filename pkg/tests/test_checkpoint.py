import json
import struct

import numpy as np
import pytest

from ctnet.checkpoint import MAGIC, checkpoint_bytes, load_checkpoint, read_manifest, save_checkpoint
from ctnet.errors import FormatError, TruncatedError, UnknownLayerError, VersionError
from ctnet.network import build_network, reference_spec
from ctnet.optim import SGD, AdaBelief
from ctnet.tensor import SeededRng


@pytest.fixture
def trained(tmp_path):
    """A small reference-style net after two AdaBelief steps (moments and BN stats non-trivial)."""
    net = build_network(reference_spec(image_size=64), SeededRng(4)).train()
    opt = AdaBelief(2e-3)
    r = SeededRng(5)
    for _ in range(2):
        loss, grads = net.backward(r.uniform((4, 3, 64, 64)).astype(np.float32) * 255, [0, 1, 2, 1])
        opt.step(net.params(), grads)
    net.eval()
    return net, opt


def test_round_trip_restores_everything(trained, tmp_path):
    net, opt = trained
    path = save_checkpoint(net, opt, 7, tmp_path / "a.ckpt", {"note": "x"})
    back, bopt, epoch, extra = load_checkpoint(path)
    assert epoch == 7 and extra == {"note": "x"}
    for k, v in {**net.params(), **net.buffers()}.items():
        got = {**back.params(), **back.buffers()}[k]
        assert got.dtype == v.dtype and got.tobytes() == v.tobytes(), k
    assert bopt.iterations == 2 and bopt.lr == opt.lr
    for k, v in opt.tensors().items():
        assert bopt.tensors()[k].tobytes() == v.tobytes()
    assert (back.rng.seed, back.rng.counter) == (net.rng.seed, net.rng.counter)
    assert back.spec == net.spec


def test_round_trip_logits_bitwise(trained, tmp_path):
    net, opt = trained
    back = load_checkpoint(save_checkpoint(net, opt, 1, tmp_path / "a.ckpt")).net
    x = SeededRng(9).uniform((3, 3, 64, 64)).astype(np.float32) * 255
    assert back.forward(x)[0].tobytes() == net.forward(x)[0].tobytes()


def test_save_load_save_identical_bytes(trained, tmp_path):
    net, opt = trained
    first = save_checkpoint(net, opt, 3, tmp_path / "a.ckpt").read_bytes()
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert save_checkpoint(ck.net, ck.optimizer, ck.epoch, tmp_path / "b.ckpt").read_bytes() == first


def test_sgd_and_no_optimizer(tmp_path):
    net = build_network(reference_spec(image_size=64), SeededRng(1))
    sgd = SGD(0.1)
    sgd.iterations = 5
    ck = load_checkpoint(save_checkpoint(net, sgd, 2, tmp_path / "s.ckpt"))
    assert isinstance(ck.optimizer, SGD) and ck.optimizer.iterations == 5
    assert load_checkpoint(save_checkpoint(net, None, 2, tmp_path / "n.ckpt")).optimizer is None


def test_layout_header(trained):
    net, opt = trained
    buf = checkpoint_bytes(net, opt, 1)
    assert buf[:4] == MAGIC
    version, length = struct.unpack_from("<HQ", buf, 4)
    assert version == 1
    manifest = json.loads(buf[14 : 14 + length])
    assert {"spec", "epoch", "seed", "rng_counter", "optimizer", "extra", "tensors"} <= set(manifest)


def _write(tmp_path, data):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(data)
    return p


def test_bad_magic(trained, tmp_path):
    buf = bytearray(checkpoint_bytes(*trained, 1))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(_write(tmp_path, bytes(buf)))


def test_version_mismatch(trained, tmp_path):
    buf = bytearray(checkpoint_bytes(*trained, 1))
    struct.pack_into("<H", buf, 4, 2)
    with pytest.raises(VersionError):
        load_checkpoint(_write(tmp_path, bytes(buf)))


@pytest.mark.parametrize("cut", [8, 100, -1])
def test_truncated(trained, tmp_path, cut):
    buf = checkpoint_bytes(*trained, 1)
    with pytest.raises(TruncatedError):
        load_checkpoint(_write(tmp_path, buf[:cut]))


def test_unknown_layer_kind(trained, tmp_path):
    buf = checkpoint_bytes(*trained, 1)
    manifest, start = read_manifest(buf)
    manifest["spec"]["layers"][1]["kind"] = "attention"
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    forged = struct.pack("<4sHQ", MAGIC, 1, len(text)) + text + buf[start:]
    with pytest.raises(UnknownLayerError):
        load_checkpoint(_write(tmp_path, forged))


def test_error_kinds_are_distinct():
    assert len({VersionError, TruncatedError, UnknownLayerError}) == 3
    assert not issubclass(VersionError, TruncatedError) and not issubclass(TruncatedError, VersionError)


def test_atomic_write_leaves_no_temp(trained, tmp_path):
    save_checkpoint(*trained, 1, tmp_path / "a.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]
