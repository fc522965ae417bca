import struct
import zlib

import numpy as np
import pytest

from inflora.checkpoint import MAGIC, decode_tensors, encode_tensors, load_checkpoint, save_checkpoint
from inflora.errors import FormatError, IoError, ParseError
from inflora.gpmem import GradientMemory, MemoryMode
from inflora.linalg import svd
from inflora.metrics import collect_stats
from inflora.model import build_network, forward


@pytest.fixture
def state(rng):
    net = build_network(6, [7, 5], 4, rng)
    net.head.w = rng.standard_normal((4, 5))
    net.layers[1].adapted = False
    net.layers[0].activation = "none"
    mems = {
        0: GradientMemory(6, MemoryMode.COMPLEMENT, svd(rng.standard_normal((6, 2))).u),
        1: GradientMemory(7, MemoryMode.GRAD, svd(rng.standard_normal((7, 3))).u),
    }
    stats = collect_stats(net, rng.standard_normal((6, 20)), np.repeat([0, 3], 10))
    return net, mems, stats


def test_round_trip_bit_exact(tmp_path, state, rng):
    net, mems, stats = state
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, net, mems, stats)
    net2, mems2, stats2 = load_checkpoint(p1)
    save_checkpoint(p2, net2, mems2, stats2)
    assert p1.read_bytes() == p2.read_bytes()
    probes = rng.standard_normal((6, 10))
    assert np.array_equal(forward(net, probes)[0], forward(net2, probes)[0])
    for i in mems:
        assert mems2[i].mode is mems[i].mode and mems2[i].dim_ambient == mems[i].dim_ambient
        assert np.array_equal(mems2[i].basis, mems[i].basis)
    assert stats2.classes == [0, 3]
    assert np.array_equal(stats2.covs[3], stats.covs[3]) and stats2.counts[0] == 10
    assert net2.layers[1].adapted is False and net2.layers[0].activation == "none"


def test_layout_header(tmp_path, state):
    net, mems, stats = state
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, net, mems, stats)
    data = p.read_bytes()
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8]) == (1,)
    assert struct.unpack("<I", data[-4:]) == (zlib.crc32(data[:-4]),)


def test_truncation_reports_offset(tmp_path, state):
    net, mems, stats = state
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, net, mems, stats)
    data = p.read_bytes()
    for cut in (10, 50, len(data) // 2, len(data) - 1):
        with pytest.raises(ParseError) as err:
            decode_tensors(data[:cut])
        assert err.value.offset is not None and err.value.offset <= cut


def test_corruption_detected(tmp_path):
    data = bytearray(encode_tensors({"x": np.arange(4.0)}))
    data[-8] ^= 0xFF
    with pytest.raises(ParseError) as err:
        decode_tensors(bytes(data))
    assert err.value.offset == len(data) - 4
    with pytest.raises(ParseError):
        decode_tensors(bytes(data) + b"\0")


def test_version_and_magic():
    data = bytearray(encode_tensors({"x": np.zeros(1)}))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(FormatError):
        decode_tensors(bytes(data))
    with pytest.raises(FormatError):
        decode_tensors(b"NOPE" + bytes(data[4:]))


def test_io_errors(tmp_path, state):
    with pytest.raises(IoError):
        load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(IoError):
        save_checkpoint(tmp_path / "no" / "dir.ckpt", *state)


def test_tensor_codec_round_trip(rng):
    t = {"a": rng.standard_normal((2, 3)), "scalar": np.array(2.5), "empty": np.zeros((4, 0))}
    back = decode_tensors(encode_tensors(t))
    assert list(back) == list(t)
    for k in t:
        assert back[k].shape == t[k].shape and np.array_equal(back[k], t[k])


def test_inconsistent_contents(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(encode_tensors({"net.meta": np.array([1.0, 2.0]), "layers.0.meta": np.array([1.0, 7.0])}))
    with pytest.raises(FormatError):
        load_checkpoint(p)
    p.write_bytes(encode_tensors({"x": np.zeros(1)}))
    with pytest.raises(FormatError):
        load_checkpoint(p)
