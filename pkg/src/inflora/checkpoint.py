"""Binary checkpoints of a network, its gradient memories and class statistics.

Layout (all integers little-endian; see docs/FORMATS.md):

    b"IFLR" | u32 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 ndim | u64 * ndim shape | f64 data (C order)
    u32 CRC-32 of every preceding byte

Non-numeric state (activation kinds, memory modes) is encoded as small codes
inside ``meta`` tensors so that everything stays a named float64 array.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, IoError, ParseError
from .gpmem import GradientMemory, MemoryMode
from .metrics import ClassStats
from .model import Head, LoraLinearLayer, Network

MAGIC = b"IFLR"
VERSION = 1

_ACTIVATIONS = ("relu", "none")
_MODES = (MemoryMode.GRAD, MemoryMode.COMPLEMENT)


def encode_tensors(tensors):
    """Serialize an ordered name -> array mapping, checksum included."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ParseError(
                f"truncated checkpoint: need {n} byte(s) for {what} at offset {self.pos}, "
                f"file has {len(self.data)}",
                offset=self.pos,
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(data):
    """Inverse of :func:`encode_tensors`. Arrays are fresh, writable copies."""
    rd = _Reader(bytes(data))
    if rd.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (count,) = rd.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        at = rd.pos
        (n,) = rd.unpack("<H", "name length")
        try:
            name = rd.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"tensor name at offset {at} is not utf-8", offset=at) from None
        (ndim,) = rd.unpack("<B", "ndim")
        shape = rd.unpack(f"<{ndim}Q", "shape")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if size * 8 > len(rd.data):
            raise ParseError(f"tensor {name!r} at offset {at} claims {size} values", offset=at)
        raw = rd.take(8 * size, f"data of {name!r}")
        if name in tensors:
            raise ParseError(f"duplicate tensor {name!r} at offset {at}", offset=at)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    end = rd.pos
    (crc,) = rd.unpack("<I", "checksum")
    if rd.pos != len(rd.data):
        raise ParseError(f"{len(rd.data) - rd.pos} trailing byte(s) at offset {rd.pos}", offset=rd.pos)
    if crc != zlib.crc32(rd.data[:end]):
        raise ParseError(f"checksum mismatch at offset {end}", offset=end)
    return tensors


def state_tensors(net, memories=None, stats=None):
    t = {}
    t["net.meta"] = np.array([len(net.layers), net.head.n_classes], dtype=np.float64)
    for i, layer in enumerate(net.layers):
        t[f"layers.{i}.meta"] = np.array([float(layer.adapted), _ACTIVATIONS.index(layer.activation)], dtype=np.float64)
        t[f"layers.{i}.w"] = layer.w
        t[f"layers.{i}.bias"] = layer.bias
        if layer.has_branch:
            t[f"layers.{i}.a"] = layer.branch_a
            t[f"layers.{i}.b"] = layer.branch_b
    t["head.w"] = net.head.w
    t["head.bias"] = net.head.bias
    for i, mem in sorted((memories or {}).items()):
        t[f"memory.{i}.meta"] = np.array([_MODES.index(mem.mode), mem.dim_ambient], dtype=np.float64)
        t[f"memory.{i}.basis"] = mem.basis
    if stats is not None:
        for c in stats.classes:
            t[f"stats.{c}.mean"] = stats.means[c]
            t[f"stats.{c}.cov"] = stats.covs[c]
            t[f"stats.{c}.count"] = np.array([stats.counts[c]], dtype=np.float64)
    return t


def _need(t, name):
    if name not in t:
        raise FormatError(f"checkpoint lacks tensor {name!r}")
    return t[name]


def state_from_tensors(t):
    n_layers, _ = (int(v) for v in _need(t, "net.meta"))
    layers = []
    for i in range(n_layers):
        adapted, act = _need(t, f"layers.{i}.meta")
        layer = LoraLinearLayer(
            w=_need(t, f"layers.{i}.w"),
            bias=_need(t, f"layers.{i}.bias"),
            adapted=bool(adapted),
            activation=_ACTIVATIONS[int(act)],
        )
        if f"layers.{i}.a" in t:
            layer.branch_a = t[f"layers.{i}.a"]
            layer.branch_b = _need(t, f"layers.{i}.b")
        layers.append(layer)
    net = Network(layers=layers, head=Head(w=_need(t, "head.w"), bias=_need(t, "head.bias")))

    memories = {}
    stats = ClassStats({}, {}, {})
    for name in t:
        parts = name.split(".")
        if parts[0] == "memory" and parts[2] == "meta":
            i = int(parts[1])
            mode, dim = t[name]
            memories[i] = GradientMemory(int(dim), _MODES[int(mode)], _need(t, f"memory.{i}.basis"))
        elif parts[0] == "stats" and parts[2] == "mean":
            c = int(parts[1])
            stats.means[c] = t[name]
            stats.covs[c] = _need(t, f"stats.{c}.cov")
            stats.counts[c] = int(_need(t, f"stats.{c}.count")[0])
    return net, memories, stats


def save_checkpoint(path, net, memories=None, stats=None):
    data = encode_tensors(state_tensors(net, memories, stats))
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return len(data)


def load_checkpoint(path):
    """Returns ``(net, memories, stats)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors = decode_tensors(data)
    try:
        return state_from_tensors(tensors)
    except (IndexError, ValueError, TypeError) as exc:
        raise FormatError(f"checkpoint {path} has inconsistent contents: {exc}") from exc
