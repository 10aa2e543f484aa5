"""Flat binary tensor container used for model and GMM checkpoints.

Layout (all integers little-endian u32, payload float64 little-endian)::

    b"DDCEQNET" | version | count
    repeated: name_len | name (utf-8) | rank | dims[rank] | payload

Tensors keep insertion order, so writing the same mapping twice gives the
same bytes.
"""

import struct

import numpy as np

from .errors import FormatError, InputError
from .nn_core import LayerParams, NetworkParams, ResidualBlock

MAGIC = b"DDCEQNET"
VERSION = 1


def encode(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf):
    buf = bytes(buf)
    if buf[:8] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(dims)
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return tensors


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(encode(tensors))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def network_to_tensors(params: NetworkParams):
    out = {"net.leaky_slope": np.array(params.leaky_slope)}
    for name, layer in params.layers():
        out[f"{name}.weight"] = layer.weight
        out[f"{name}.bias"] = layer.bias
        if layer.sn_u is not None:
            out[f"{name}.sn_u"] = layer.sn_u
    return out


def network_from_tensors(tensors):
    def layer(name):
        try:
            return LayerParams(
                tensors[f"{name}.weight"].copy(),
                tensors[f"{name}.bias"].copy(),
                tensors[f"{name}.sn_u"].copy() if f"{name}.sn_u" in tensors else None,
            )
        except KeyError as exc:
            raise InputError(f"checkpoint is missing tensor {exc.args[0]}") from None

    blocks = []
    k = 0
    while f"block{k}.fc1.weight" in tensors:
        blocks.append(ResidualBlock(layer(f"block{k}.fc1"), layer(f"block{k}.fc2")))
        k += 1
    slope = float(tensors.get("net.leaky_slope", np.array(0.1)))
    return NetworkParams(layer("input"), blocks, layer("head"), slope)
