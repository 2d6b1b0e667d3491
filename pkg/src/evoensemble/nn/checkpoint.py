"""Binary network checkpoints.

Layout: ``MAGIC`` (8 bytes), little-endian uint32 header length, a UTF-8 JSON
header, then raw little-endian float32 payloads in header order. The header
lists every layer's kind, hyperparameters and tensor shapes, and carries a
``format_version`` field.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import LAYER_KINDS
from .network import Network

MAGIC = b"EVOENSNN"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def network_to_bytes(net: Network) -> bytes:
    layers = []
    payload = bytearray()
    for layer in net.layers:
        tensors = []
        for group, store in (("params", layer.params), ("buffers", layer.buffers)):
            for name in sorted(store):
                arr = np.ascontiguousarray(store[name], dtype=_DTYPE)
                tensors.append({"group": group, "name": name, "shape": list(arr.shape)})
                payload += arr.tobytes()
        layers.append({"kind": layer.kind, "hyper": layer.hyper(), "tensors": tensors})
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "input_shape": list(net.input_shape),
        "output_shape": list(net.output_shape),
        "layers": layers,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + bytes(payload)


def network_from_bytes(data: bytes) -> Network:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a network checkpoint")
    start = len(MAGIC) + 4
    try:
        (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    offset = start + hlen
    layers = []
    for spec in header["layers"]:
        cls = LAYER_KINDS.get(spec["kind"])
        if cls is None:
            raise CheckpointError(f"unknown layer kind {spec['kind']!r}")
        hyper = dict(spec["hyper"])
        if "padding" in hyper:
            hyper["padding"] = tuple(hyper["padding"])
        if spec["kind"] != "lrelu":
            hyper["dtype"] = np.float32
        layer = cls(**hyper)
        for t in spec["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            if offset + count * _DTYPE.itemsize > len(data):
                raise CheckpointError("checkpoint payload is truncated")
            arr = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset)
            offset += count * _DTYPE.itemsize
            getattr(layer, t["group"])[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
        layers.append(layer)
    if offset != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Network(layers, header["input_shape"])


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path: str | Path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
