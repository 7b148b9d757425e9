"""Versioned binary container for named float64 tensor blocks.

Layout (all integers little-endian)::

    magic      8 bytes   b"RBLTNSR\\x00"
    version    uint32
    meta_len   uint32    followed by meta_len bytes of UTF-8 JSON
    n_blocks   uint32
    per block: name_len uint32, name (UTF-8), ndim uint32,
               ndim x uint64 extents, prod(extents) x float64
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"RBLTNSR\x00"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps(blocks: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(payload: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    view = memoryview(payload)
    if bytes(view[:8]) != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    version, meta_len = struct.unpack_from("<II", view, 8)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 16
    meta = json.loads(bytes(view[pos : pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    blocks: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(view[pos : pos + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(payload):
        raise FormatError(f"{len(payload) - pos} trailing bytes after last block")
    return blocks, meta


def save(path, blocks: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(blocks, meta))


def load(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    return loads(Path(path).read_bytes())


def save_classifier(path, model) -> None:
    save(path, model.state(), {"type": "classifier", "architecture": model.descriptor()})


def classifier_from_blocks(descriptor: dict, blocks: dict):
    from .nn import Classifier, layer_from_descriptor

    rng = np.random.default_rng(0)
    layers = [layer_from_descriptor(d, rng) for d in descriptor["layers"]]
    model = Classifier(
        layers,
        tuple(descriptor["input_shape"]),
        descriptor["num_classes"],
        kind=descriptor.get("kind", "custom"),
        meta=descriptor.get("meta", {}),
    )
    model.load_state(blocks)
    return model


def load_classifier(path):
    blocks, meta = load(path)
    if meta.get("type") != "classifier":
        raise FormatError(f"container holds {meta.get('type')!r}, not a classifier")
    return classifier_from_blocks(meta["architecture"], blocks)
