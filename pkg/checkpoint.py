"""
WPCK checkpoint format.

Layout (little-endian throughout):
    magic "WPCK" | u32 version | u32 config length | UTF-8 JSON config
    | u32 tensor count | per tensor, sorted by name:
      u16 name length | name | u8 ndim | u32 dim * ndim | f32 data

The JSON config holds the graph and the training metadata with sorted keys
and compact separators, so save -> load -> save is byte-identical.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Dict, Tuple

import numpy as np
from pydantic import ValidationError

from errors import CheckpointFormatError, CheckpointShapeError, GraphError
from models import ModelGraph
from network import NON_TRAINABLE_SUFFIXES, ParameterSet, param_shapes

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    """Graph, parameters and training metadata (epoch, val loss, ...)."""
    graph: ModelGraph
    params: ParameterSet
    meta: Dict[str, Any] = field(default_factory=dict)


class WPCKFormat:
    MAGIC: ClassVar[bytes] = b"WPCK"
    VERSION: ClassVar[int] = 1
    u32: ClassVar[struct.Struct] = struct.Struct("<I")
    u16: ClassVar[struct.Struct] = struct.Struct("<H")
    u8: ClassVar[struct.Struct] = struct.Struct("<B")


class _Reader:
    """Byte cursor that reports the offset of any short read."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointFormatError(f"truncated file while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> int:
        return fmt.unpack(self.take(fmt.size, what))[0]


def _config_blob(graph: ModelGraph, meta: Dict[str, Any]) -> bytes:
    config = {"graph": graph.model_dump(mode="json"), "meta": meta}
    return json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_checkpoint(graph: ModelGraph, params: ParameterSet, meta: Dict[str, Any]) -> bytes:
    fmt = WPCKFormat
    expected = param_shapes(graph)
    for name, shape in expected.items():
        if name not in params:
            raise GraphError(f"parameter '{name}' missing from checkpoint")
        if tuple(params[name].shape) != shape:
            raise CheckpointShapeError(name, shape, tuple(params[name].shape))
    blob = _config_blob(graph, meta)
    parts = [fmt.MAGIC, fmt.u32.pack(fmt.VERSION), fmt.u32.pack(len(blob)), blob, fmt.u32.pack(len(expected))]
    for name in sorted(expected):
        tensor = np.ascontiguousarray(params[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(fmt.u16.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(fmt.u8.pack(tensor.ndim))
        parts.extend(fmt.u32.pack(d) for d in tensor.shape)
        parts.append(tensor.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    fmt = WPCKFormat
    reader = _Reader(data)
    if reader.take(4, "magic") != fmt.MAGIC:
        raise CheckpointFormatError("bad magic, not a WPCK checkpoint", offset=0)
    version = reader.unpack(fmt.u32, "version")
    if version != fmt.VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", offset=4)
    blob_len = reader.unpack(fmt.u32, "config length")
    blob_offset = reader.offset
    blob = reader.take(blob_len, "config")
    try:
        config = json.loads(blob.decode("utf-8"))
        graph = ModelGraph.model_validate(config["graph"])
        meta = dict(config.get("meta") or {})
        expected = param_shapes(graph)
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, ValidationError, GraphError) as e:
        raise CheckpointFormatError(f"unreadable config: {e}", offset=blob_offset) from e

    count_offset = reader.offset
    count = reader.unpack(fmt.u32, "tensor count")
    if count != len(expected):
        raise CheckpointFormatError(f"file holds {count} tensors, graph needs {len(expected)}", offset=count_offset)

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_offset = reader.offset
        name_len = reader.unpack(fmt.u16, "tensor name length")
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError("tensor name is not UTF-8", offset=name_offset) from e
        if name not in expected or name in tensors:
            raise CheckpointFormatError(f"unexpected tensor '{name}'", offset=name_offset)
        ndim = reader.unpack(fmt.u8, f"rank of '{name}'")
        dims: Tuple[int, ...] = tuple(reader.unpack(fmt.u32, f"shape of '{name}'") for _ in range(ndim))
        if dims != expected[name]:
            raise CheckpointShapeError(name, expected[name], dims)
        size = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(4 * size, f"data of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)

    if reader.offset != len(data):
        raise CheckpointFormatError("trailing bytes after last tensor", offset=reader.offset)

    trainable = frozenset(n for n in tensors if not n.endswith(NON_TRAINABLE_SUFFIXES))
    return Checkpoint(graph=graph, params=ParameterSet(tensors, trainable), meta=meta)


def save_checkpoint(graph: ModelGraph, params: ParameterSet, meta: Dict[str, Any], path: Path) -> None:
    """Write atomically: a partial file never replaces a good checkpoint."""
    path = Path(path)
    data = encode_checkpoint(graph, params, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    logger.debug(f"Checkpoint written to {path} ({len(data)} bytes)")


def load_checkpoint(path: Path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    ckpt = decode_checkpoint(data)
    logger.info(f"✅ Loaded checkpoint {path}: {ckpt.params.count()} parameters")
    return ckpt
