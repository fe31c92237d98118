"""Reader and writer for the VSLT tensor file format.

Layout (all integers little-endian):

    magic   b"VSLT"
    version u32
    count   u32
    count x entry:
        name_len u16, name (UTF-8)
        rank     u8
        dims     rank x u32
        payload  prod(dims) x float32
                 (uint8 bytes for entries listed in BYTE_ENTRIES)
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np

from keypatch.errors import TensorFormatError

logger = logging.getLogger(__name__)

MAGIC = b"VSLT"
VERSION = 1
BYTE_ENTRIES = frozenset({"meta"})
META = "meta"

PathLike = Union[str, Path]


def save_tensor_file(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:32]}...")
        arr = np.asarray(tensor)
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor {name} has too many dimensions")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        dtype = "u1" if name in BYTE_ENTRIES else "<f4"
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TensorFormatError(f"truncated {what}: need {n} bytes", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_tensor_file(path: PathLike) -> Dict[str, np.ndarray]:
    cur = _Cursor(Path(path).read_bytes())
    if cur.take(4, "magic") != MAGIC:
        raise TensorFormatError("bad magic, not a VSLT tensor file", offset=0)
    version, count = cur.unpack("<II", "header")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", offset=4)

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_offset = cur.pos
        name_len, = cur.unpack("<H", "name length")
        try:
            name = cur.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise TensorFormatError(f"entry name is not UTF-8: {e}", offset=entry_offset) from e
        rank, = cur.unpack("<B", "rank")
        dims = cur.unpack(f"<{rank}I", "dims")
        itemsize = 1 if name in BYTE_ENTRIES else 4
        elements = 1
        for d in dims:
            elements *= d
        remaining = len(cur.data) - cur.pos
        if elements * itemsize > remaining:
            raise TensorFormatError(
                f"entry {name!r} declares {elements} elements, only {remaining} bytes left",
                offset=cur.pos,
            )
        if name in tensors:
            raise TensorFormatError(f"duplicate entry {name!r}", offset=entry_offset)
        raw = cur.take(elements * itemsize, name)
        dtype = np.uint8 if itemsize == 1 else np.dtype("<f4")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(
            np.uint8 if itemsize == 1 else np.float32
        )
    if cur.pos != len(cur.data):
        raise TensorFormatError(f"{len(cur.data) - cur.pos} trailing bytes", offset=cur.pos)
    logger.debug("[TENSOR] loaded %d entries from %s", len(tensors), path)
    return tensors


def encode_meta(meta: Mapping[str, Any]) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def decode_meta(tensors: Mapping[str, np.ndarray]) -> Dict[str, Any]:
    if META not in tensors:
        raise TensorFormatError("missing 'meta' entry")
    try:
        meta = json.loads(tensors[META].tobytes().decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise TensorFormatError(f"'meta' entry is not valid JSON: {e}") from e
    if not isinstance(meta, dict):
        raise TensorFormatError("'meta' entry must be a JSON object")
    return meta
