"""
container.py - bit-exact tensor container (magic `ITAH`)

Record layout (little-endian):
  b"ITAH" | version u32 | name_len u32 | name utf-8 | ndim u32 | dims u64 * ndim
  | dtype u8 (0 = float32, 1 = uint8) | raw row-major payload

Records are concatenated and followed by an index table:
  count * (name_len u32 | name | offset u64) | index_offset u64 | count u32 | b"ITAI"
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np

from maskbind.errors import ContainerError

MAGIC = b"ITAH"
INDEX_MAGIC = b"ITAI"
VERSION = 1

DTYPE_CODES: Dict[int, np.dtype] = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


def _encode_record(name: str, array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise ContainerError(f"record {name!r}: unsupported dtype {arr.dtype} "
                             "(only float32 and uint8)")
    code = _CODE_FOR_DTYPE[arr.dtype]
    name_bytes = name.encode("utf-8")
    header = MAGIC + struct.pack("<II", VERSION, len(name_bytes)) + name_bytes
    header += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<B", code)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def encode_records(records: Mapping[str, np.ndarray]) -> bytes:
    chunks: List[bytes] = []
    index: List[Tuple[str, int]] = []
    offset = 0
    for name, array in records.items():
        blob = _encode_record(name, array)
        index.append((name, offset))
        chunks.append(blob)
        offset += len(blob)

    index_offset = offset
    for name, rec_offset in index:
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)) + name_bytes
                      + struct.pack("<Q", rec_offset))
    chunks.append(struct.pack("<QI", index_offset, len(index)) + INDEX_MAGIC)
    return b"".join(chunks)


def _decode_record(data: bytes, offset: int) -> Tuple[str, np.ndarray]:
    try:
        if data[offset:offset + 4] != MAGIC:
            raise ContainerError(f"bad record magic at offset {offset}")
        pos = offset + 4
        version, name_len = struct.unpack_from("<II", data, pos)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos += 8
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        (code,) = struct.unpack_from("<B", data, pos)
        pos += 1
    except struct.error as e:
        raise ContainerError(f"truncated record header at offset {offset}") from e

    if code not in DTYPE_CODES:
        raise ContainerError(f"record {name!r}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    if pos + nbytes > len(data):
        raise ContainerError(f"record {name!r}: truncated payload")
    array = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(dims).copy()
    return name, array.astype(dtype.newbyteorder("="), copy=False)


def decode_records(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < 16 or data[-4:] != INDEX_MAGIC:
        raise ContainerError("missing container index trailer")
    index_offset, count = struct.unpack_from("<QI", data, len(data) - 16)

    records: Dict[str, np.ndarray] = {}
    pos = index_offset
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rec_offset,) = struct.unpack_from("<Q", data, pos)
            pos += 8
        except struct.error as e:
            raise ContainerError("truncated container index") from e
        rec_name, array = _decode_record(data, rec_offset)
        if rec_name != name:
            raise ContainerError(f"index names {name!r} but record holds {rec_name!r}")
        records[name] = array
    return records


def write_records(path: Path, records: Mapping[str, np.ndarray]) -> str:
    """Write records to `path`; returns the SHA-256 of the written bytes."""
    blob = encode_records(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_records(path: Path) -> Dict[str, np.ndarray]:
    return decode_records(Path(path).read_bytes())


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


__all__ = ["MAGIC", "VERSION", "encode_records", "decode_records", "write_records",
           "read_records", "file_hash"]
