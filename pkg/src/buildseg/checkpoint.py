"""Flat binary checkpoint format: named arrays plus a JSON metadata block.

Layout: an 8-byte magic+version header, a record count, then one record per
entry. Each record is [u16 name length][utf-8 name][u8 dtype code]
[u8 rank][u32 dims...][little-endian payload]. Metadata travels as a JSON
record under a reserved name, written with sorted keys so identical states
serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BSEG"
VERSION = 1
_META_KEY = "__meta__"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_JSON_CODE = 255


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    records = dict(arrays)
    if _META_KEY in records:
        raise CheckpointError(f"'{_META_KEY}' is reserved for metadata")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(records) + 1)]

    def emit(name: str, code: int, dims: tuple[int, ...], payload: bytes) -> None:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, len(dims)))
        for d in dims:
            chunks.append(struct.pack("<I", d))
        chunks.append(payload)

    for name, arr in records.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
        emit(name, _DTYPE_CODES[arr.dtype], arr.shape, arr.astype(arr.dtype.newbyteorder("<")).tobytes())

    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    emit(_META_KEY, _JSON_CODE, (len(meta_bytes),), meta_bytes)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated record header at byte {pos}") from exc
        if code == _JSON_CODE:
            payload = data[pos : pos + dims[0]]
            if len(payload) != dims[0]:
                raise CheckpointError(f"{path}: truncated metadata at byte {pos}")
            meta = json.loads(payload.decode("utf-8"))
            pos += dims[0]
            continue
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for '{name}'")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = data[pos : pos + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for '{name}' at byte {pos}")
        arrays[name] = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
        pos += nbytes
    return arrays, meta
