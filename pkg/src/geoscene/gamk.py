"""GAMK binary tensor files and the checkpoint container built on them.

Tensor record layout (all little-endian)::

    offset 0   b"GAMK"            magic
    offset 4   uint32 version     always 1
    offset 8   uint32 ndim
    offset 12  uint32 dims[ndim]
    ...        float32 data       row-major, prod(dims) values

A checkpoint container is::

    b"GAMKCKPT" | uint32 version | uint32 manifest_len | manifest JSON (utf-8)
    | tensor records back to back

The manifest maps every tensor name to the byte offset of its record
(relative to the first record) and its shape, and carries the step counter
and an echo of the configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GAMK"
VERSION = 1
CONTAINER_MAGIC = b"GAMKCKPT"

__all__ = ["encode_tensor", "decode_tensor", "write_tensor", "read_tensor",
           "encode_container", "decode_container", "write_container", "read_container"]


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; return the array and the end offset."""
    if len(buf) - offset < 12:
        raise FormatError(f"truncated GAMK header at offset {offset}")
    magic = bytes(buf[offset:offset + 4])
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset {offset}")
    version, ndim = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported GAMK version {version} at offset {offset + 4}")
    pos = offset + 12
    if len(buf) - pos < 4 * ndim:
        raise FormatError(f"truncated GAMK dims at offset {pos}")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-sized dimension in GAMK record at offset {offset + 12}")
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    nbytes = 4 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated GAMK data at offset {pos}: "
                          f"need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32), pos + nbytes


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after GAMK record at offset {end}")
    return arr


def encode_container(tensors: dict, meta: dict) -> bytes:
    records = []
    entries = {}
    pos = 0
    for name, arr in tensors.items():
        rec = encode_tensor(arr)
        entries[name] = {"offset": pos, "shape": list(np.shape(arr))}
        records.append(rec)
        pos += len(rec)
    manifest = dict(meta)
    manifest["tensors"] = entries
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    head = CONTAINER_MAGIC + struct.pack("<II", VERSION, len(mbytes))
    return head + mbytes + b"".join(records)


def decode_container(buf: bytes) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; ``meta`` is the manifest without the tensor index."""
    n = len(CONTAINER_MAGIC)
    if len(buf) < n + 8:
        raise FormatError("truncated checkpoint header at offset 0")
    if bytes(buf[:n]) != CONTAINER_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:n])!r} at offset 0")
    version, mlen = struct.unpack_from("<II", buf, n)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset {n}")
    start = n + 8
    if len(buf) < start + mlen:
        raise FormatError(f"truncated checkpoint manifest at offset {start}")
    try:
        manifest = json.loads(bytes(buf[start:start + mlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest at offset {start}: {exc}") from None
    base = start + mlen
    tensors = {}
    for name, entry in manifest.pop("tensors", {}).items():
        try:
            arr, _ = decode_tensor(buf, base + int(entry["offset"]))
        except FormatError as exc:
            raise FormatError(f"tensor {name!r}: {exc}") from None
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError(f"tensor {name!r}: manifest shape {entry['shape']} "
                              f"does not match record shape {list(arr.shape)}")
        tensors[name] = arr
    return tensors, manifest


def write_container(path, tensors: dict, meta: dict) -> None:
    Path(path).write_bytes(encode_container(tensors, meta))


def read_container(path) -> tuple[dict, dict]:
    return decode_container(Path(path).read_bytes())
