"""Self-describing binary container for models and datasets.

Layout::

    magic (8 bytes) | version u32 LE | header length u64 LE | header (UTF-8 JSON)
    | array payloads (float64 LE, row-major, in header order) | sha256 of all prior bytes

The header lists every array as {name, shape}.  The trailing digest makes
truncation and corruption detectable.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DIGEST = 32


class ContainerError(ValueError):
    """Malformed, truncated or mismatched container file."""


def dumps(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    specs = []
    payload = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        specs.append({"name": name, "shape": list(a.shape)})
        payload.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 8 + 12 + _DIGEST:
        raise ContainerError("file too short")
    if blob[:8] != magic:
        raise ContainerError("wrong file type")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError("checksum mismatch (truncated or corrupted file)")
    version, hlen = struct.unpack_from("<IQ", body, 8)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = 20
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(body):
            raise ContainerError("payload shorter than header declares")
        arrays[spec["name"]] = np.frombuffer(body, dtype="<f8", count=n // 8,
                                             offset=offset).reshape(shape).astype(float)
        offset += n
    if offset != len(body):
        raise ContainerError("trailing bytes after payload")
    return header["meta"], arrays


def save(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(magic, meta, arrays))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)
