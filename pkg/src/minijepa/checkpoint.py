"""Binary checkpoint format with content checksum.

Layout (little-endian throughout):
  magic "MJCK" | u32 version | u64 step | u64 seed
  u32 config-hash length | config-hash bytes (utf-8 hex)
  u32 tensor count
  per tensor: u32 name length | name utf-8 | u32 ndim | u64 dims... | f32 data
  8-byte blake2b digest of everything above

Tensors are grouped by dotted name prefixes ("param.", "teacher.",
"opt_m.", "opt_v."), flattened into one namespace. A single flipped byte
anywhere fails the digest check on load.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MJCK"
VERSION = 1
_DIGEST_SIZE = 8


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, step: int, seed: int, config_hash: str,
                    sections: dict[str, dict[str, np.ndarray]]) -> None:
    parts = [MAGIC, struct.pack("<IQQ", VERSION, step, seed)]
    h = config_hash.encode("utf-8")
    parts.append(struct.pack("<I", len(h)))
    parts.append(h)

    names = []
    for section in sorted(sections):
        for name in sorted(sections[section]):
            names.append((f"{section}.{name}", sections[section][name]))
    parts.append(struct.pack("<I", len(names)))
    for full_name, arr in names:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = full_name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())

    body = b"".join(parts)
    digest = hashlib.blake2b(body, digest_size=_DIGEST_SIZE).digest()
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + digest)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (step, seed, config_hash, sections)."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 20 + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.blake2b(body, digest_size=_DIGEST_SIZE).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 4
    version, step, seed = struct.unpack_from("<IQQ", body, off)
    off += 20
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    config_hash = body[off:off + hlen].decode("utf-8")
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4

    sections: dict[str, dict[str, np.ndarray]] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            full_name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off)
            off += 4 * size
            section, name = full_name.split(".", 1)
            sections.setdefault(section, {})[name] = arr.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed tensor table ({exc})") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return step, seed, config_hash, sections
