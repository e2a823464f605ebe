"""Versioned binary checkpoints.

Layout (little-endian)::

    b"DEOPCKPT"                      8-byte magic
    u32 version                      currently 1
    u32 n, n bytes                   fingerprint (ascii hex)
    u32 count
    count x:
        u32 n, n bytes               tensor name (utf-8)
        u32 rank, rank x u64         dims
        prod(dims) x f64             data, C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DEOPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def fingerprint(arch: dict) -> str:
    """Stable hash of an architecture description (JSON with sorted keys)."""
    blob = json.dumps(arch, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def encode(tensors: dict[str, np.ndarray], fp: str) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    fpb = fp.encode("ascii")
    out.append(struct.pack("<I", len(fpb)) + fpb)
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode(raw: bytes, expected_fp: str | None = None, source: str = "<bytes>") -> tuple[dict, str]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        b = raw[pos:pos + n]
        pos += n
        return b

    if take(8) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    fp = take(n).decode("ascii")
    if expected_fp is not None and fp != expected_fp:
        raise FingerprintMismatch(f"{source}: config fingerprint {fp[:12]} does not match {expected_fp[:12]}")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - pos} trailing bytes")
    return tensors, fp


def save(path, tensors: dict[str, np.ndarray], fp: str) -> None:
    Path(path).write_bytes(encode(tensors, fp))


def load(path, expected_fp: str | None = None) -> tuple[dict, str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return decode(p.read_bytes(), expected_fp, str(p))


def state_of(params: dict) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def assign(params: dict, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy arrays into existing parameters; names and shapes must match exactly."""
    for k, t in params.items():
        key = prefix + k
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        if tensors[key].shape != t.shape:
            raise CheckpointError(f"tensor {key!r} has shape {tensors[key].shape}, expected {t.shape}")
        t.data[...] = tensors[key]
