"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic "CSPDCKPT" | u32 version | 64 ascii hex fingerprint | u64 step
    u32 meta_len | meta JSON
    u32 n_entries | entries
    sha256 of everything above (32 bytes)

Each entry is ``u16 name_len | name | u8 kind | u8 ndim | u32 dims... |
float32 data``.  ``kind`` is 0 for parameters, 1 for buffers (running
statistics) and 2 for optimizer state.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FingerprintMismatch

MAGIC = b"CSPDCKPT"
VERSION = 1
KINDS = {"param": 0, "buffer": 1, "optim": 2}


@dataclass
class Checkpoint:
    fingerprint: str
    step: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        if len(self.fingerprint) != 64:
            raise ValueError("fingerprint must be a 64-character hex digest")
        parts = [MAGIC, struct.pack("<I", self.version), self.fingerprint.encode("ascii"),
                 struct.pack("<Q", self.step)]
        meta = json.dumps(self.meta, sort_keys=True).encode()
        parts += [struct.pack("<I", len(meta)), meta]
        entries = [(n, KINDS["param"], a) for n, a in self.params.items()]
        entries += [(n, KINDS["buffer"], a) for n, a in self.buffers.items()]
        entries += [(n, KINDS["optim"], a) for n, a in self.optimizer.items()]
        parts.append(struct.pack("<I", len(entries)))
        for name, kind, arr in entries:
            raw = name.encode()
            arr = np.asarray(arr)
            parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", kind, arr.ndim),
                      struct.pack(f"<{arr.ndim}I", *arr.shape), np.ascontiguousarray(arr, dtype="<f4").tobytes()]
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 32 or blob[:len(MAGIC)] != MAGIC:
            raise ChecksumError("not a checkpoint file (bad magic or truncated)")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")
        pos = len(MAGIC)

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, body, pos)
            pos += struct.calcsize(fmt)
            return vals

        (version,) = take("<I")
        if version != VERSION:
            raise ChecksumError(f"unsupported checkpoint version {version}")
        fingerprint = body[pos:pos + 64].decode("ascii")
        pos += 64
        (step,) = take("<Q")
        (meta_len,) = take("<I")
        meta = json.loads(body[pos:pos + meta_len])
        pos += meta_len
        (n,) = take("<I")
        groups = {0: {}, 1: {}, 2: {}}
        for _ in range(n):
            (name_len,) = take("<H")
            name = body[pos:pos + name_len].decode()
            pos += name_len
            kind, ndim = take("<BB")
            shape = take(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
            groups[kind][name] = arr
        if pos != len(body):
            raise ChecksumError("trailing bytes in checkpoint body")
        return cls(fingerprint, step, groups[0], groups[1], groups[2], meta, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically so a crash never leaves a half-written file under ``path``."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint architecture {ckpt.fingerprint[:12]} does not match model {expected_fingerprint[:12]}")
    return ckpt


def model_state(model) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params = {n: p.data for n, p in model.named_parameters()}
    buffers = {n: b for n, b in model.named_buffers()}
    return params, buffers


def apply_state(model, ckpt: Checkpoint) -> None:
    """Copy parameters and buffers into ``model``; all names and shapes must agree."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    if set(params) != set(ckpt.params) or set(buffers) != set(ckpt.buffers):
        missing = sorted(set(params) ^ set(ckpt.params) | set(buffers) ^ set(ckpt.buffers))
        raise FingerprintMismatch(f"checkpoint entries differ from model: {missing[:5]}")
    for name, p in params.items():
        src = ckpt.params[name]
        if src.shape != p.data.shape:
            raise FingerprintMismatch(f"{name}: shape {src.shape} vs model {p.data.shape}")
    for name, p in params.items():
        p.data[...] = ckpt.params[name]
    for name, b in buffers.items():
        b[...] = ckpt.buffers[name]
