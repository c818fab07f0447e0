"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic "DIM1" | u32 version | u32 config_len | config JSON (UTF-8, sorted
    keys) | u32 n_params | records | u64 checksum

Each record: u16 name_len | name UTF-8 | u8 rank | u32 extents[rank] |
raw little-endian float32 data. The checksum is a 64-bit BLAKE2b digest
of every preceding byte. Parameters are stored as float32 regardless of
the in-memory precision, so save -> load -> save is byte-identical in
both modes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .model import Denoiser, ModelConfig
from .tensor import Tensor

MAGIC = b"DIM1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_json(cfg: ModelConfig) -> bytes:
    d = dataclasses.asdict(cfg)
    d["scan_set"] = list(d["scan_set"])
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _config_from_json(raw: bytes) -> ModelConfig:
    d = json.loads(raw.decode("utf-8"))
    d["scan_set"] = tuple(d["scan_set"])
    return ModelConfig(**d)


def checkpoint_bytes(cfg: ModelConfig, params: dict[str, np.ndarray]) -> bytes:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cj = _config_json(cfg)
    blob += struct.pack("<I", len(cj))
    blob += cj
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    blob += hashlib.blake2b(bytes(blob), digest_size=8).digest()
    return bytes(blob)


def save_checkpoint(model: Denoiser, path: str) -> None:
    payload = checkpoint_bytes(model.cfg, {k: p.data for k, p in model.named_params().items()})
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: missing {MAGIC!r} magic")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown format version {version}")
    (clen,) = struct.unpack_from("<I", body, off)
    off += 4
    cfg = _config_from_json(body[off : off + clen])
    off += clen
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = arr.copy()
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes before checksum")
    return cfg, params


def load_checkpoint(model: Denoiser, path: str, strict: bool = True) -> ModelConfig:
    """Load parameters by name into ``model``; returns the stored config.

    Strict mode (the default; weak-to-strong transfer keeps the parameter
    set identical across resolutions) rejects missing or extra names.
    """
    cfg, stored = read_checkpoint(path)
    live = model.named_params()
    missing = sorted(set(live) - set(stored))
    extra = sorted(set(stored) - set(live))
    if strict and (missing or extra):
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing}, extra {extra})")
    for name, p in live.items():
        if name not in stored:
            continue
        arr = stored[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.dtype)
    return cfg
