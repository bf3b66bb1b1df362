"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"SSATCKPT"
    version      u32
    digest       32 bytes sha256 of the model config JSON
    meta_len     u64
    meta         meta_len bytes, UTF-8 JSON (epoch, rng state, config, extra)
    count        u32      number of tensors
    per tensor:
      name_len   u32, name (UTF-8)
      dtype      u8       4 = float32, 8 = float64
      ndim       u32
      dims       ndim x u64
      values     raw little-endian
    checksum     32 bytes sha256 of everything above

Optimizer moments are stored as tensors named ``optim.m.<param>`` and
``optim.v.<param>``; the step counter lives in the metadata.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SSATCKPT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer_step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.config).hex()


def _tensors(ckpt: Checkpoint):
    yield from ckpt.params.items()
    for name, arr in ckpt.exp_avg.items():
        yield f"optim.m.{name}", arr
    for name, arr in ckpt.exp_avg_sq.items():
        yield f"optim.v.{name}", arr


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(config_digest(ckpt.config))
    meta = {
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "optimizer_step": ckpt.optimizer_step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    raw = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    items = list(_tensors(ckpt))
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        encoded = name.encode()
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 8 + 4 + 32 + 32 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    body, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError("checkpoint is corrupt (checksum mismatch)")
    digest = body[12:44]
    pos = 44
    (meta_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    meta = json.loads(body[pos : pos + meta_len])
    pos += meta_len
    if config_digest(meta["config"]) != digest:
        raise CheckpointError("config digest does not match stored config")
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params, m, v = {}, {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + name_len].decode()
        pos += name_len
        code, ndim = struct.unpack_from("<BI", body, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
        if name.startswith("optim.m."):
            m[name[8:]] = arr
        elif name.startswith("optim.v."):
            v[name[8:]] = arr
        else:
            params[name] = arr
    return Checkpoint(
        config=meta["config"],
        params=params,
        optimizer_step=meta["optimizer_step"],
        exp_avg=m,
        exp_avg_sq=v,
        epoch=meta["epoch"],
        rng_state=meta["rng_state"],
        extra=meta["extra"],
    )


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
