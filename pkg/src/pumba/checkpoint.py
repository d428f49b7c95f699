"""Training checkpoints: parameters, AdamW moments, sampler RNG state.

File layout (little-endian)::

    8 bytes  magic b"PUMBACKP"
    u16      format version
    u32      header length h
    h bytes  UTF-8 JSON header (array table, optimizer scalars, extra state)
    ...      raw array payloads in header order
    32 bytes SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .training import AdamW

MAGIC = b"PUMBACKP"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")
_DIGEST = 32


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    optimizer: AdamW | None = None
    extra: dict = field(default_factory=dict)


def _tables(params: dict[str, Tensor], opt: AdamW | None):
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", p.data) for k, p in params.items()]
    if opt is not None:
        arrays += [(f"adam_m/{k}", v) for k, v in opt.m.items()]
        arrays += [(f"adam_v/{k}", v) for k, v in opt.v.items()]
    return arrays


def encode_checkpoint(params: dict[str, Tensor], opt: AdamW | None = None,
                      extra: dict | None = None) -> bytes:
    arrays = _tables(params, opt)
    table = []
    payload = bytearray()
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        payload += np.ascontiguousarray(arr, dtype=dt).tobytes()
    header = {"arrays": table, "extra": extra or {}}
    if opt is not None:
        header["optimizer"] = {"lr": opt.lr, "weight_decay": opt.weight_decay, "beta1": opt.beta1,
                               "beta2": opt.beta2, "eps": opt.eps, "step_count": opt.step_count}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(head)) + head + bytes(payload)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"{source}: truncated ({len(buf)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version} is not supported "
                              f"by this reader (version {CHECKPOINT_VERSION})")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch, file is corrupted")
    off = _PREFIX.size
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        if off + n > len(body):
            raise CheckpointError(f"{source}: array {entry['name']} runs past end of payload")
        arr = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=off).reshape(entry["shape"])
        arr = arr.astype(dt.newbyteorder("="))
        off += n
        kind, name = entry["name"].split("/", 1)
        if kind == "param":
            params[name] = Tensor(arr, requires_grad=True)
        elif kind == "adam_m":
            m[name] = arr
        elif kind == "adam_v":
            v[name] = arr
    opt = None
    if "optimizer" in header:
        o = header["optimizer"]
        opt = AdamW(o["lr"], o["weight_decay"], o["beta1"], o["beta2"], o["eps"], o["step_count"], m, v)
    return Checkpoint(params, opt, header.get("extra", {}))


def save_checkpoint(path, params: dict[str, Tensor], opt: AdamW | None = None,
                    extra: dict | None = None) -> None:
    """Atomic write via a temporary file in the same directory."""
    path = Path(path)
    data = encode_checkpoint(params, opt, extra)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return decode_checkpoint(buf, str(path))
