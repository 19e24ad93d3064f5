"""Self-describing checkpoint files.

Layout (little-endian)::

    b"ICSECKPT" | u32 format version | u64 header length | header JSON | tensor data

The JSON header carries the model config, the standardizer, arbitrary
metadata and, per tensor, its name, shape, byte offset and length.  Tensors
are stored as f64 in row-major order followed by a CRC32 of the data block.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .transformer import ModelConfig, Standardizer, Weights, check_weights, parameter_shapes

MAGIC = b"ICSECKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(w: Weights, cfg: ModelConfig, std: Standardizer,
                      meta: Optional[dict] = None) -> bytes:
    check_weights(w, cfg)
    tensors, blobs, offset = [], [], 0
    for name in parameter_shapes(cfg):
        arr = np.ascontiguousarray(w[name], dtype="<f8")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        "standardizer": std.to_dict(),
        "meta": meta or {},
        "tensors": tensors,
    }
    hb = _header_bytes(header)
    data = b"".join(blobs)
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hb)) + hb + data + _CRC.pack(zlib.crc32(data))


def decode_checkpoint(buf: bytes):
    """Return ``(weights, config, standardizer, meta)``; raises :class:`CheckpointError`."""
    if len(buf) < _PREFIX.size:
        raise CheckpointError("file too short for checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        std = Standardizer.from_dict(header["standardizer"])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    data_start = start + hlen
    total = sum(t["nbytes"] for t in tensors)
    if len(buf) != data_start + total + _CRC.size:
        raise CheckpointError(f"checkpoint size mismatch (expected {data_start + total + _CRC.size} "
                              f"bytes, found {len(buf)}); file truncated or padded")
    data = buf[data_start:data_start + total]
    (crc,) = _CRC.unpack_from(buf, data_start + total)
    if crc != zlib.crc32(data):
        raise CheckpointError("checkpoint data failed CRC check")

    w = {}
    for t in tensors:
        shape = tuple(t["shape"])
        if int(np.prod(shape)) * 8 != t["nbytes"]:
            raise CheckpointError(f"tensor {t['name']}: shape {shape} inconsistent with byte length")
        arr = np.frombuffer(data, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        w[t["name"]] = arr.reshape(shape).astype(cfg.dtype)
    try:
        check_weights(w, cfg)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return w, cfg, std, header.get("meta", {})


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, w: Weights, cfg: ModelConfig, std: Standardizer,
                    meta: Optional[dict] = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(w, cfg, std, meta))


def load_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)
