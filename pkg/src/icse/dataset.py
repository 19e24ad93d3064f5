"""Binary and CSV storage of simulated trajectories.

Batch file layout, little-endian::

    header   b"ICSE" | version u32 | n_traj u32 | N u32 | n_u u32 | n_y u32 | n_x u32
    per traj seed u64 | 19 x f64 params | N*n_u f64 inputs | N*n_x f64 clean states | N*n_y f64 outputs

Arrays are row-major (time-major).  The noisy state and the noise
realisations are not stored.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .process import N_PARAMS, ProcessParams, Trajectory

MAGIC = b"ICSE"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
_SEED = struct.Struct("<Q")


class DatasetError(ValueError):
    pass


def encode_batch(trajs: Sequence[Trajectory], N: int, n_u: int = 2, n_y: int = 1, n_x: int = 2) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(trajs), N, n_u, n_y, n_x)]
    for tr in trajs:
        if len(tr) != N:
            raise DatasetError(f"trajectory length {len(tr)} != N={N}")
        parts.append(_SEED.pack(tr.seed))
        parts.append(np.asarray(tr.params.as_array(), dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(tr.inputs, dtype="<f8").reshape(N, n_u).tobytes())
        parts.append(np.ascontiguousarray(tr.clean_states, dtype="<f8").reshape(N, n_x).tobytes())
        parts.append(np.ascontiguousarray(tr.outputs, dtype="<f8").reshape(N, n_y).tobytes())
    return b"".join(parts)


def decode_batch(buf: bytes):
    """Return ``(trajectories, N)``."""
    if len(buf) < _HEADER.size:
        raise DatasetError("file too short for header")
    magic, version, n_traj, N, n_u, n_y, n_x = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetError("bad magic; not a trajectory batch file")
    if version != VERSION:
        raise DatasetError(f"unsupported version {version}")
    rec = _SEED.size + 8 * (N_PARAMS + N * (n_u + n_x + n_y))
    if len(buf) != _HEADER.size + n_traj * rec:
        raise DatasetError(f"size mismatch: expected {_HEADER.size + n_traj * rec} bytes, got {len(buf)}")
    out: List[Trajectory] = []
    off = _HEADER.size
    for _ in range(n_traj):
        (seed,) = _SEED.unpack_from(buf, off)
        off += _SEED.size

        def take(count, shape):
            nonlocal off
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            return arr.astype(np.float64)

        params = take(N_PARAMS, (N_PARAMS,))
        u = take(N * n_u, (N, n_u))
        xo = take(N * n_x, (N, n_x))
        y = take(N * n_y, (N, n_y))
        out.append(Trajectory(inputs=u, clean_states=xo, outputs=y[:, 0] if n_y == 1 else y,
                              params=ProcessParams.from_array(params), seed=int(seed)))
    return out, N


def write_batch(path, trajs: Sequence[Trajectory], N: int) -> None:
    atomic_write_bytes(path, encode_batch(trajs, N))


def read_batch(path):
    return decode_batch(Path(path).read_bytes())


def write_trajectory_csv(path, tr: Trajectory) -> None:
    """Columns ``k,u1,u2,x1,x2,y`` (clean states)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("k", "u1", "u2", "x1", "x2", "y"))
        for k in range(len(tr)):
            wr.writerow([k, repr(float(tr.inputs[k, 0])), repr(float(tr.inputs[k, 1])),
                         repr(float(tr.clean_states[k, 0])), repr(float(tr.clean_states[k, 1])),
                         repr(float(np.ravel(tr.outputs[k])[0]))])
