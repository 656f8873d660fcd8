"""Binary checkpoint format.

Layout (little-endian)::

    magic      8 bytes  b"MATCNCKP"
    version    u32
    cfg_len    u32, then cfg_len bytes of UTF-8 JSON (run configuration)
    n_arrays   u32
    per array:
        name_len u16, name (UTF-8)
        kind     u8   0 = trainable parameter, 1 = buffer
        ndim     u8, then ndim x u32 dims
        data     prod(dims) x float64

Arrays are written in the order given, so a save/load/save cycle is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"MATCNCKP"
VERSION = 1
PARAM, BUFFER = 0, 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Tensor], config: dict,
                    buffers: dict[str, np.ndarray] | None = None) -> None:
    buffers = buffers or {}
    cfg = json.dumps(config, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg,
              struct.pack("<I", len(params) + len(buffers))]
    items = [(k, PARAM, v.data) for k, v in params.items()] + [(k, BUFFER, np.asarray(v)) for k, v in buffers.items()]
    for name, kind, arr in items:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", kind, arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict, dict[str, np.ndarray]]:
    """Return (parameters, config, buffers)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        version, cfg_len = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        config = json.loads(blob[pos:pos + cfg_len])
        pos += cfg_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params, buffers = {}, {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            kind, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
            if kind == PARAM:
                params[name] = Tensor(arr, requires_grad=True, name=name)
            else:
                buffers[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"corrupt checkpoint {path}: {len(blob) - pos} trailing bytes")
    return params, config, buffers
