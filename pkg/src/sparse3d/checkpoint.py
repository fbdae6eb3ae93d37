"""Versioned binary checkpoint blobs.

Layout (all integers little-endian):
    magic  b"S3DB"
    u32    format version (1)
    u16    kind length, then kind utf-8 (e.g. "field", "renderer", "denoiser")
    u32    config length, then config JSON utf-8
    u32    tensor count
    per tensor: u16 name length, name utf-8, u8 ndim, u32 per dim,
                then float32 little-endian data

Tensor order is the module's state_dict order, which is fixed by construction.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import IoFailure, SchemaMismatch

MAGIC = b"S3DB"
VERSION = 1


def write_blob(path: str, kind: str, config: dict, tensors: "OrderedDict[str, np.ndarray]") -> None:
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            kb = kind.encode()
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            cb = json.dumps(config, sort_keys=True).encode()
            f.write(struct.pack("<I", len(cb)))
            f.write(cb)
            f.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors.items():
                nb = name.encode()
                f.write(struct.pack("<H", len(nb)))
                f.write(nb)
                arr = np.asarray(arr, dtype=np.float32)
                f.write(struct.pack("<B", arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<I", d))
                f.write(arr.astype("<f4").tobytes())
    except OSError as e:
        raise IoFailure(f"writing checkpoint {path}: {e}") from e


def read_blob(path: str):
    """Returns (kind, config dict, OrderedDict name -> float32 array)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(f"reading checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise SchemaMismatch(f"{path} is not a checkpoint blob")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise SchemaMismatch(f"unsupported checkpoint version {version}")
    (klen,) = struct.unpack_from("<H", raw, off)
    off += 2
    kind = raw[off:off + klen].decode()
    off += klen
    (clen,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off:off + clen].decode())
    off += clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = arr.copy()
    return kind, config, tensors


def save_module(path: str, kind: str, config: dict, module) -> None:
    """Write a torch module's state_dict in declared order."""
    tensors = OrderedDict(
        (name, t.detach().cpu().numpy()) for name, t in module.state_dict().items()
    )
    write_blob(path, kind, config, tensors)


def load_module_state(path: str, kind: str, module) -> dict:
    """Load a blob into an already-constructed module; returns the config."""
    import torch

    found, config, tensors = read_blob(path)
    if found != kind:
        raise SchemaMismatch(f"expected checkpoint kind {kind!r}, found {found!r}")
    state = module.state_dict()
    if set(state) != set(tensors):
        missing = set(state) ^ set(tensors)
        raise SchemaMismatch(f"checkpoint tensors do not match module: {sorted(missing)[:4]}")
    module.load_state_dict(
        {k: torch.from_numpy(v).to(state[k].dtype).reshape(state[k].shape) for k, v in tensors.items()}
    )
    return config
