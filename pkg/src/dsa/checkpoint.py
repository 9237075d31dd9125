"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes   b"DSACKPT\\0"
    version   u32       currently 1
    meta_len  u32       length of the UTF-8 JSON metadata that follows
    meta      meta_len bytes (graph document, group map, free-form extras)
    count     u32       number of tensors
    table     count entries of:
                name_len u16, name (UTF-8), dtype u8, ndim u8,
                dims u32 * ndim, offset u64, nbytes u64
    data      raw little-endian buffers; offsets are relative to the start
              of this section and aligned to 8 bytes

dtype codes: 0 float32, 1 float64, 2 int64, 3 uint8.
Tensor names: ``param/<name>``, ``buffer/<name>``, ``mask/<group>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .graph import GroupAssignment, NetGraph
from .nn import ModelState

MAGIC = b"DSACKPT\0"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ModelState, masks=None, meta: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for k, v in model.params.items():
        tensors[f"param/{k}"] = v
    for k, v in model.buffers.items():
        tensors[f"buffer/{k}"] = v
    for k, m in enumerate(masks or []):
        if m is not None:
            tensors[f"mask/{k}"] = np.asarray(m, dtype=np.uint8)
    doc = {
        "graph": model.graph.to_dict(),
        "group_of": dict(model.groups.group_of),
        "K": model.groups.K,
        "dtype": np.dtype(model.dtype).name,
        "extra": meta or {},
    }
    meta_bytes = json.dumps(doc, sort_keys=True).encode()

    table = bytearray()
    data = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = CODES.get(np.dtype(dt).newbyteorder("<") if dt.itemsize > 1 else dt)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        buf = arr.astype(DTYPES[code], copy=False).tobytes()
        data.extend(b"\0" * (-len(data) % 8))
        offset = len(data)
        data.extend(buf)
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", offset, len(buf))
    out = MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(tensors)) + bytes(table) + bytes(data)
    Path(path).write_bytes(out)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    meta = json.loads(raw[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", raw, pos)
        pos += 16
        entries.append((name, code, dims, offset, nbytes))
    tensors = {}
    for name, code, dims, offset, nbytes in entries:
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        start = pos + offset
        if start + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, DTYPES[code], count=nbytes // DTYPES[code].itemsize, offset=start).reshape(dims).copy()
    return meta, tensors


def load_checkpoint(path) -> tuple[ModelState, list[np.ndarray | None], dict]:
    meta, tensors = read_checkpoint(path)
    graph = NetGraph.from_dict(meta["graph"])
    groups = GroupAssignment({k: int(v) for k, v in meta["group_of"].items()}, int(meta["K"]))
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer/")}
    masks: list[np.ndarray | None] = [None] * groups.K
    for k, v in tensors.items():
        if k.startswith("mask/"):
            masks[int(k[5:])] = v.astype(np.float64)
    model = ModelState(graph, groups, params, buffers, {}, np.dtype(meta["dtype"]).type)
    return model, masks, meta.get("extra", {})
