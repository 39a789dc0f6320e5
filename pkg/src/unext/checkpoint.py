"""Binary checkpoint: config + named float32 tensors + trailing CRC-32.

Layout (all integers little-endian)::

    b"UNXT"  u32 version
    u32 config_len, config_len bytes of UTF-8 "key=value" lines
    u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u32 rank, rank x u64 extents, float32 payload
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .arch import Model, UNeXtConfig, buffer_shapes, build_model, param_shapes
from .tensor import Tensor

MAGIC = b"UNXT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def dumps(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = "\n".join(model.config.to_lines()).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg]
    tensors = [(k, v.data) for k, v in model.params.items()] + list(model.buffers.items())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> Model:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a UNXT checkpoint (bad magic or too short)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: file is corrupt or truncated")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("unexpected end of checkpoint")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("unexpected end of checkpoint")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    (clen,) = take("<I")
    try:
        cfg = UNeXtConfig.from_lines(take_bytes(clen).decode("utf-8").splitlines())
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid embedded config: {exc}") from exc
    expected = {**param_shapes(cfg), **buffer_shapes(cfg)}
    (count,) = take("<I")
    loaded = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = take_bytes(nlen).decode("utf-8")
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take_bytes(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name not in expected:
            raise CheckpointError(f"tensor {name!r} does not belong to this architecture")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(shape)}, config implies {expected[name]}")
        loaded[name] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    missing = set(expected) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    model = build_model(cfg, seed=0, dtype=np.float32)
    for k in model.params:
        model.params[k] = Tensor(loaded[k], requires_grad=True, dtype=np.float32)
    for k in model.buffers:
        model.buffers[k] = loaded[k].copy()
    return model.eval()


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> Model:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc})") from exc
    return loads(blob)
