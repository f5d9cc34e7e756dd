"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MMTL"  u32 version  u32 n_config  <config JSON, utf-8>
    u32 n_tensors
    per tensor: u16 n_name <name>  u8 ndim  u32*ndim shape  <float32 data>
    u32 CRC32 of everything above

Tensors appear in the model's canonical parameter order.  Writes go to a
temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .model import ModelConfig, MultiModalLM

MAGIC = b"MMTL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model: MultiModalLM, extra: dict | None = None) -> bytes:
    config = {"model": model.config.to_dict()}
    if extra:
        config["extra"] = extra
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    names = model.param_names()
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name].data
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> tuple[MultiModalLM, dict]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an MMTL checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    version, n_cfg = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    config = json.loads(body[off:off + n_cfg].decode())
    off += n_cfg
    (n_tensors,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(n_tensors):
        (n_name,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + n_name].decode()
        off += n_name
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = arr.astype(np.float64)
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    mcfg = ModelConfig.from_dict(config["model"])
    if list(params) != list(MultiModalLM.shapes_for(mcfg)):
        raise CheckpointError("tensor names or order do not match the configuration")
    return MultiModalLM(mcfg, params=params), config.get("extra", {})


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: MultiModalLM, extra: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(model, extra))


def load_checkpoint(path) -> tuple[MultiModalLM, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def round_to_float32(model: MultiModalLM) -> MultiModalLM:
    """Clone with every weight passed through float32, as a saved model sees it."""
    return MultiModalLM(model.config, params={n: model.params[n].data.astype(np.float32).astype(np.float64)
                                              for n in model.param_names()})
