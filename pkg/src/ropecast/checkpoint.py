"""Checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"ROPECKPT"
    version      u32       FORMAT_VERSION
    header_len   u64
    header       header_len bytes of UTF-8 JSON
    data         concatenated raw tensor bytes (little-endian, C order)
    checksum     32 bytes  SHA-256 of every preceding byte

The JSON header holds ``model_config``, ``meta`` (free-form, e.g. training
step and config) and ``tensors``: a list of ``{name, dtype, shape, offset,
nbytes}`` entries with offsets relative to the start of ``data``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ROPECKPT"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(model_config: dict, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for tensor {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"model_config": model_config, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> tuple[dict, dict[str, torch.Tensor], dict]:
    if len(data) < len(MAGIC) + 12 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, header_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + header_len])
    blob = memoryview(body)[start + header_len:]
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).astype(e["dtype"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return header["model_config"], tensors, header["meta"]


def save(path, model_config: dict, tensors: dict, meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode(model_config, tensors, meta))


def load(path) -> tuple[dict, dict[str, torch.Tensor], dict]:
    return decode(Path(path).read_bytes())


def load_model(path):
    """Rebuild the model stored at ``path``. Returns ``(model, tensors, meta)``."""
    from .dit import DiT, ModelConfig

    cfg_dict, tensors, meta = load(path)
    cfg = ModelConfig.from_dict(cfg_dict)
    model = DiT(cfg)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"tensor table does not match model: {sorted(missing)}")
    model.load_state_dict(state)
    return model, tensors, meta
