"""Versioned checkpoint container.

Layout: 8-byte magic, little-endian uint32 format version, uint32 header
length, a UTF-8 JSON header (model config, array index, free-form metadata),
then the concatenated little-endian float32 arrays in header order.
"""
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .network import build_model

MAGIC = b"PSEAECK\x00"
FORMAT_VERSION = 1
LAYOUT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, config, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray) with ``config``; returns the path."""
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        if not np.all(np.isfinite(data)):
            raise CheckpointError(f"array {name!r} has non-finite values")
        raw = data.tobytes()
        index.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": config.to_dict(),
        "layout_version": LAYOUT_VERSION,
        "dtype": "<f4",
        "arrays": index,
        "meta": meta or {},
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_container(path):
    """Returns ``(config, arrays, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    if header.get("layout_version") != LAYOUT_VERSION:
        raise CheckpointError(f"{path}: parameter layout version {header.get('layout_version')}, "
                              f"expected {LAYOUT_VERSION}")
    body = raw[16 + hlen:]
    arrays = {}
    for item in header["arrays"]:
        start, n = item["offset"], item["nbytes"]
        if start + n > len(body):
            raise CheckpointError(f"{path}: array {item['name']!r} runs past end of file")
        arrays[item["name"]] = np.frombuffer(body[start:start + n], dtype="<f4").reshape(item["shape"]).copy()
    return ModelConfig.from_dict(header["config"]), arrays, header["meta"]


def save_model(model, path, extra=None, meta=None):
    arrays = {n: p.detach().cpu().numpy() for n, p in model.state_dict().items()}
    for name, arr in (extra or {}).items():
        arrays["extra/" + name] = arr
    return write_container(path, model.config, arrays, meta)


def load_model(path):
    """Returns ``(model, extra_arrays, meta)``; parameters are restored bit-exactly."""
    config, arrays, meta = read_container(path)
    model = build_model(config, seed=0)
    state = {n: torch.from_numpy(a) for n, a in arrays.items() if not n.startswith("extra/")}
    expected = model.state_dict()
    missing = set(expected) - set(state)
    unexpected = set(state) - set(expected)
    if missing or unexpected:
        raise CheckpointError(f"{path}: parameter mismatch (missing {sorted(missing)}, "
                              f"unexpected {sorted(unexpected)})")
    for name, t in state.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, "
                                  f"expected {tuple(expected[name].shape)}")
    model.load_state_dict(state)
    extra = {n[len("extra/"):]: a for n, a in arrays.items() if n.startswith("extra/")}
    return model, extra, meta
