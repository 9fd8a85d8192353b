"""Checkpoint archives.

A checkpoint is an uncompressed zip holding ``manifest.json`` plus one
``tensors/<name>.bin`` entry per tensor with its raw little-endian payload.
The manifest records each tensor's shape and dtype along with free-form
metadata (config, config hash, seeds, step counters). Entry timestamps are
fixed so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def _entry(name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info, data


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    path = Path(path)
    entries = {}
    index = {}
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        code = _DTYPES[t.dtype]
        arr = t.numpy().astype(np.dtype(code), copy=False)
        index[name] = {"shape": list(t.shape), "dtype": code}
        entries[f"tensors/{name}.bin"] = arr.tobytes(order="C")
    manifest = dict(meta)
    manifest["tensors"] = index
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w") as zf:
            zf.writestr(*_entry("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode()))
            for name, data in entries.items():
                zf.writestr(*_entry(name, data))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(tensors, manifest)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = {}
        for name, info in manifest["tensors"].items():
            arr = np.frombuffer(zf.read(f"tensors/{name}.bin"), dtype=np.dtype(info["dtype"]))
            arr = arr.reshape(info["shape"]).copy()
            tensors[name] = torch.from_numpy(arr).to(_TORCH[info["dtype"]])
    return tensors, manifest
