"""Flat tensor checkpoint: JSON header followed by little-endian float32 data.

Layout::

    8 bytes   header length L (little-endian uint64)
    L bytes   UTF-8 JSON header
    ...       concatenated float32 payloads, in header order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = "kptlm-ckpt/1"


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, payloads, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {"format": FORMAT_VERSION, "dtype": "float32", "byte_order": "little",
              "tensors": entries, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            for raw in payloads:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    return header


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        body = f.read()
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    out = {}
    for e in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out, header.get("meta", {})
