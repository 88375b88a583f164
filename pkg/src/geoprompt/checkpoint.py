"""Self-describing checkpoint container.

Layout::

    b"PGCK" | version:u8 | header_len:u32 LE | header (UTF-8 JSON) | tensor data

The header echoes the config, seed and extra state and lists every tensor by
name and shape. Tensor data is row-major little-endian float32, concatenated in
header order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

MAGIC = b"PGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: Dict[str, torch.Tensor],
                    config: Dict[str, Any], seed: int, kind: str,
                    extra: Optional[Dict[str, Any]] = None) -> str:
    """Write atomically; returns the content hash (sha256 hex of the file bytes)."""
    entries, blobs = [], []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {arr.dtype}; only float32 is stored")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    header = json.dumps({"kind": kind, "config": config, "seed": seed, "extra": extra or {},
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<BI", VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> Dict[str, Any]:
    """Returns ``{"kind", "config", "seed", "extra", "tensors", "hash"}``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 9:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<BI", raw[4:9])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, "
                              f"this build reads version {VERSION}")
    header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    offset = 9 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data at {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
        offset += nbytes
    return {"kind": header["kind"], "config": header["config"], "seed": header["seed"],
            "extra": header["extra"], "tensors": tensors,
            "hash": hashlib.sha256(raw).hexdigest()}


def module_tensors(module: torch.nn.Module, prefix: str) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: Dict[str, torch.Tensor], prefix: str) -> None:
    """Load ``prefix.*`` tensors, demanding an exact name and shape match."""
    own = module.state_dict()
    got = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    if set(got) != set(own):
        missing = sorted(set(own) - set(got))[:3]
        unexpected = sorted(set(got) - set(own))[:3]
        raise CheckpointError(f"architecture mismatch for {prefix}: missing {missing}, "
                              f"unexpected {unexpected}")
    for k, v in got.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"architecture mismatch for {prefix}.{k}: checkpoint "
                                  f"{tuple(v.shape)} vs model {tuple(own[k].shape)}")
    module.load_state_dict(got)


def tensor_hash(tensors: Dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensor_hash(dict(module.state_dict()))
