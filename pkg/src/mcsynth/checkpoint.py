"""Binary checkpoint container.

Layout::

    8 bytes   magic b"MCSYNCK1"
    8 bytes   header length n, little-endian uint64
    n bytes   UTF-8 JSON header (sorted keys); ``header["tensors"]`` lists
              {name, shape, offset, nbytes} for every blob
    ...       concatenated little-endian float32 blobs

Saving the same header and tensors always produces the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MCSYNCK1"


class CheckpointError(ValueError):
    pass


def _as_f32(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.ascontiguousarray(x, dtype="<f4")


def encode(header: dict, tensors: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        a = _as_f32(value)
        b = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    full = dict(header)
    full["tensors"] = entries
    text = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(text)) + text + b"".join(blobs)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    base = 16 + n
    tensors = {}
    for e in header.pop("tensors", []):
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(data):
            raise CheckpointError(f"truncated blob {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(data[start:end], dtype="<f4").reshape(e["shape"]).copy()
    return header, tensors


def save(path, header: dict, tensors: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(header, tensors))
    tmp.replace(path)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {}
    for k, v in module.state_dict().items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key!r}")
        if tuple(tensors[key].shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {key!r}: {tensors[key].shape} vs {tuple(v.shape)}")
        state[k] = torch.from_numpy(tensors[key]).to(v.dtype)
    module.load_state_dict(state)
