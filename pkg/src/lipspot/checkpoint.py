"""Single-file checkpoint container.

Layout::

    b"LSPCKPT\\n"
    u32 header length, header (UTF-8 JSON: format_version, config, epoch,
        extra, arrays=[{name, shape}])
    per array: u32 name length, name, u32 ndim, u32 dims..., u64 nbytes,
               little-endian float32 payload

Integers are little-endian. Every array is stored as float32, so float32
parameters round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LSPCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(v, dtype="<f4", order="C") for k, v in ckpt.arrays.items()}
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "extra": ckpt.extra,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            data = arr.tobytes()
            f.write(struct.pack("<Q", len(data)))
            f.write(data)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    arrays = {}
    for spec in header["arrays"]:
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        (nbytes,) = struct.unpack("<Q", take(8))
        if name != spec["name"] or list(shape) != spec["shape"]:
            raise CheckpointError(f"{path}: array {name!r} does not match the header entry {spec}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: array {name!r} has {nbytes} bytes for shape {shape}")
        arrays[name] = np.frombuffer(take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after the last array")
    return Checkpoint(header["config"], arrays, header["epoch"], header.get("extra", {}), header["format_version"])


def state_to_arrays(state: dict, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32) for k, v in state.items()}


def arrays_to_state(arrays: dict[str, np.ndarray], reference: dict, prefix: str = "") -> dict:
    """Rebuild a state dict from checkpoint arrays, checking names and shapes."""
    import torch

    out = {}
    for key, ref in reference.items():
        name = prefix + key
        if name not in arrays:
            raise CheckpointError(f"missing array {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"array {name!r} has shape {tuple(arr.shape)}, config expects {tuple(ref.shape)}")
        out[key] = torch.from_numpy(arr.copy()).to(ref.dtype)
    return out
