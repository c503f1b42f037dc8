"""Single-file checkpoints.

Layout::

    b"VTBRCKPT" | u32 format version | u64 manifest length | manifest JSON | data

The manifest lists every array (name, shape, byte offset, original dtype),
the model config, training step, lineage metadata and a SHA-256 of the data
blob. Data is the concatenation of little-endian float32 arrays in manifest
order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from vtbr.errors import CheckpointCorruptError, CheckpointVersionError

MAGIC = b"VTBRCKPT"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQ")


def save_checkpoint(state: Mapping[str, torch.Tensor], meta: dict, path: str | Path) -> str:
    """Write ``state`` with ``meta``; returns the data hash."""
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data), "dtype": str(arr.dtype)})
        blobs.append(data)
        offset += len(data)
    payload = b"".join(blobs)
    digest = hashlib.sha256(payload).hexdigest()
    manifest = json.dumps({"arrays": entries, "sha256": digest, "meta": meta}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(payload)
    tmp.replace(path)
    return digest


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointCorruptError(f"{path}: truncated header")
    magic, version, mlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body = raw[_HEAD.size:]
    if len(body) < mlen:
        raise CheckpointCorruptError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(body[:mlen])
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest") from exc
    payload = body[mlen:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CheckpointCorruptError(f"{path}: data hash mismatch (truncated or modified)")
    state = {}
    for e in manifest["arrays"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
        dtype = getattr(torch, e["dtype"], torch.float32) if e["dtype"] != "float32" else torch.float32
        state[e["name"]] = torch.from_numpy(arr).to(dtype)
    return state, manifest["meta"]


def subset_state(state: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    """Entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}
