"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic  b"SLMCKPT\\0"          8 bytes
    version                       uint32
    header length                 uint64
    header                        UTF-8 JSON, sorted keys
    payload                       concatenated blobs
    digest                        SHA-256 over header + payload

The header carries the config snapshot, the step counter and a blob index of
``{name, kind, dtype, shape, offset, nbytes}``. Weights and optimizer moments
are stored as ``<f4``; the RNG state as raw ``uint8``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SLMCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {"f4": "<f4", "u1": "u1", "i8": "<i8"}


@dataclass
class Container:
    header: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    kinds: dict[str, str] = field(default_factory=dict)

    def of_kind(self, kind: str) -> dict[str, torch.Tensor]:
        return {n: t for n, t in self.tensors.items() if self.kinds[n] == kind}


def _to_array(value) -> tuple[np.ndarray, str]:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu()
        if value.dtype == torch.uint8:
            return value.numpy().astype("u1"), "u1"
        if value.dtype in (torch.int64, torch.int32):
            return value.numpy().astype("<i8"), "i8"
        return value.to(torch.float32).numpy().astype("<f4"), "f4"
    arr = np.asarray(value)
    if arr.dtype == np.uint8:
        return arr.astype("u1"), "u1"
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype("<i8"), "i8"
    return arr.astype("<f4"), "f4"


def write_container(path, header: dict, blobs: dict[str, tuple[str, object]]) -> None:
    """Write ``blobs`` ({name: (kind, tensor)}) with ``header`` to ``path`` atomically."""
    index = []
    chunks = []
    offset = 0
    for name in sorted(blobs):
        kind, value = blobs[name]
        arr, code = _to_array(value)
        raw = np.ascontiguousarray(arr).tobytes()
        index.append(
            {"name": name, "kind": kind, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["format_version"] = FORMAT_VERSION
    full_header["blobs"] = index
    head = json.dumps(full_header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(head + payload).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
        fh.write(digest)
    tmp.replace(path)


def read_container(path) -> Container:
    data = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(data) < fixed or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic or truncated)")
    version, head_len = struct.unpack("<IQ", data[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is incompatible with supported version {FORMAT_VERSION}")
    end_head = fixed + head_len
    if len(data) < end_head + 32:
        raise CheckpointError(f"{path}: file truncated")
    head = data[fixed:end_head]
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload_len = sum(b["nbytes"] for b in header["blobs"])
    payload = data[end_head : end_head + payload_len]
    digest = data[end_head + payload_len : end_head + payload_len + 32]
    if len(payload) != payload_len or len(digest) != 32:
        raise CheckpointError(f"{path}: file truncated")
    if len(data) != end_head + payload_len + 32:
        raise CheckpointError(f"{path}: trailing bytes after digest")
    if hashlib.sha256(head + payload).digest() != digest:
        raise CheckpointError(f"{path}: integrity check failed (digest mismatch)")
    tensors, kinds = {}, {}
    for blob in header["blobs"]:
        raw = payload[blob["offset"] : blob["offset"] + blob["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[blob["dtype"]]).reshape(blob["shape"])
        tensors[blob["name"]] = torch.from_numpy(arr.copy())
        kinds[blob["name"]] = blob["kind"]
    return Container(header, tensors, kinds)
