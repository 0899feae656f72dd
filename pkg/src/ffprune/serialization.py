"""Versioned binary tensor container and atomic file writes.

Layout::

    b"FFPR"  | u32 format version | u64 header length | JSON header | raw tensor bytes

The header is canonical JSON (sorted keys, no whitespace) and lists every
tensor's name, dtype, shape and byte offset, so a save -> load -> save round
trip reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"FFPR"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
}
_NP_DTYPES = {name: np.dtype(name).newbyteorder("<") for name in _DTYPES.values()}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Raised when a container is malformed or of the wrong kind."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensors(kind: str, meta: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        dtype = _DTYPES[t.dtype]
        raw = t.numpy().astype(_NP_DTYPES[dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = canonical_json({"kind": kind, "meta": meta, "tensors": entries}).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def decode_tensors(data: bytes, kind: str | None = None) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    if data[:4] != MAGIC:
        raise CheckpointError("not an ffprune container (bad magic)")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, found {header['kind']!r}")
    body = memoryview(data)[16 + header_len :]
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for e in header["tensors"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header["meta"], tensors


def save_tensors(path, kind: str, meta: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> None:
    atomic_write_bytes(path, encode_tensors(kind, meta, tensors))


def load_tensors(path, kind: str | None = None):
    return decode_tensors(Path(path).read_bytes(), kind)
