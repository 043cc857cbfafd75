"""The NNZM model file format.

Layout, all little-endian::

    b"NNZM" | u16 version (=1) | u32 header length | UTF-8 JSON header | payloads

Payloads follow the header's tensor list in order:

* ``dense``       f32 values
* ``dense+mask``  f32 values, then one u8 mask byte per value
* ``sparse``      u64 nnz, u32 flat indices[nnz], f32 values[nnz]
  (nonzero effective weights only; mask = stored indices plus the header's
  ``zero_kept`` list)

Prunable weights use ``dense+mask`` or ``sparse`` depending on the storage
kind; biases, BN parameters and BN running statistics are always ``dense``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..tensor import Tensor
from .layers import ModelSpec
from .model import Model

MAGIC = b"NNZM"
VERSION = 1
STORAGE_KINDS = ("dense", "sparse")
_PREAMBLE = struct.Struct("<4sHI")


class ModelFormatError(ValueError):
    pass


def _tensor_entries(model: Model, storage: str) -> list[dict]:
    prunable = set(model.prunable_names())
    entries = []
    for name, p in model.params.items():
        entry = {"name": name, "shape": list(p.shape), "kind": "param"}
        if name in prunable:
            entry["encoding"] = "sparse" if storage == "sparse" else "dense+mask"
        else:
            entry["encoding"] = "dense"
        entries.append(entry)
    for name, b in model.buffers.items():
        entries.append({"name": name, "shape": list(b.shape), "kind": "buffer", "encoding": "dense"})
    return entries


def encode(model: Model, storage: str = "dense") -> bytes:
    if storage not in STORAGE_KINDS:
        raise ValueError(f"storage must be one of {STORAGE_KINDS}, got {storage!r}")
    entries = _tensor_entries(model, storage)
    payloads = []
    for entry in entries:
        name = entry["name"]
        if entry["kind"] == "buffer":
            payloads.append(model.buffers[name].astype("<f4").tobytes())
            continue
        values = model.params[name].data
        if entry["encoding"] == "dense":
            payloads.append(values.astype("<f4").tobytes())
        elif entry["encoding"] == "dense+mask":
            payloads.append(values.astype("<f4").tobytes() + model.masks[name].astype("u1").tobytes())
        else:
            eff = model.effective_weight(name).reshape(-1)
            mask = model.masks[name].reshape(-1)
            idx = np.flatnonzero(eff)
            entry["zero_kept"] = np.flatnonzero(mask & (eff == 0)).tolist()
            payloads.append(
                struct.pack("<Q", idx.size) + idx.astype("<u4").tobytes() + eff[idx].astype("<f4").tobytes()
            )
    header = json.dumps(
        {"version": VERSION, "storage": storage, "spec": model.spec.to_dict(), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(header)) + header + b"".join(payloads)


def save(model: Model, path: Union[str, Path], storage: str = "dense") -> int:
    """Write ``model``; returns the number of bytes written."""
    blob = encode(model, storage)
    Path(path).write_bytes(blob)
    return len(blob)


def _take(blob: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(blob):
        raise ModelFormatError(f"truncated file: need {n} bytes for {what} at offset {offset}, file has {len(blob)}")
    return blob[offset : offset + n]


def decode(blob: bytes) -> Model:
    magic, version, header_len = _PREAMBLE.unpack(_take(blob, 0, _PREAMBLE.size, "preamble"))
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version} at offset 4")
    offset = _PREAMBLE.size
    try:
        header = json.loads(_take(blob, offset, header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header at offset {offset}: {exc}") from None
    offset += header_len
    spec = ModelSpec.from_dict(header["spec"])
    params, buffers, masks = {}, {}, {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        enc = entry["encoding"]
        if enc in ("dense", "dense+mask"):
            values = np.frombuffer(_take(blob, offset, 4 * n, name), dtype="<f4").astype(np.float32).reshape(shape)
            offset += 4 * n
            if entry["kind"] == "buffer":
                buffers[name] = values.copy()
                continue
            params[name] = Tensor(values.copy(), requires_grad=True)
            if enc == "dense+mask":
                masks[name] = np.frombuffer(_take(blob, offset, n, f"{name} mask"), dtype="u1").astype(bool).reshape(shape)
                offset += n
        elif enc == "sparse":
            (nnz,) = struct.unpack("<Q", _take(blob, offset, 8, f"{name} nnz"))
            offset += 8
            if nnz > n:
                raise ModelFormatError(f"{name}: nnz {nnz} exceeds tensor size {n} at offset {offset - 8}")
            idx = np.frombuffer(_take(blob, offset, 4 * nnz, f"{name} indices"), dtype="<u4").astype(np.int64)
            offset += 4 * nnz
            vals = np.frombuffer(_take(blob, offset, 4 * nnz, f"{name} values"), dtype="<f4")
            offset += 4 * nnz
            if nnz and idx.max() >= n:
                raise ModelFormatError(f"{name}: index out of range at offset {offset - 8 * nnz}")
            flat = np.zeros(n, dtype=np.float32)
            flat[idx] = vals
            mask = np.zeros(n, dtype=bool)
            mask[idx] = True
            mask[np.asarray(entry.get("zero_kept", []), dtype=np.int64)] = True
            params[name] = Tensor(flat.reshape(shape), requires_grad=True)
            masks[name] = mask.reshape(shape)
        else:
            raise ModelFormatError(f"{name}: unknown encoding {enc!r}")
    if offset != len(blob):
        raise ModelFormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")
    model = Model(spec, params, buffers, masks)
    missing = set(model.prunable_names()) - set(masks)
    if missing:
        raise ModelFormatError(f"file lacks masks for {sorted(missing)}")
    return model.eval()


def load(path: Union[str, Path]) -> Model:
    return decode(Path(path).read_bytes())


def payload_size(model: Model, storage: str) -> int:
    """Bytes after the header: parameter payload plus masks (dense) plus BN buffers."""
    from .cost import DENSE_VALUE_BYTES, count_params, sparse_bytes

    buffer_bytes = sum(DENSE_VALUE_BYTES * b.size for b in model.buffers.values())
    if storage == "sparse":
        return sparse_bytes(model) + buffer_bytes
    mask_bytes = sum(model.masks[n].size for n in model.prunable_names())
    return DENSE_VALUE_BYTES * count_params(model)[0] + mask_bytes + buffer_bytes


def read_header(path: Union[str, Path]) -> tuple[int, dict]:
    """Header length and parsed header of a model file."""
    with open(path, "rb") as fh:
        pre = fh.read(_PREAMBLE.size)
        magic, _, header_len = _PREAMBLE.unpack(pre)
        if magic != MAGIC:
            raise ModelFormatError(f"bad magic {magic!r} at offset 0")
        return header_len, json.loads(fh.read(header_len).decode("utf-8"))
