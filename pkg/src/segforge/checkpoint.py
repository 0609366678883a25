"""Binary checkpoint container: model, optimizer state, run config, progress.

Layout (all little-endian): magic ``SEGCKPT1``, u32 version, two
length-prefixed UTF-8 JSON documents (run config, then meta holding epoch /
best record / optimizer step), u32 tensor count, then named tensor entries:
u32 name length, name bytes, u8 dtype code, u8 rank, u32 dims, raw data.
Names are prefixed ``param:``, ``buffer:``, ``adam.m:`` or ``adam.v:``.
Saves are atomic (temp file + rename), so an interrupted run keeps its last
intact checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError
from .layers import Module
from .model import ModelConfig, SegmentationModel

MAGIC = b"SEGCKPT1"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODE_FOR_NAME = {"float32": 0, "float64": 1, "uint8": 2, "int64": 3}


@dataclass
class CheckpointData:
    config: dict
    arrays: dict[str, np.ndarray]
    epoch: int
    best: Optional[dict]
    optimizer_step: int

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param:"):]: v for k, v in self.arrays.items()
                if k.startswith("param:")}

    def buffers(self) -> dict[str, np.ndarray]:
        return {k[len("buffer:"):]: v for k, v in self.arrays.items()
                if k.startswith("buffer:")}


def _collect_arrays(model: Module, optimizer=None) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        key = f"param:{name}"
        if key in arrays:
            raise ContractError(f"duplicate parameter name '{name}'")
        arrays[key] = p.data
    for name, b in model.named_buffers():
        key = f"buffer:{name}"
        if key in arrays:
            raise ContractError(f"duplicate buffer name '{name}'")
        arrays[key] = b
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return arrays


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    code = _CODE_FOR_NAME.get(arr.dtype.name)
    if code is None:
        raise FormatError(f"cannot checkpoint dtype {arr.dtype} for '{name}'")
    data = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    nbytes = name.encode("utf-8")
    parts = [struct.pack("<I", len(nbytes)), nbytes,
             struct.pack("<BB", code, data.ndim),
             struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b"",
             data.tobytes()]
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, config: dict, model: Module,
                    optimizer=None, epoch: int = 0, best: Optional[dict] = None) -> None:
    arrays = _collect_arrays(model, optimizer)
    meta = {
        "epoch": int(epoch),
        "best": best,
        "optimizer_step": int(optimizer.step_count) if optimizer is not None else 0,
    }
    config_doc = json.dumps(config, sort_keys=True).encode("utf-8")
    meta_doc = json.dumps(meta, sort_keys=True).encode("utf-8")

    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(config_doc)), config_doc,
             struct.pack("<I", len(meta_doc)), meta_doc,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        parts.append(_pack_entry(name, arr))

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> CheckpointData:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"not a checkpoint file: {path}")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} in {path}")

    def take_doc(off):
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + length > len(blob):
            raise FormatError(f"truncated checkpoint document in {path}")
        doc = json.loads(blob[off:off + length].decode("utf-8"))
        return doc, off + length

    config, off = take_doc(off)
    meta, off = take_doc(off)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise FormatError(f"unknown dtype code {code} for '{name}' in {path}")
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        end = off + n * dtype.itemsize
        if end > len(blob):
            raise FormatError(f"truncated tensor '{name}' in {path}")
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(dims)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        off = end
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes in {path}")

    return CheckpointData(config=config, arrays=arrays, epoch=int(meta["epoch"]),
                          best=meta.get("best"), optimizer_step=int(meta["optimizer_step"]))


def apply_arrays(model: Module, ckpt: CheckpointData) -> None:
    """Copy checkpoint params/buffers into a model; shapes must line up."""
    params = ckpt.params()
    for name, p in model.named_parameters():
        arr = params.pop(name, None)
        if arr is None:
            raise ConfigError(f"checkpoint has no parameter '{name}'; "
                              f"model config {model.config.to_dict() if hasattr(model, 'config') else '?'} "
                              f"vs checkpoint config {ckpt.config.get('model')}")
        if arr.shape != p.data.shape:
            raise ConfigError(f"parameter '{name}' shape {arr.shape} in checkpoint "
                              f"does not match model {p.data.shape}")
        p.data[...] = arr.astype(p.data.dtype, copy=False)
    if params:
        raise ConfigError(f"checkpoint has extra parameters {sorted(params)}")
    buffers = ckpt.buffers()
    for name, b in model.named_buffers():
        arr = buffers.pop(name, None)
        if arr is None:
            raise ConfigError(f"checkpoint has no buffer '{name}'")
        if arr.shape != b.shape:
            raise ConfigError(f"buffer '{name}' shape {arr.shape} in checkpoint "
                              f"does not match model {b.shape}")
        b[...] = arr.astype(b.dtype, copy=False)
    if buffers:
        raise ConfigError(f"checkpoint has extra buffers {sorted(buffers)}")


def restore_model(ckpt: CheckpointData) -> SegmentationModel:
    """Rebuild the architecture from the stored config and load its weights."""
    model_cfg = ckpt.config.get("model")
    if model_cfg is None:
        raise ConfigError("checkpoint config has no 'model' section")
    model = SegmentationModel(ModelConfig.from_dict(model_cfg))
    apply_arrays(model, ckpt)
    return model
