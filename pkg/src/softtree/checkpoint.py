"""Versioned binary checkpoints with CRC32 integrity.

Layout (all little-endian):

    magic "ACNT" | u32 version | u32 config_len | config text (utf-8)
    u32 tensor_count | tensor entries... | u32 crc32-of-everything-before

Tensor entry: u32 name_len | name | u32 dtype_code | u32 ndim |
u64 dims[ndim] | raw payload.  The table covers every parameter and every
batch-norm running statistic, so save -> load -> save is byte-identical
and a loaded model predicts bit-identically to the saved one.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .backbone import build_desk_backbone
from .config import RunConfig, format_config, parse_config
from .errors import CheckpointError, ConfigError
from .nn import Module
from .tree import TreeModel, build_tree

MAGIC = b"ACNT"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def model_tensors(model: Module) -> list:
    """(name, array) pairs for all parameters and buffers, stable order."""
    entries = [(n, p.data) for n, p in model.named_parameters()]
    entries += list(model.named_buffers())
    return entries


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb
    head += struct.pack("<II", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def save_checkpoint(model: Module, cfg: RunConfig, path) -> None:
    config_bytes = format_config(cfg).encode("utf-8")
    body = MAGIC + struct.pack("<I", VERSION)
    body += struct.pack("<I", len(config_bytes)) + config_bytes
    entries = model_tensors(model)
    body += struct.pack("<I", len(entries))
    for name, arr in entries:
        body += _pack_entry(name, arr)
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(body)


def _read_entries(raw: bytes, pos: int, count: int):
    table = {}
    order = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<II", raw, pos)
        pos += 8
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"tensor '{name}': unknown dtype code {code}")
        dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(dims)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(raw[pos:pos + nbytes], dtype=dtype).reshape(dims)
        pos += nbytes
        table[name] = arr
        order.append(name)
    return table, order, pos


def build_model(cfg: RunConfig, num_classes: int | None = None) -> TreeModel:
    """Construct backbone plus tree from a run configuration (one seeded
    stream covers both, so builds are reproducible end to end)."""
    k = num_classes if num_classes is not None else cfg.tree_classes
    if k < 2:
        raise ConfigError("number of classes unknown; set tree.classes or "
                          "provide a dataset")
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    rng = np.random.default_rng(cfg.seed)
    bb = build_desk_backbone(cfg.backbone_spec(), rng, dtype=dtype)
    if cfg.backbone_params:
        import_parameter_table(bb, cfg.backbone_params)
    return build_tree(cfg.tree_config(k), bb, rng, dtype=dtype)


def load_checkpoint(path):
    """Rebuild (model, config) from a checkpoint file, verifying magic,
    version, CRC, and exact tensor-table agreement."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    (clen,) = struct.unpack_from("<I", raw, 8)
    config_text = raw[12:12 + clen].decode("utf-8")
    cfg = parse_config(config_text)
    pos = 12 + clen
    (count,) = struct.unpack_from("<I", raw, pos)
    table, _, _ = _read_entries(raw, pos + 4, count)

    model = build_model(cfg)
    _load_tensors(model, table, strict_extra=True)
    return model, cfg


def _load_tensors(model: Module, table: dict, strict_extra: bool) -> None:
    seen = set()
    for name, arr in model_tensors(model):
        if name not in table:
            raise CheckpointError(f"missing tensor '{name}'")
        stored = table[name]
        if tuple(stored.shape) != tuple(arr.shape):
            raise CheckpointError(
                f"tensor '{name}' has shape {tuple(stored.shape)}, "
                f"model expects {tuple(arr.shape)}")
        if stored.dtype.newbyteorder("=") != arr.dtype:
            raise CheckpointError(
                f"tensor '{name}' has dtype {stored.dtype}, model expects {arr.dtype}")
        arr[...] = stored
        seen.add(name)
    if strict_extra:
        extra = set(table) - seen
        if extra:
            raise CheckpointError(f"unexpected tensors in file: {sorted(extra)}")


def write_parameter_table(module: Module, path) -> None:
    """Stand-alone tensor table (same entry format as checkpoints); used to
    import externally trained backbone weights."""
    entries = model_tensors(module)
    body = struct.pack("<I", len(entries))
    for name, arr in entries:
        body += _pack_entry(name, arr)
    Path(path).write_bytes(body)


def import_parameter_table(module: Module, path) -> None:
    raw = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", raw, 0)
    table, _, _ = _read_entries(raw, 4, count)
    _load_tensors(module, table, strict_extra=True)
