"""Versioned binary checkpoints of every parameter tensor in a graph.

Layout (little-endian):

    4s   magic b"SPCK"
    u16  format version
    u64  total file size in bytes
    64s  architecture hash (hex sha256 of the settings that fix shapes)
    u32  length of config text, then that many UTF-8 bytes
    u32  tensor count, then per tensor:
         u16 name length, name bytes, u8 ndim, ndim x u32 extents,
         float64 data in row-major order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_config_text
from .layers import LayerGraph

MAGIC = b"SPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def save_checkpoint(path, graph: LayerGraph, cfg: ExperimentConfig) -> None:
    body = bytearray()
    body += cfg.architecture_hash().encode("ascii")
    text = cfg.to_text().encode("utf-8")
    body += struct.pack("<I", len(text)) + text
    params = graph.params()
    body += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode("utf-8")
        body += struct.pack("<H", len(name)) + name
        body += struct.pack("<B", p.value.ndim)
        body += struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        body += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
    header = MAGIC + struct.pack("<HQ", VERSION, 4 + 2 + 8 + len(body))
    Path(path).write_bytes(header + bytes(body))


def read_checkpoint(path) -> tuple[str, ExperimentConfig, dict[str, np.ndarray]]:
    """Returns (architecture hash, stored config, tensors by name)."""
    buf = Path(path).read_bytes()
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, size = struct.unpack_from("<HQ", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    if size != len(buf):
        raise CheckpointError(f"{path}: header says {size} bytes, file has {len(buf)}")
    off = 14
    arch = buf[off:off + 64].decode("ascii")
    off += 64
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    cfg = parse_config_text(buf[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        nbytes = 8 * int(np.prod(shape))
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return arch, cfg, tensors


def load_checkpoint(path, graph: LayerGraph, cfg: ExperimentConfig) -> ExperimentConfig:
    """Copy stored tensors into ``graph``; the architecture hash must match ``cfg``."""
    arch, stored_cfg, tensors = read_checkpoint(path)
    if arch != cfg.architecture_hash():
        raise CheckpointMismatchError(
            f"{path}: checkpoint is for {stored_cfg.variant}, network is {cfg.variant}"
        )
    params = {p.name: p for p in graph.params()}
    if set(params) != set(tensors):
        raise CheckpointMismatchError(f"{path}: parameter names differ from the network")
    for name, value in tensors.items():
        if params[name].value.shape != value.shape:
            raise CheckpointMismatchError(
                f"{path}: {name} has shape {value.shape}, network expects {params[name].value.shape}"
            )
        params[name].value[...] = value
    return stored_cfg
