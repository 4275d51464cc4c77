"""Binary checkpoint container shared by every pipeline stage.

Layout (all little-endian)::

    magic      4 bytes  b"SP3M" (model) or b"SP3F" (fused)
    version    u32
    n_fields   u32, then n_fields x i64 config fields
    [SP3F only] n_layers u32, n_dim_fields u32, then the dims table as i64
    n_records  u32, then per record:
        name_len u32, name (UTF-8), rows u64, cols u64, rows*cols x f64

Records are written in sorted name order so identical content gives
identical bytes. Model checkpoints hold weights plus any of the optional
``feat.*``, ``proj.*``, ``mask.*`` and ``meta.*`` records.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .fusing import DIM_FIELDS, FusedModel
from .masks import MaskSet
from .model.config import ARCHS, ModelConfig
from .model.transformer import TransformerModel, param_shapes
from .projection import ProjectionSet

MODEL_MAGIC = b"SP3M"
FUSED_MAGIC = b"SP3F"
VERSION = 1
CONFIG_FIELDS = ("arch", "n_layers", "d", "n_heads", "d_f", "vocab_size", "max_seq_len", "n_classes", "seed")


@dataclass
class Checkpoint:
    magic: bytes
    config: ModelConfig
    records: dict = field(default_factory=dict)
    dims: np.ndarray | None = None  # fused only: n_layers x n_dim_fields
    version: int = VERSION

    def prefixed(self, prefix: str) -> dict:
        return {k: v for k, v in self.records.items() if k.startswith(prefix)}


def _config_ints(cfg: ModelConfig) -> list[int]:
    vals = cfg.to_dict()
    return [ARCHS.index(cfg.arch)] + [int(vals[k]) for k in CONFIG_FIELDS[1:]]


def encode(ckpt: Checkpoint) -> bytes:
    if ckpt.magic not in (MODEL_MAGIC, FUSED_MAGIC):
        raise FormatError(f"unknown magic {ckpt.magic!r}")
    out = [ckpt.magic, struct.pack("<II", ckpt.version, len(CONFIG_FIELDS))]
    out.append(struct.pack(f"<{len(CONFIG_FIELDS)}q", *_config_ints(ckpt.config)))
    if ckpt.magic == FUSED_MAGIC:
        dims = np.zeros((0, 0), dtype=np.int64) if ckpt.dims is None else np.asarray(ckpt.dims, dtype="<i8")
        out.append(struct.pack("<II", *dims.shape))
        out.append(dims.astype("<i8").tobytes())
    out.append(struct.pack("<I", len(ckpt.records)))
    for name in sorted(ckpt.records):
        arr = np.asarray(ckpt.records[name], dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise FormatError(f"record {name} is not rank <= 2")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<QQ", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic not in (MODEL_MAGIC, FUSED_MAGIC):
        raise FormatError(f"bad magic {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    at = r.pos
    (n_fields,) = r.unpack("<I", "field count")
    if n_fields != len(CONFIG_FIELDS):
        raise FormatError(f"expected {len(CONFIG_FIELDS)} config fields, found {n_fields}", at)
    at = r.pos
    ints = r.unpack(f"<{n_fields}q", "config fields")
    if not 0 <= ints[0] < len(ARCHS):
        raise FormatError(f"unknown arch code {ints[0]}", at)
    try:
        cfg = ModelConfig(ARCHS[ints[0]], *ints[1:])
    except ValueError as exc:
        raise FormatError(f"invalid config in header: {exc}", at) from exc
    dims = None
    if magic == FUSED_MAGIC:
        rows, cols = r.unpack("<II", "dims shape")
        dims = np.frombuffer(r.take(8 * rows * cols, "dims table"), dtype="<i8").reshape(rows, cols).copy()
    (n_rec,) = r.unpack("<I", "record count")
    records = {}
    for _ in range(n_rec):
        at = r.pos
        (n,) = r.unpack("<I", "name length")
        try:
            name = r.take(n, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("record name is not UTF-8", at) from exc
        rows, cols = r.unpack("<QQ", f"shape of {name}")
        if rows * cols > (len(buf) - r.pos) // 8:
            raise FormatError(f"record {name} claims {rows}x{cols} entries beyond end of file", r.pos)
        data = np.frombuffer(r.take(8 * rows * cols, f"data of {name}"), dtype="<f8")
        if not np.all(np.isfinite(data)):
            raise FormatError(f"record {name} holds non-finite values", at)
        if name in records:
            raise FormatError(f"duplicate record {name}", at)
        records[name] = data.reshape(rows, cols).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last record", r.pos)
    return Checkpoint(magic, cfg, records, dims, version)


def write(path, ckpt: Checkpoint):
    Path(path).write_bytes(encode(ckpt))


def read(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}", 0) from exc
    return decode(buf)


# typed helpers ---------------------------------------------------------------------------

def model_checkpoint(model: TransformerModel, projections=None, masks: MaskSet | None = None,
                     extra: dict | None = None) -> Checkpoint:
    records = dict(model.params)
    groups = None
    if projections is not None:
        records.update(projections.tensors)
        groups = projections.groups
    if masks is not None:
        records.update(masks.values)
        groups = masks.groups if groups is None else groups
    if groups is not None:
        records["meta.groups"] = np.asarray(groups, dtype=float).reshape(-1, 1)
    records.update(extra or {})
    return Checkpoint(MODEL_MAGIC, model.config, records)


def model_from(ckpt: Checkpoint) -> TransformerModel:
    if ckpt.magic != MODEL_MAGIC:
        raise FormatError("expected a model checkpoint (SP3M), got a fused one", 0)
    shapes = param_shapes(ckpt.config)
    params = {}
    for name, shape in shapes.items():
        if name not in ckpt.records:
            raise FormatError(f"missing weight record {name}", 0)
        if ckpt.records[name].shape != shape:
            raise FormatError(f"weight {name} has shape {ckpt.records[name].shape}, expected {shape}", 0)
        params[name] = ckpt.records[name].copy()
    return TransformerModel(ckpt.config, params)


def groups_from(ckpt: Checkpoint):
    g = ckpt.records.get("meta.groups")
    return None if g is None else [int(v) for v in g.ravel()]


def projections_from(ckpt: Checkpoint):
    tensors = {k: v.copy() for k, v in ckpt.prefixed("proj.").items()}
    if not tensors:
        return None
    return ProjectionSet(ckpt.config.arch, tensors, groups_from(ckpt)).check(ckpt.config)


def masks_from(ckpt: Checkpoint) -> MaskSet | None:
    values = {k: v.copy() for k, v in ckpt.prefixed("mask.").items()}
    if not values:
        return None
    return MaskSet(values, groups_from(ckpt)).check(ckpt.config)


def fused_checkpoint(fused: FusedModel) -> Checkpoint:
    dims = np.asarray([[row[k] for k in DIM_FIELDS] for row in fused.dims],
                      dtype=np.int64).reshape(-1, len(DIM_FIELDS))
    records = dict(fused.tensors)
    if fused.groups is not None:
        records["meta.groups"] = np.asarray(fused.groups, dtype=float).reshape(-1, 1)
    return Checkpoint(FUSED_MAGIC, fused.config, records, dims)


def fused_from(ckpt: Checkpoint) -> FusedModel:
    if ckpt.magic != FUSED_MAGIC:
        raise FormatError("expected a fused checkpoint (SP3F)", 0)
    if ckpt.dims is None or ckpt.dims.shape != (ckpt.config.n_layers, len(DIM_FIELDS)):
        raise FormatError("fused dims table does not match the layer count", 0)
    dims = [{k: int(v) for k, v in zip(DIM_FIELDS, row)} for row in ckpt.dims]
    tensors = {k: v.copy() for k, v in ckpt.records.items() if not k.startswith("meta.")}
    return FusedModel(ckpt.config, tensors, dims, groups_from(ckpt))
