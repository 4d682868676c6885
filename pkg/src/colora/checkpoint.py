"""Binary checkpoints for :class:`~colora.model.ModelGraph`.

Layout (all integers little-endian)::

    b"CLR1"
    u32   entry count
    entry*:
        u16 name length, UTF-8 name
        u8  dtype code (0 = f32, 1 = u8, 2 = i64)
        u8  ndim, ndim x u32 dims
        raw payload
    u32   flag record count
    flag*:
        u16 name length, UTF-8 name
        u8  flag code (0 = frozen, 1 = order, 2 = merge count)
        u32 value

Parameters are stored as f32 entries under their graph names.  The layer
structure is stored as a u8 entry named ``__graph__`` holding UTF-8 JSON.
Order values are 0 for depthwise-then-pointwise and 1 for
pointwise-then-depthwise.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Union

import numpy as np

from .adapters import CnnAdapterLayer, CoLoRALayer, DenseLoraLayer, Order
from .model import (
    CnnAdapter,
    CoLoRA,
    Conv,
    Dense,
    DenseLora,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool,
    ModelGraph,
    ReLU,
    Residual,
)
from .tensor import ConvKernel, Tensor

__all__ = [
    "CheckpointError",
    "MAGIC",
    "write_entries",
    "read_entries",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
]

MAGIC = b"CLR1"
GRAPH_ENTRY = "__graph__"

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i8")}
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("int64"): 2}

FLAG_FROZEN, FLAG_ORDER, FLAG_MERGES = 0, 1, 2
ORDER_CODES = {Order.DW_THEN_PW: 0, Order.PW_THEN_DW: 1}

PathLike = Union[str, os.PathLike]


class CheckpointError(ValueError):
    pass


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long: {name[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def write_entries(path: PathLike, entries: dict[str, np.ndarray],
                  flags: list[tuple[str, int, int]] = ()) -> None:
    chunks = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        code = DTYPE_CODES[arr.dtype]
        chunks.append(_encode_name(name))
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    chunks.append(struct.pack("<I", len(flags)))
    for name, code, value in flags:
        chunks.append(_encode_name(name))
        chunks.append(struct.pack("<BI", code, value))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("entry name is not valid UTF-8") from exc


def read_entries(path: PathLike) -> tuple[dict[str, np.ndarray], list[tuple[str, int, int]]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a CLR1 checkpoint (magic mismatch)")
    (count,) = r.unpack("<I")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.name()
        if name in entries:
            raise CheckpointError(f"duplicate entry {name!r}")
        code, ndim = r.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{ndim}I")
        dtype = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims)
        entries[name] = arr.astype(dtype.newbyteorder("="))
    (nflags,) = r.unpack("<I")
    flags = []
    for _ in range(nflags):
        name = r.name()
        code, value = r.unpack("<BI")
        flags.append((name, code, value))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after flag section")
    return entries, flags


def save_checkpoint(g: ModelGraph, path: PathLike) -> None:
    entries: dict[str, np.ndarray] = {}
    graph_json = json.dumps(g.spec(), sort_keys=True).encode("utf-8")
    entries[GRAPH_ENTRY] = np.frombuffer(graph_json, dtype=np.uint8)
    flags = []
    for name, t in g.named_parameters().items():
        entries[name] = t.data
        flags.append((name, FLAG_FROZEN, int(not t.requires_grad)))
    for lay in g.colora_layers():
        flags.append((lay.name, FLAG_ORDER, ORDER_CODES[lay.layer.order]))
        flags.append((lay.name, FLAG_MERGES, lay.layer.merge_count))
    write_entries(path, entries, flags)


def _param(params: dict, key: str, required: bool = True):
    if key not in params:
        if required:
            raise CheckpointError(f"checkpoint is missing {key!r}")
        return None
    return Tensor(params[key], name=key)


def _build_layer(spec: dict, params: dict, orders: dict, merges: dict) -> Layer:
    kind, name, head = spec["kind"], spec["name"], spec.get("head", False)
    p = lambda key, required=True: _param(params, f"{name}.{key}", required)  # noqa: E731
    if kind == "conv":
        return Conv(name, ConvKernel(p("weight"), p("bias", False)),
                    padding=spec["padding"], stride=spec["stride"], head=head)
    if kind == "colora":
        order = orders.get(name, Order(spec["order"]))
        lay = CoLoRALayer(ConvKernel(p("weight"), p("bias", False)), p("kp"), p("kd"), p("db", False),
                          order=order, merge_count=merges.get(name, 0),
                          padding=spec["padding"], stride=spec["stride"])
        return CoLoRA(name, lay, head=head)
    if kind == "cnn_adapter":
        lay = CnnAdapterLayer(ConvKernel(p("weight"), p("bias", False)), p("a"),
                              p("norm_scale"), p("norm_shift"),
                              padding=spec["padding"], stride=spec["stride"])
        return CnnAdapter(name, lay, head=head)
    if kind == "dense":
        return Dense(name, p("weight"), p("bias", False), head=head)
    if kind == "dense_lora":
        return DenseLora(name, DenseLoraLayer(p("w0"), p("a"), p("b")), p("bias", False), head=head)
    if kind == "relu":
        return ReLU(name, head=head)
    if kind == "maxpool":
        return MaxPool(name, spec["size"], head=head)
    if kind == "gap":
        return GlobalAvgPool(name, head=head)
    if kind == "flatten":
        return Flatten(name, head=head)
    if kind == "residual":
        return Residual(name, [_build_layer(s, params, orders, merges) for s in spec["body"]], head=head)
    raise CheckpointError(f"unknown layer kind {kind!r}")


def load_checkpoint(path: PathLike) -> ModelGraph:
    entries, flags = read_entries(path)
    if GRAPH_ENTRY not in entries:
        raise CheckpointError("checkpoint has no graph description")
    try:
        spec = json.loads(entries.pop(GRAPH_ENTRY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("graph description is corrupt") from exc
    codes = {v: k for k, v in ORDER_CODES.items()}
    orders = {n: codes[v] for n, c, v in flags if c == FLAG_ORDER}
    merges = {n: v for n, c, v in flags if c == FLAG_MERGES}
    frozen = {n: bool(v) for n, c, v in flags if c == FLAG_FROZEN}
    layers = [_build_layer(s, entries, orders, merges) for s in spec["layers"]]
    g = ModelGraph(layers, tuple(spec["input_shape"]), spec["num_classes"])
    named = g.named_parameters()
    extra = set(entries) - set(named)
    if extra:
        raise CheckpointError(f"checkpoint entries not used by the graph: {sorted(extra)}")
    for name, t in named.items():
        t.requires_grad = not frozen.get(name, False)
    return g


def load_into(g: ModelGraph, path: PathLike) -> ModelGraph:
    """Overwrite ``g``'s parameters in place from a checkpoint with matching names and shapes."""
    entries, flags = read_entries(path)
    entries.pop(GRAPH_ENTRY, None)
    named = g.named_parameters()
    missing = set(named) - set(entries)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    for name, t in named.items():
        if entries[name].shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {entries[name].shape}, "
                                  f"graph {t.shape}")
    for name, t in named.items():
        t.data = entries[name].astype(np.float32)
    frozen = {n: bool(v) for n, c, v in flags if c == FLAG_FROZEN}
    merges = {n: v for n, c, v in flags if c == FLAG_MERGES}
    for name, t in named.items():
        if name in frozen:
            t.requires_grad = not frozen[name]
    for lay in g.colora_layers():
        lay.layer.merge_count = merges.get(lay.name, lay.layer.merge_count)
    return g
