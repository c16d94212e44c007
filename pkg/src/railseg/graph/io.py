"""Graph JSON documents and the RSEW weights container.

Graph document (``format: "railseg-graph"``, ``version: 1``)::

    {
      "format": "railseg-graph", "version": 1,
      "name": str, "input_size": [H, W], "in_channels": int,
      "num_classes": int, "k": int, "reg_max": int,
      "outputs": {name: node_id},
      "meta": {...},
      "nodes": [{"id", "kind", "stage", "inputs": [...], "params": {...}}]
    }

RSEW weights (all little-endian)::

    b"RSEW" | u32 version | u32 count |
    count x ( u32 name_len | utf-8 name | u8 dtype | u8 rank | rank x u64 extent | payload )

dtype 0 is FP32 (4-byte floats), 1 is FP16 (binary16 bit patterns).
"""
from __future__ import annotations

import json
import struct
from typing import BinaryIO, Dict

import numpy as np

from ..tensor import FP16, FP32, TensorF
from .model import GraphError, LayerSpec, ModelGraph, validate

GRAPH_FORMAT = "railseg-graph"
GRAPH_VERSION = 1

MAGIC = b"RSEW"
WEIGHTS_VERSION = 1
_DTYPE_CODE = {FP32: 0, FP16: 1}
_CODE_DTYPE = {v: k for k, v in _DTYPE_CODE.items()}
_NP = {FP32: "<f4", FP16: "<u2"}


class FormatError(ValueError):
    """Malformed graph document or weights file."""


# graph JSON -------------------------------------------------------------

def graph_to_dict(g: ModelGraph) -> dict:
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "name": g.name,
        "input_size": list(g.input_size),
        "in_channels": g.in_channels,
        "num_classes": g.num_classes,
        "k": g.k,
        "reg_max": g.reg_max,
        "outputs": dict(g.outputs),
        "meta": g.meta,
        "nodes": [
            {"id": n.id, "kind": n.kind, "stage": n.stage, "inputs": list(n.inputs), "params": n.params}
            for n in g.nodes
        ],
    }


def graph_from_dict(d: dict) -> ModelGraph:
    if not isinstance(d, dict) or d.get("format") != GRAPH_FORMAT:
        raise FormatError(f"not a {GRAPH_FORMAT} document")
    if d.get("version") != GRAPH_VERSION:
        raise FormatError(f"unsupported graph version {d.get('version')!r}")
    try:
        nodes = [LayerSpec(n["id"], n["kind"], dict(n.get("params", {})), list(n.get("inputs", [])),
                           n.get("stage", "backbone")) for n in d["nodes"]]
        g = ModelGraph(nodes, dict(d["outputs"]), tuple(d["input_size"]), int(d["num_classes"]),
                       int(d.get("k", 32)), int(d.get("reg_max", 16)), int(d.get("in_channels", 3)),
                       d.get("name", "model"), dict(d.get("meta", {})))
    except (KeyError, TypeError) as e:
        raise FormatError(f"graph document missing or malformed field: {e}") from None
    validate(g)
    return g


def dumps_graph(g: ModelGraph) -> str:
    return json.dumps(graph_to_dict(g), indent=1, sort_keys=True) + "\n"


def loads_graph(text: str) -> ModelGraph:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        off = len(text[:e.pos].encode("utf-8"))
        raise FormatError(f"invalid JSON at byte offset {off} (line {e.lineno}, column {e.colno}): {e.msg}") from None
    return graph_from_dict(d)


def save_graph(g: ModelGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_graph(g))


def load_graph(path) -> ModelGraph:
    with open(path, "r", encoding="utf-8") as f:
        return loads_graph(f.read())


# weights ------------------------------------------------------------------

def write_weights(weights: Dict[str, TensorF], f: BinaryIO) -> int:
    """Write tensors in the given order; returns bytes written."""
    n = 0
    n += f.write(MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(weights)))
    for name, t in weights.items():
        raw = name.encode("utf-8")
        n += f.write(struct.pack("<I", len(raw)) + raw)
        n += f.write(struct.pack("<BB", _DTYPE_CODE[t.dtype], len(t.shape)))
        n += f.write(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        n += f.write(t.data.astype(_NP[t.dtype], copy=False).tobytes())
    return n


def _read(f, n):
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated weights file")
    return b


def read_weights(f: BinaryIO) -> Dict[str, TensorF]:
    if _read(f, 4) != MAGIC:
        raise FormatError("bad magic, not an RSEW weights file")
    version, count = struct.unpack("<II", _read(f, 8))
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weights version {version}")
    out: Dict[str, TensorF] = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _read(f, 4))
        name = _read(f, ln).decode("utf-8")
        code, rank = struct.unpack("<BB", _read(f, 2))
        if code not in _CODE_DTYPE:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        dtype = _CODE_DTYPE[code]
        shape = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
        count_el = int(np.prod(shape, dtype=np.int64)) if rank else 1
        itemsize = 4 if dtype == FP32 else 2
        data = np.frombuffer(_read(f, count_el * itemsize), dtype=_NP[dtype])
        try:
            out[name] = TensorF(shape if rank else (1,), dtype, data)
        except ValueError as e:
            raise FormatError(f"tensor {name!r}: {e}") from None
    return out


def save_weights(weights: Dict[str, TensorF], path) -> int:
    with open(path, "wb") as f:
        return write_weights(weights, f)


def load_weights(path) -> Dict[str, TensorF]:
    with open(path, "rb") as f:
        return read_weights(f)
