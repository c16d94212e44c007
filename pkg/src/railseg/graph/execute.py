"""Reference executor over the lowered prim program.

The executor does not care whether a program came straight from
:func:`lower` or went through the ``quant`` rewrites: it understands fused
convs (``attrs["act"]``) and multi-input convs that read several producers
as consecutive channel ranges of one weight tensor (concat elimination).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .. import tensor as T
from ..tensor import TensorF
from .model import BN_EPS, INPUT, GraphError, ModelGraph, Prim, lower


class WeightError(ValueError):
    """A weight tensor is missing or has the wrong shape."""


@dataclass
class Program:
    prims: List[Prim]
    outputs: Dict[str, str]  # output name -> value name
    input_shape: tuple  # (C, H, W)
    num_classes: int
    k: int
    reg_max: int
    strides: Dict[str, int] = field(default_factory=dict)

    @property
    def levels(self) -> List[str]:
        return [n[len("det_"):] for n in self.outputs if n.startswith("det_")]


def program(graph: ModelGraph) -> Program:
    low = lower(graph)
    outs = {name: low.values[nid] for name, nid in graph.outputs.items()}
    h, w = graph.input_size
    strides = dict(graph.meta.get("strides", {}))
    return Program(low.prims, outs, (graph.in_channels, h, w), graph.num_classes, graph.k, graph.reg_max, strides)


def weight_shapes(prog: Program) -> Dict[str, tuple]:
    """Expected shape of every weight tensor the program reads, in prim order."""
    shapes: Dict[str, tuple] = {}
    for p in prog.prims:
        a = p.attrs
        if p.op == "conv":
            shapes[f"{p.name}.weight"] = (a["cout"], a["cin"] // a["groups"], a["k"], a["k"])
            if a.get("bias"):
                shapes[f"{p.name}.bias"] = (a["cout"],)
        elif p.op == "convT":
            shapes[f"{p.name}.weight"] = (a["cin"], a["cout"], a["k"], a["k"])
            shapes[f"{p.name}.bias"] = (a["cout"],)
        elif p.op == "bn":
            for s in ("gamma", "beta", "mean", "var"):
                shapes[f"{p.name}.{s}"] = (a["c"],)
    return shapes


def check_weights(prog: Program, weights: Dict[str, TensorF]) -> None:
    for name, shape in weight_shapes(prog).items():
        if name not in weights:
            raise WeightError(f"missing weight tensor {name!r}")
        got = tuple(weights[name].shape)
        if got != shape:
            raise WeightError(f"weight tensor {name!r} has shape {got}, expected {shape}")


def init_weights(graph_or_prog, seed: int = 0) -> Dict[str, TensorF]:
    """Deterministic random weights (He-style convs, non-trivial BN stats)."""
    prog = graph_or_prog if isinstance(graph_or_prog, Program) else program(graph_or_prog)
    rng = np.random.default_rng(seed)
    out: Dict[str, TensorF] = {}
    for name, shape in weight_shapes(prog).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))
        elif kind == "bias":
            arr = rng.uniform(-0.1, 0.1, shape)
        elif kind == "gamma":
            arr = rng.uniform(0.5, 1.5, shape)
        elif kind == "beta":
            arr = rng.uniform(-0.2, 0.2, shape)
        elif kind == "mean":
            arr = rng.uniform(-0.2, 0.2, shape)
        else:  # var
            arr = rng.uniform(0.5, 1.5, shape)
        out[name] = TensorF.from_array(arr.astype(np.float32))
    return out


def _w(weights, name) -> np.ndarray:
    try:
        return weights[name].numpy()
    except KeyError:
        raise WeightError(f"missing weight tensor {name!r}") from None


def _conv(p: Prim, xs: List[np.ndarray], weights) -> np.ndarray:
    a = p.attrs
    w = _w(weights, f"{p.name}.weight")
    b = _w(weights, f"{p.name}.bias") if a.get("bias") else None
    if len(xs) > 1 and a["groups"] != 1:
        raise GraphError(f"{p.name}: multi-input conv needs groups == 1")
    if len(xs) > 1 and sum(x.shape[1] for x in xs) != w.shape[1]:
        raise WeightError(f"{p.name}: inputs supply {sum(x.shape[1] for x in xs)} channels, "
                          f"weight expects {w.shape[1]}")
    # multi-input conv: each producer owns a consecutive channel range of the weight
    y = T.conv2d(xs if len(xs) > 1 else xs[0], w, b, a["stride"], a["pad"], a["groups"])
    act = a.get("act")
    if act == "silu":
        y = T.silu(y)
    elif act is not None:
        raise GraphError(f"{p.name}: unsupported fused activation {act!r}")
    return y


def run_prim(p: Prim, xs: List[np.ndarray], weights) -> np.ndarray:
    op = p.op
    a = p.attrs
    if op == "conv":
        return _conv(p, xs, weights)
    if op == "convT":
        return T.conv_transpose2d(xs[0], _w(weights, f"{p.name}.weight"), _w(weights, f"{p.name}.bias"), a["stride"])
    if op == "bn":
        g = [_w(weights, f"{p.name}.{s}") for s in ("gamma", "beta", "mean", "var")]
        return T.batch_norm(xs[0], *g, eps=a.get("eps", BN_EPS))
    if op == "silu":
        return T.silu(xs[0])
    if op == "sigmoid":
        return T.sigmoid(xs[0])
    if op == "tanh":
        return T.tanh(xs[0])
    if op == "maxpool":
        return T.maxpool(xs[0], a["k"], a["stride"], a["pad"])
    if op == "upsample":
        return T.upsample_nearest(xs[0], a["factor"])
    if op == "concat":
        return T.concat(xs, a.get("axis", 1))
    if op == "slice":
        return np.ascontiguousarray(xs[0][:, a["lo"]:a["hi"]])
    if op == "add":
        return xs[0] + xs[1]
    raise GraphError(f"{p.name}: unknown op {op}")


def run_program(prog: Program, weights: Dict[str, TensorF], x, narrow: Optional[Callable] = None,
                keep_all: bool = False) -> Dict[str, np.ndarray]:
    """Run the program; returns named outputs (or every value with ``keep_all``).

    ``narrow`` is applied to the input and to every prim result; the FP16
    plan passes a binary16 round trip here.
    """
    check_weights(prog, weights)
    x = T.as_array(x)
    want = (1,) + tuple(prog.input_shape)
    if x.ndim != 4 or x.shape[1:] != want[1:]:
        raise T.ShapeError(f"input shape {tuple(x.shape)} does not match N x {prog.input_shape}")
    if narrow is not None:
        x = narrow(x)
    vals: Dict[str, np.ndarray] = {INPUT: x}
    # release intermediates once their last consumer has run
    last_use: Dict[str, int] = {}
    for i, p in enumerate(prog.prims):
        for v in p.inputs:
            last_use[v] = i
    keep = set(prog.outputs.values())
    for i, p in enumerate(prog.prims):
        y = run_prim(p, [vals[v] for v in p.inputs], weights)
        if narrow is not None:
            y = narrow(y)
        vals[p.name] = y
        if not keep_all:
            for v in p.inputs:
                if last_use[v] == i and v not in keep:
                    del vals[v]
    if keep_all:
        return vals
    return {name: vals[v] for name, v in prog.outputs.items()}


@dataclass
class RawOutputs:
    """Head outputs flattened over all prediction locations.

    Locations are ordered level by level (shallowest first), row-major
    within a level. ``anchors`` are cell centres in input pixels.
    """

    box_dist: np.ndarray  # (N, 4*reg_max) DFL logits, order l, t, r, b
    cls_logits: np.ndarray  # (N, num_classes)
    coeffs: np.ndarray  # (N, k), already in [-1, 1]
    anchors: np.ndarray  # (N, 2) x, y
    strides: np.ndarray  # (N,)
    proto: np.ndarray  # (k, H/ps, W/ps)
    input_size: tuple  # (H, W)
    reg_max: int = 16

    @property
    def num_classes(self) -> int:
        return self.cls_logits.shape[1]

    @property
    def k(self) -> int:
        return self.proto.shape[0]


def make_anchors(h: int, w: int, stride: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
    return (np.stack([xs.ravel(), ys.ravel()], axis=1) + 0.5) * stride


def collect(prog: Program, outs: Dict[str, np.ndarray]) -> RawOutputs:
    """Flatten per-level det/mask-coefficient maps into :class:`RawOutputs`."""
    nbox = 4 * prog.reg_max
    _, H, W = prog.input_shape
    box, cls, mc, anc, st = [], [], [], [], []
    for lvl in prog.levels:
        det = outs[f"det_{lvl}"][0]
        m = outs[f"mc_{lvl}"][0]
        c, h, w = det.shape
        stride = H // h
        box.append(det[:nbox].reshape(nbox, -1).T)
        cls.append(det[nbox:].reshape(c - nbox, -1).T)
        mc.append(m.reshape(m.shape[0], -1).T)
        anc.append(make_anchors(h, w, stride))
        st.append(np.full(h * w, stride, dtype=np.float32))
    return RawOutputs(
        np.ascontiguousarray(np.concatenate(box), dtype=np.float32),
        np.ascontiguousarray(np.concatenate(cls), dtype=np.float32),
        np.ascontiguousarray(np.concatenate(mc), dtype=np.float32),
        np.concatenate(anc).astype(np.float32),
        np.concatenate(st),
        np.ascontiguousarray(outs["proto"][0], dtype=np.float32),
        (H, W),
        prog.reg_max,
    )


def execute(graph, weights: Dict[str, TensorF], x, narrow: Optional[Callable] = None) -> RawOutputs:
    """Run a :class:`ModelGraph` (or an already-lowered :class:`Program`) on one image."""
    prog = graph if isinstance(graph, Program) else program(graph)
    return collect(prog, run_program(prog, weights, x, narrow))
