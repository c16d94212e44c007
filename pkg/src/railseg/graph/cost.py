"""Static parameter / FLOP counting.

Conventions:

* params: trainable scalars only (conv weights, conv biases, BN gamma/beta).
  BN running statistics are buffers; they show up in ``buffers`` and in
  model-size bytes, not in ``params``.
* FLOPs: 2 x MACs for conv / transposed conv, plus one op per output
  element for elementwise work (bias add, activation, residual add; BN is a
  multiply and an add, so 2 per element; max-pool counts k*k-1 compares).
  Pure data movement (concat, slice, nearest upsample) is free.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from .model import INPUT, STAGES, GraphError, ModelGraph, Prim, lower


@dataclass
class NodeCost:
    params: int = 0
    flops: int = 0
    buffers: int = 0
    shape: tuple = ()


@dataclass
class CostReport:
    nodes: Dict[str, NodeCost]
    stages: Dict[str, NodeCost] = field(default_factory=dict)
    input_size: tuple = ()

    @property
    def params(self) -> int:
        return sum(n.params for n in self.nodes.values())

    @property
    def flops(self) -> int:
        return sum(n.flops for n in self.nodes.values())

    @property
    def buffers(self) -> int:
        return sum(n.buffers for n in self.nodes.values())

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def stage_share(self) -> Dict[str, float]:
        tot = self.flops or 1
        return {s: c.flops / tot for s, c in self.stages.items()}

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "totals": {"params": self.params, "flops": self.flops, "gflops": round(self.gflops, 4)},
            "stages": {s: {"params": c.params, "flops": c.flops} for s, c in self.stages.items()},
            "nodes": {
                k: {"params": v.params, "flops": v.flops, "shape": list(v.shape)} for k, v in self.nodes.items()
            },
        }


def prim_shape(prim: Prim, shapes: Dict[str, tuple]) -> tuple:
    """Output (C, H, W) of a prim from its input shapes."""
    a = prim.attrs
    ins = [shapes[i] for i in prim.inputs]
    c, h, w = ins[0]
    op = prim.op
    if op == "conv":
        if c != a["cin"]:
            raise GraphError(f"{prim.name}: expects {a['cin']} channels, got {c}")
        ho = (h + 2 * a["pad"] - a["k"]) // a["stride"] + 1
        wo = (w + 2 * a["pad"] - a["k"]) // a["stride"] + 1
        if ho < 1 or wo < 1:
            raise GraphError(f"{prim.name}: spatial extent collapses to {ho}x{wo}")
        return (a["cout"], ho, wo)
    if op == "convT":
        return (a["cout"], h * a["stride"], w * a["stride"])
    if op in ("bn", "silu", "sigmoid", "tanh"):
        return (c, h, w)
    if op == "maxpool":
        ho = (h + 2 * a["pad"] - a["k"]) // a["stride"] + 1
        wo = (w + 2 * a["pad"] - a["k"]) // a["stride"] + 1
        return (c, ho, wo)
    if op == "upsample":
        return (c, h * a["factor"], w * a["factor"])
    if op == "concat":
        for s in ins[1:]:
            if s[1:] != (h, w):
                raise GraphError(f"{prim.name}: concat of spatial {ins[0][1:]} and {s[1:]}")
        return (sum(s[0] for s in ins), h, w)
    if op == "slice":
        return (a["hi"] - a["lo"], h, w)
    if op == "add":
        if ins[1] != ins[0]:
            raise GraphError(f"{prim.name}: add of {ins[0]} and {ins[1]}")
        return ins[0]
    raise GraphError(f"{prim.name}: unknown op {op}")


def prim_cost(prim: Prim, in_shapes: List[tuple], out_shape: tuple) -> Tuple[int, int, int]:
    """(params, flops, buffer scalars) for one prim."""
    a = prim.attrs
    out_el = out_shape[0] * out_shape[1] * out_shape[2]
    op = prim.op
    if op == "conv":
        kk = a["k"] * a["k"]
        w = a["cout"] * (a["cin"] // a["groups"]) * kk
        macs = out_el * (a["cin"] // a["groups"]) * kk
        b = a["cout"] if a.get("bias") else 0
        return w + b, 2 * macs + (out_el if b else 0), 0
    if op == "convT":
        kk = a["k"] * a["k"]
        w = a["cin"] * a["cout"] * kk
        # direct-conv equivalent over the zero-inserted input: every output
        # element reads all k*k taps of every input channel
        macs = out_el * a["cin"] * kk
        return w + a["cout"], 2 * macs + out_el, 0
    if op == "bn":
        return 2 * a["c"], 2 * out_el, 2 * a["c"]
    if op in ("silu", "sigmoid", "tanh", "add"):
        return 0, out_el, 0
    if op == "maxpool":
        return 0, out_el * (a["k"] * a["k"] - 1), 0
    return 0, 0, 0


def propagate(graph: ModelGraph, input_size=None):
    """Lower the graph and compute every prim's output shape."""
    low = lower(graph)
    h, w = input_size if input_size is not None else graph.input_size
    shapes: Dict[str, tuple] = {INPUT: (graph.in_channels, int(h), int(w))}
    for prim in low.prims:
        try:
            shapes[prim.name] = prim_shape(prim, shapes)
        except KeyError as e:
            raise GraphError(f"{prim.owner}: unresolvable input {e}") from None
    return low, shapes


def count(graph: ModelGraph, input_size=None) -> CostReport:
    """Per-layer and per-stage params/FLOPs at ``input_size`` (H, W)."""
    if input_size is not None and isinstance(input_size, int):
        input_size = (input_size, input_size)
    low, shapes = propagate(graph, input_size)
    stage_of = {n.id: n.stage for n in graph.nodes}
    nodes: Dict[str, NodeCost] = {}
    for n in graph.nodes:
        nc = NodeCost()
        v = low.values.get(n.id)
        if v is not None:
            nc.shape = shapes[v]
        nodes[n.id] = nc
    for prim in low.prims:
        p, f, b = prim_cost(prim, [shapes[i] for i in prim.inputs], shapes[prim.name])
        nc = nodes[prim.owner]
        nc.params += p
        nc.flops += f
        nc.buffers += b
    stages = {s: NodeCost() for s in STAGES if s != "input"}
    for nid, nc in nodes.items():
        st = stage_of[nid]
        if st in stages:
            stages[st].params += nc.params
            stages[st].flops += nc.flops
            stages[st].buffers += nc.buffers
    size = input_size if input_size is not None else graph.input_size
    return CostReport(nodes, stages, tuple(size))


def ghost_module_cost(cin: int, cout: int, k: int = 1, ratio: int = 2, dw: int = 3, h: int = 1, w: int = 1,
                      bn: bool = True) -> Tuple[int, int]:
    """(params, FLOPs) of a Ghost module with stride 1 on an h x w map.

    FLOPs here are 2 x MACs of the two convolutions only.
    """
    if ratio < 1 or cout % ratio:
        raise ValueError(f"cout={cout} not divisible by ratio s={ratio}")
    init = cout // ratio
    new = cout - init
    conv_w = cin * init * k * k
    cheap_w = new * dw * dw
    params = conv_w + cheap_w
    if bn:
        params += 2 * init + (2 * new if new else 0)
    flops = 2 * (conv_w + cheap_w) * h * w
    return params, flops
