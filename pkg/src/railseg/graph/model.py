"""Layer specs, model graphs, and lowering to primitive ops.

A :class:`ModelGraph` is a DAG of coarse layers (C2f, C3Ghost, heads, ...).
Counting and execution both work on the *lowered* form: a flat list of
:class:`Prim` ops (conv, bn, silu, concat, ...) where each prim remembers
which layer owns it. Every lowered value is produced by exactly one prim.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

KINDS = (
    "Input",
    "ConvBNAct",
    "GhostModule",
    "GhostBottleneck",
    "C2f",
    "C3Ghost",
    "SPPF",
    "Upsample",
    "Concat",
    "DetectHead",
    "EfficientHead",
    "MaskCoeffBranch",
    "ProtoNet",
)

STAGES = ("input", "backbone", "neck", "head")

INPUT = "input"
BN_EPS = 1e-3


class GraphError(ValueError):
    """Structural problem in a graph (cycle, dangling input, channel mismatch)."""


@dataclass
class LayerSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    stage: str = "backbone"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"node {self.id}: unknown kind {self.kind!r}")
        if self.stage not in STAGES:
            raise GraphError(f"node {self.id}: unknown stage {self.stage!r}")


@dataclass
class ModelGraph:
    nodes: List[LayerSpec]
    outputs: Dict[str, str]
    input_size: tuple  # (H, W)
    num_classes: int
    k: int = 32
    reg_max: int = 16
    in_channels: int = 3
    name: str = "model"
    meta: dict = field(default_factory=dict)

    def node(self, nid: str) -> LayerSpec:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    @property
    def levels(self) -> List[str]:
        """Prediction levels (e.g. ``["P3", "P4"]``) in output order."""
        return [k[len("det_"):] for k in self.outputs if k.startswith("det_")]


@dataclass
class Prim:
    name: str
    op: str  # conv | convT | bn | silu | sigmoid | tanh | maxpool | upsample | concat | slice | add
    inputs: List[str]
    attrs: dict
    owner: str

    def weight_names(self) -> List[str]:
        if self.op in ("conv", "convT"):
            names = [f"{self.name}.weight"]
            if self.attrs.get("bias"):
                names.append(f"{self.name}.bias")
            return names
        if self.op == "bn":
            return [f"{self.name}.{p}" for p in ("gamma", "beta", "mean", "var")]
        return []


class _Lowerer:
    """Accumulates prims for one layer; tracks output channel counts."""

    def __init__(self, owner: str, prims: List[Prim], channels: Dict[str, int]):
        self.owner = owner
        self.prims = prims
        self.ch = channels

    def _emit(self, name, op, inputs, attrs, cout):
        self.prims.append(Prim(name, op, list(inputs), attrs, self.owner))
        self.ch[name] = cout
        return name

    def conv(self, name, x, cout, k=1, s=1, g=1, bias=False):
        cin = self.ch[x]
        if cin % g or cout % g:
            raise GraphError(f"{name}: channels {cin}->{cout} not divisible by groups {g}")
        attrs = dict(cin=cin, cout=cout, k=k, stride=s, pad=k // 2, groups=g, bias=bias)
        return self._emit(name, "conv", [x], attrs, cout)

    def cba(self, name, x, cout, k=1, s=1, g=1, act=True):
        """conv (no bias) -> bn -> optional silu; returns final value name."""
        y = self.conv(f"{name}.conv", x, cout, k, s, g)
        y = self._emit(f"{name}.bn", "bn", [y], dict(c=cout, eps=BN_EPS), cout)
        if act:
            y = self._emit(f"{name}.act", "silu", [y], {}, cout)
        return y

    def act(self, name, op, x):
        return self._emit(name, op, [x], {}, self.ch[x])

    def concat(self, name, xs):
        return self._emit(name, "concat", xs, dict(axis=1), sum(self.ch[v] for v in xs))

    def slice(self, name, x, lo, hi):
        return self._emit(name, "slice", [x], dict(lo=lo, hi=hi), hi - lo)

    def add(self, name, a, b):
        if self.ch[a] != self.ch[b]:
            raise GraphError(f"{name}: residual add of {self.ch[a]} and {self.ch[b]} channels")
        return self._emit(name, "add", [a, b], {}, self.ch[a])

    def maxpool(self, name, x, k):
        return self._emit(name, "maxpool", [x], dict(k=k, stride=1, pad=k // 2), self.ch[x])

    def upsample(self, name, x, factor):
        return self._emit(name, "upsample", [x], dict(factor=factor), self.ch[x])

    def convT(self, name, x, cout, k=2):
        attrs = dict(cin=self.ch[x], cout=cout, k=k, stride=k, bias=True)
        return self._emit(name, "convT", [x], attrs, cout)

    # composite blocks -------------------------------------------------

    def ghost(self, name, x, cout, k=1, s=1, ratio=2, dw=3, act=True):
        init = math.ceil(cout / ratio)
        new = init * (ratio - 1)
        a = self.cba(f"{name}.primary", x, init, k, s, act=act)
        if ratio == 1:
            return a
        b = self.cba(f"{name}.cheap", a, new, dw, 1, g=init, act=act)
        y = self.concat(f"{name}.cat", [a, b])
        if init + new != cout:
            y = self.slice(f"{name}.trim", y, 0, cout)
        return y

    def ghost_bottleneck(self, name, x, cout, k=3, s=1, ratio=2, dw=3):
        cin = self.ch[x]
        mid = cout // 2
        y = self.ghost(f"{name}.ghost1", x, mid, 1, 1, ratio, dw, act=True)
        if s == 2:
            y = self.cba(f"{name}.dw", y, mid, k, 2, g=mid, act=False)
        y = self.ghost(f"{name}.ghost2", y, cout, 1, 1, ratio, dw, act=False)
        if s == 1 and cin == cout:
            sc = x
        else:
            sc = x
            if s == 2:
                sc = self.cba(f"{name}.sc_dw", sc, cin, k, 2, g=cin, act=False)
            sc = self.cba(f"{name}.sc_pw", sc, cout, 1, 1, act=False)
        return self.add(f"{name}.add", y, sc)

    def c2f(self, name, x, cout, n=1, shortcut=True):
        c = cout // 2
        y = self.cba(f"{name}.cv1", x, 2 * c, 1)
        parts = [self.slice(f"{name}.a", y, 0, c), self.slice(f"{name}.b", y, c, 2 * c)]
        for j in range(n):
            h = self.cba(f"{name}.m{j}.cv1", parts[-1], c, 3)
            h = self.cba(f"{name}.m{j}.cv2", h, c, 3)
            if shortcut:
                h = self.add(f"{name}.m{j}.add", h, parts[-1])
            parts.append(h)
        y = self.concat(f"{name}.cat", parts)
        return self.cba(f"{name}.cv2", y, cout, 1)

    def c3ghost(self, name, x, cout, n=1, ratio=2, dw=3, e=0.5):
        c = int(cout * e)
        a = self.cba(f"{name}.cv1", x, c, 1)
        for j in range(n):
            a = self.ghost_bottleneck(f"{name}.m{j}", a, c, 3, 1, ratio, dw)
        b = self.cba(f"{name}.cv2", x, c, 1)
        y = self.concat(f"{name}.cat", [a, b])
        return self.cba(f"{name}.cv3", y, cout, 1)

    def sppf(self, name, x, cout, k=5):
        c = self.ch[x] // 2
        y = self.cba(f"{name}.cv1", x, c, 1)
        p1 = self.maxpool(f"{name}.pool1", y, k)
        p2 = self.maxpool(f"{name}.pool2", p1, k)
        p3 = self.maxpool(f"{name}.pool3", p2, k)
        y = self.concat(f"{name}.cat", [y, p1, p2, p3])
        return self.cba(f"{name}.cv2", y, cout, 1)


def layer_out_channels(spec: LayerSpec, in_ch: List[int], graph: ModelGraph) -> int:
    """Declared output channels of a layer given its input channels."""
    p = spec.params
    if spec.kind == "Input":
        return graph.in_channels
    if spec.kind in ("ConvBNAct", "GhostModule", "GhostBottleneck", "C2f", "C3Ghost", "SPPF"):
        return int(p["c2"])
    if spec.kind == "Upsample":
        return in_ch[0]
    if spec.kind == "Concat":
        return sum(in_ch)
    if spec.kind in ("DetectHead", "EfficientHead"):
        return 4 * graph.reg_max + graph.num_classes
    if spec.kind in ("MaskCoeffBranch", "ProtoNet"):
        return graph.k
    raise GraphError(f"node {spec.id}: unknown kind {spec.kind}")


def lower_layer(spec: LayerSpec, low: _Lowerer, xs: List[str], graph: ModelGraph) -> str:
    p = spec.params
    nid = spec.id
    ratio = int(p.get("ratio", 2))
    dw = int(p.get("dw", 3))
    kind = spec.kind
    if kind == "ConvBNAct":
        return low.cba(nid, xs[0], p["c2"], p.get("k", 1), p.get("s", 1), p.get("g", 1), p.get("act", True))
    if kind == "GhostModule":
        return low.ghost(nid, xs[0], p["c2"], p.get("k", 1), p.get("s", 1), ratio, dw, p.get("act", True))
    if kind == "GhostBottleneck":
        return low.ghost_bottleneck(nid, xs[0], p["c2"], p.get("k", 3), p.get("s", 1), ratio, dw)
    if kind == "C2f":
        return low.c2f(nid, xs[0], p["c2"], p.get("n", 1), p.get("shortcut", True))
    if kind == "C3Ghost":
        return low.c3ghost(nid, xs[0], p["c2"], p.get("n", 1), ratio, dw, p.get("e", 0.5))
    if kind == "SPPF":
        return low.sppf(nid, xs[0], p["c2"], p.get("k", 5))
    if kind == "Upsample":
        return low.upsample(nid, xs[0], p.get("factor", 2))
    if kind == "Concat":
        return low.concat(nid, xs)
    if kind == "DetectHead":
        nbox = 4 * graph.reg_max
        b = low.cba(f"{nid}.box0", xs[0], p["c_box"], 3)
        b = low.cba(f"{nid}.box1", b, p["c_box"], 3)
        b = low.conv(f"{nid}.box2", b, nbox, 1, bias=True)
        c = low.cba(f"{nid}.cls0", xs[0], p["c_cls"], 3)
        c = low.cba(f"{nid}.cls1", c, p["c_cls"], 3)
        c = low.conv(f"{nid}.cls2", c, graph.num_classes, 1, bias=True)
        return low.concat(f"{nid}", [b, c])
    if kind == "EfficientHead":
        nbox = 4 * graph.reg_max
        w = p["width"]
        s = low.cba(f"{nid}.stem", xs[0], w, 1)
        b = low.cba(f"{nid}.box0", s, w, 3)
        b = low.conv(f"{nid}.box1", b, nbox, 1, bias=True)
        c = low.cba(f"{nid}.cls0", s, w, 3)
        c = low.conv(f"{nid}.cls1", c, graph.num_classes, 1, bias=True)
        return low.concat(f"{nid}", [b, c])
    if kind == "MaskCoeffBranch":
        c4 = p["c4"]
        first_k = 1 if p.get("style", "3x3") == "1x1+3x3" else 3
        m = low.cba(f"{nid}.cv0", xs[0], c4, first_k)
        m = low.cba(f"{nid}.cv1", m, c4, 3)
        m = low.conv(f"{nid}.cv2", m, graph.k, 1, bias=True)
        # coefficients live in [-1, 1]
        return low.act(f"{nid}", "tanh", m)
    if kind == "ProtoNet":
        c = p["c_"]
        y = low.cba(f"{nid}.cv1", xs[0], c, 3)
        for j in range(int(math.log2(p.get("upsample", 2)))):
            y = low.convT(f"{nid}.up{j}", y, c, 2)
        y = low.cba(f"{nid}.cv2", y, c, 3)
        return low.cba(f"{nid}.cv3", y, graph.k, 1)
    raise GraphError(f"node {nid}: cannot lower kind {kind}")


@dataclass
class Lowered:
    prims: List[Prim]
    values: Dict[str, str]  # layer id -> value name of its output
    channels: Dict[str, int]


def topo_order(graph: ModelGraph) -> List[LayerSpec]:
    """Nodes in a topological order (stable w.r.t. listed order)."""
    by_id: Dict[str, LayerSpec] = {}
    for n in graph.nodes:
        if n.id in by_id:
            raise GraphError(f"duplicate node id {n.id!r}")
        by_id[n.id] = n
    for n in graph.nodes:
        for i in n.inputs:
            if i not in by_id:
                raise GraphError(f"node {n.id}: input {i!r} does not exist")
    order: List[LayerSpec] = []
    state: Dict[str, int] = {}

    def visit(n: LayerSpec, path):
        st = state.get(n.id)
        if st == 2:
            return
        if st == 1:
            raise GraphError(f"cycle through node {n.id!r}: {' -> '.join(path + [n.id])}")
        state[n.id] = 1
        for i in n.inputs:
            visit(by_id[i], path + [n.id])
        state[n.id] = 2
        order.append(n)

    for n in graph.nodes:
        visit(n, [])
    return order


def lower(graph: ModelGraph) -> Lowered:
    """Lower to prims, checking acyclicity and channel closure."""
    prims: List[Prim] = []
    channels: Dict[str, int] = {}
    values: Dict[str, str] = {}
    for spec in topo_order(graph):
        if spec.kind == "Input":
            channels[INPUT] = graph.in_channels
            values[spec.id] = INPUT
            continue
        if not spec.inputs:
            raise GraphError(f"node {spec.id}: non-source node without inputs")
        xs = [values[i] for i in spec.inputs]
        low = _Lowerer(spec.id, prims, channels)
        try:
            out = lower_layer(spec, low, xs, graph)
        except KeyError as e:
            raise GraphError(f"node {spec.id}: missing parameter {e}") from None
        declared = layer_out_channels(spec, [channels[x] for x in xs], graph)
        if channels[out] != declared:
            raise GraphError(f"node {spec.id}: declared {declared} out-channels, constituents give {channels[out]}")
        values[spec.id] = out
    for name, nid in graph.outputs.items():
        if nid not in values:
            raise GraphError(f"output {name!r} refers to missing node {nid!r}")
    return Lowered(prims, values, channels)


def validate(graph: ModelGraph) -> None:
    """Raise :class:`GraphError` unless the graph is well formed."""
    lower(graph)
    proto = graph.outputs.get("proto")
    if proto is not None:
        p3 = graph.outputs.get("P3")
        srcs = graph.node(proto).inputs
        if p3 is not None and srcs != [p3]:
            raise GraphError(f"ProtoNet must consume only P3 ({p3}), got {srcs}")


def prune(graph: ModelGraph) -> ModelGraph:
    """Drop nodes that no output depends on."""
    by_id = {n.id: n for n in graph.nodes}
    live = set()
    stack = list(graph.outputs.values())
    while stack:
        nid = stack.pop()
        if nid in live:
            continue
        live.add(nid)
        stack.extend(by_id[nid].inputs)
    nodes = [n for n in graph.nodes if n.id in live or n.kind == "Input"]
    return ModelGraph(nodes, dict(graph.outputs), graph.input_size, graph.num_classes, graph.k,
                      graph.reg_max, graph.in_channels, graph.name, dict(graph.meta))


def input_node(graph: ModelGraph) -> Optional[LayerSpec]:
    for n in graph.nodes:
        if n.kind == "Input":
            return n
    return None
