"""Post-training rewrites: conv/BN/SiLU fusion, concat elimination, FP16,
and standalone affine int8 quantization helpers.

All rewrites work on the lowered :class:`~railseg.graph.execute.Program`
and return new objects; inputs are never mutated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Dict, List, Tuple

import numpy as np

from . import half
from .graph.execute import Program, RawOutputs, collect, program, run_program
from .graph.io import load_weights, save_weights
from .graph.model import Prim
from .tensor import FP16, FP32, TensorF, as_array

SCALE_FLOOR = 1e-12
SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
PLAN_FORMAT = "railseg-plan"
PLAN_VERSION = 1


# conv + BN -----------------------------------------------------------------

def fuse_conv_bn(w, b, gamma, beta, mean, var, eps: float = 1e-3) -> Tuple[np.ndarray, np.ndarray]:
    """Fold inference-mode BN into the preceding conv; ``b`` may be None."""
    w = np.asarray(as_array(w), dtype=np.float64)
    cout = w.shape[0]
    vecs = [np.asarray(as_array(v), dtype=np.float64).reshape(-1) for v in (gamma, beta, mean, var)]
    for name, v in zip(("gamma", "beta", "mean", "var"), vecs):
        if v.size != cout:
            raise ValueError(f"BN {name} has {v.size} channels, conv has {cout}")
    gamma, beta, mean, var = vecs
    b = np.zeros(cout) if b is None else np.asarray(as_array(b), dtype=np.float64).reshape(-1)
    if np.any(var + eps <= 0):
        raise ValueError("BN var + eps must be > 0")
    s = gamma / np.sqrt(var + eps)
    wf = w * s.reshape((-1,) + (1,) * (w.ndim - 1))
    bf = (b - mean) * s + beta
    return wf.astype(np.float32), bf.astype(np.float32)


def _consumers(prims: List[Prim]) -> Dict[str, List[int]]:
    cons: Dict[str, List[int]] = {}
    for i, p in enumerate(prims):
        for v in p.inputs:
            cons.setdefault(v, []).append(i)
    return cons


def _rename(prims: List[Prim], outputs: Dict[str, str], alias: Dict[str, str]):
    prims = [replace(p, inputs=[alias.get(v, v) for v in p.inputs]) for p in prims]
    outputs = {k: alias.get(v, v) for k, v in outputs.items()}
    return prims, outputs


def fuse(prog: Program, weights: Dict[str, TensorF]) -> Tuple[Program, Dict[str, TensorF]]:
    """Fold every conv -> bn [-> silu] chain into one conv prim."""
    prims = prog.prims
    cons = _consumers(prims)
    outs = set(prog.outputs.values())
    by_name = {p.name: i for i, p in enumerate(prims)}

    def sole(v):
        c = cons.get(v, [])
        return prims[c[0]] if len(c) == 1 and v not in outs else None

    new_w = dict(weights)
    drop = set()
    alias: Dict[str, str] = {}
    new_prims: Dict[int, Prim] = {}
    for i, p in enumerate(prims):
        if p.op != "conv" or p.attrs.get("act"):
            continue
        bn = sole(p.name)
        if bn is None or bn.op != "bn":
            continue
        wf, bf = fuse_conv_bn(weights[f"{p.name}.weight"].numpy(),
                              weights[f"{p.name}.bias"].numpy() if p.attrs.get("bias") else None,
                              *(weights[f"{bn.name}.{s}"].numpy() for s in ("gamma", "beta", "mean", "var")),
                              eps=bn.attrs.get("eps", 1e-3))
        for s in ("gamma", "beta", "mean", "var"):
            new_w.pop(f"{bn.name}.{s}", None)
        new_w[f"{p.name}.weight"] = TensorF.from_array(wf)
        new_w[f"{p.name}.bias"] = TensorF.from_array(bf)
        attrs = dict(p.attrs, bias=True)
        drop.add(by_name[bn.name])
        last = bn.name
        act = sole(bn.name)
        if act is not None and act.op == "silu":
            attrs["act"] = "silu"
            drop.add(by_name[act.name])
            last = act.name
        alias[last] = p.name
        new_prims[i] = replace(p, attrs=attrs)
    out = [new_prims.get(i, p) for i, p in enumerate(prims) if i not in drop]
    out, outputs = _rename(out, prog.outputs, alias)
    return replace(prog, prims=out, outputs=outputs), new_w


def eliminate_concat(prog: Program) -> Program:
    """Drop channel concats whose every consumer is a dense conv.

    Each consumer reads the concat's producers directly and treats them as
    consecutive channel ranges of its weight, so no concatenated buffer is
    ever materialized.
    """
    prims = prog.prims
    cons = _consumers(prims)
    outs = set(prog.outputs.values())
    drop = set()
    rewired: Dict[int, List[str]] = {}
    for i, p in enumerate(prims):
        if p.op != "concat" or p.attrs.get("axis", 1) != 1 or p.name in outs:
            continue
        users = cons.get(p.name, [])
        if not users or any(prims[u].op != "conv" or prims[u].attrs["groups"] != 1 or len(prims[u].inputs) != 1
                            for u in users):
            continue
        drop.add(i)
        for u in users:
            rewired[u] = list(p.inputs)
    if not drop:
        return prog
    out = [replace(p, inputs=rewired[i]) if i in rewired else p for i, p in enumerate(prims) if i not in drop]
    # a concat may have fed another concat that was itself removed: flatten
    return eliminate_concat(replace(prog, prims=out))


# precision ---------------------------------------------------------------------

def to_fp16(t) -> TensorF:
    if isinstance(t, TensorF) and t.dtype == FP16:
        return t
    return TensorF.from_array(as_array(t), FP16)


def from_fp16(t) -> TensorF:
    if isinstance(t, TensorF):
        return TensorF.from_array(t.numpy(), FP32)
    return TensorF.from_array(as_array(t), FP32)


@dataclass(frozen=True)
class QuantSpec:
    mode: str = "AFFINE_INT8"
    scheme: str = SYMMETRIC
    scale: float = 1.0
    zero_point: int = 0

    def __post_init__(self):
        if self.mode not in ("FP32", "FP16", "AFFINE_INT8"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scheme not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == SYMMETRIC and self.zero_point != 0:
            raise ValueError("symmetric quantization has zero_point 0")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")


def affine_quantize(x, scheme: str = SYMMETRIC) -> Tuple[np.ndarray, QuantSpec]:
    """Per-tensor int8 quantization; all-zero ranges use a 1e-12 scale floor."""
    x = np.asarray(as_array(x), dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if scheme == SYMMETRIC:
        scale = max(float(np.abs(x).max()) / 127.0, SCALE_FLOOR)
        q = np.clip(np.rint(x / scale), -127, 127)
        return q.astype(np.int8), QuantSpec("AFFINE_INT8", SYMMETRIC, scale, 0)
    if scheme == ASYMMETRIC:
        lo, hi = float(x.min()), float(x.max())
        scale = max((hi - lo) / 255.0, SCALE_FLOOR)
        zp = int(np.rint(-lo / scale)) - 128
        q = np.clip(np.rint(x / scale) + zp, -128, 127)
        return q.astype(np.int8), QuantSpec("AFFINE_INT8", ASYMMETRIC, scale, zp)
    raise ValueError(f"unknown scheme {scheme!r}")


def affine_dequantize(q, spec: QuantSpec) -> np.ndarray:
    return ((np.asarray(q, dtype=np.float64) - spec.zero_point) * spec.scale).astype(np.float32)


# plans -------------------------------------------------------------------------

def weights_bytes(weights: Dict[str, TensorF]) -> int:
    return sum(t.nbytes for t in weights.values())


@dataclass
class Plan:
    program: Program
    weights: Dict[str, TensorF]
    precision: str  # "fp32" | "fp16"
    source_prims: int = 0
    bytes_before: int = 0

    @property
    def input_shape(self) -> tuple:
        return self.program.input_shape

    @property
    def nbytes(self) -> int:
        return weights_bytes(self.weights)

    def narrow(self):
        return half.round_trip if self.precision == "fp16" else None

    def run(self, x) -> Dict[str, np.ndarray]:
        return run_program(self.program, self.weights, x, self.narrow())

    def execute(self, x) -> RawOutputs:
        return collect(self.program, self.run(x))


def build_plan(graph, weights: Dict[str, TensorF], precision: str = "fp32", fuse_bn: bool = True,
               drop_concat: bool = True) -> Plan:
    precision = precision.lower()
    if precision not in ("fp32", "fp16"):
        raise ValueError(f"precision must be fp32 or fp16, got {precision!r}")
    prog = graph if isinstance(graph, Program) else program(graph)
    src_n = len(prog.prims)
    before = weights_bytes(weights)
    w = {k: (from_fp16(v) if v.dtype == FP16 else v) for k, v in weights.items()}
    if fuse_bn:
        prog, w = fuse(prog, w)
    if drop_concat:
        prog = eliminate_concat(prog)
    if precision == "fp16":
        w = {k: to_fp16(v) for k, v in w.items()}
    return Plan(prog, w, precision, src_n, before)


def plan_to_dict(plan: Plan) -> dict:
    p = plan.program
    return {
        "format": PLAN_FORMAT,
        "version": PLAN_VERSION,
        "precision": plan.precision,
        "input_shape": list(p.input_shape),
        "num_classes": p.num_classes,
        "k": p.k,
        "reg_max": p.reg_max,
        "strides": p.strides,
        "outputs": p.outputs,
        "prims": [{"name": q.name, "op": q.op, "inputs": q.inputs, "attrs": q.attrs, "owner": q.owner}
                  for q in p.prims],
    }


def save_plan(plan: Plan, path) -> int:
    """Weights to ``path`` (RSEW), program to ``path + ".json"``; returns weight-file bytes."""
    n = save_weights(plan.weights, path)
    with open(f"{path}.json", "w", encoding="utf-8") as f:
        json.dump(plan_to_dict(plan), f, indent=1, sort_keys=True)
        f.write("\n")
    return n


def load_plan(path) -> Plan:
    with open(f"{path}.json", "r", encoding="utf-8") as f:
        d = json.load(f)
    if d.get("format") != PLAN_FORMAT or d.get("version") != PLAN_VERSION:
        raise ValueError(f"{path}.json is not a version {PLAN_VERSION} {PLAN_FORMAT} document")
    prims = [Prim(q["name"], q["op"], list(q["inputs"]), dict(q["attrs"]), q["owner"]) for q in d["prims"]]
    prog = Program(prims, dict(d["outputs"]), tuple(d["input_shape"]), d["num_classes"], d["k"], d["reg_max"],
                   dict(d.get("strides", {})))
    return Plan(prog, load_weights(path), d["precision"], len(prims), 0)

