"""YOLOv8n-seg style topologies: the baseline and the lightweight variants.

Channel/depth scaling follows the usual ``n`` model: width 0.25, depth 0.33,
so stages are 16 (stem) / 32 / 64 / 128 / 256 channels and block repeats
1 / 2 / 2 / 1 in the backbone, 1 in the neck.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Tuple

from .model import LayerSpec, ModelGraph, prune, validate

LEVEL_STRIDE = {"P3": 8, "P4": 16, "P5": 32}


@dataclass(frozen=True)
class VariantConfig:
    encoder: str = "C2f"  # or "C3Ghost"
    head: str = "decoupled"  # or "efficient"
    levels: Tuple[str, ...] = ("P3", "P4", "P5")
    # deepest backbone level kept; None -> deepest prediction level
    top: str | None = None
    width: float = 0.25
    depth: float = 0.33
    max_channels: int = 1024
    ghost_ratio: int = 2
    ghost_dw: int = 3
    ghost_e: float = 0.5  # C3Ghost hidden width as a fraction of its output
    # EfficientHead width: >0 fixed; 0 level width; -1 max(ch0, min(nc, 100)); -2 ch0
    efficient_width: int = -1
    # encoder blocks the Ghost variant replaces, "+"-joined from backbone/td/bu
    # (td = top-down neck path, bu = bottom-up); "all" and "neck" are shorthands
    ghost_scope: str = "backbone+td"
    # dropping a prediction level also drops its backbone stage
    truncate_backbone: bool = False
    # ProtoNet input: "P3" always, or "first" predicted level
    proto_level: str = "first"
    # keep the full PAN neck down to P3 even when P3 is not predicted
    full_neck: bool = True
    mask_branch: str = "3x3"  # "3x3" (two 3x3) or "1x1+3x3"
    proto_channels: int = 64
    proto_upsample: int = 2
    k: int = 32
    reg_max: int = 16
    name: str = "model"


BASELINE = VariantConfig(name="baseline")
OPTIMIZED = VariantConfig(encoder="C3Ghost", head="efficient", levels=("P3", "P4"), mask_branch="1x1+3x3",
                          name="optimized")

# ablation rows: (efficient head, C3Ghost, two prediction levels)
ABLATIONS: Dict[str, VariantConfig] = {
    "baseline": BASELINE,
    "efficient_head": replace(BASELINE, head="efficient", mask_branch="1x1+3x3", name="efficient_head"),
    "c3ghost": replace(BASELINE, encoder="C3Ghost", name="c3ghost"),
    "efficient_c3ghost": replace(OPTIMIZED, levels=("P3", "P4", "P5"), name="efficient_c3ghost"),
    "optimized": OPTIMIZED,
}

# prediction-level ablation on top of the optimized design
LEVEL_ABLATIONS: Dict[str, VariantConfig] = {
    "P3": replace(OPTIMIZED, levels=("P3",), name="P3"),
    "P4+P5": replace(OPTIMIZED, levels=("P4", "P5"), name="P4+P5"),
    "P3+P4+P5": replace(OPTIMIZED, levels=("P3", "P4", "P5"), name="P3+P4+P5"),
    "P3+P4": OPTIMIZED,
}


def _ch(c: int, cfg: VariantConfig) -> int:
    c = min(c, cfg.max_channels)
    return int(math.ceil(c * cfg.width / 8) * 8)


def _n(n: int, cfg: VariantConfig) -> int:
    return max(round(n * cfg.depth), 1) if n > 1 else n


def _eff_width(cfg: VariantConfig, level_ch: int, c_cls: int, ch0: int) -> int:
    if cfg.efficient_width > 0:
        return cfg.efficient_width
    return {0: level_ch, -1: c_cls, -2: ch0}[cfg.efficient_width]


def _level_num(level: str) -> int:
    return int(level[1:])


def build(cfg: VariantConfig, input_size=640, num_classes: int = 80) -> ModelGraph:
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    h, w = (int(v) for v in input_size)
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ValueError(f"input size must be a positive multiple of 32, got {h}x{w}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    levels = sorted(cfg.levels, key=_level_num)
    if not levels or any(l not in LEVEL_STRIDE for l in levels):
        raise ValueError(f"levels must be drawn from P3/P4/P5, got {cfg.levels}")
    top = _level_num(cfg.top or (levels[-1] if cfg.truncate_backbone else "P5"))

    nodes: List[LayerSpec] = [LayerSpec("in", "Input", {}, [], "input")]
    block = cfg.encoder
    extra = {"ratio": cfg.ghost_ratio, "dw": cfg.ghost_dw, "e": cfg.ghost_e} if block == "C3Ghost" else {}

    def add(nid, kind, params, inputs, stage):
        nodes.append(LayerSpec(nid, kind, params, list(inputs), stage))
        return nid

    def enc(nid, c2, n, inp, stage, shortcut=True):
        group = "backbone" if stage == "backbone" else nid.rstrip("0123456789")
        scope = {"all": "backbone+td+bu", "neck": "td+bu"}.get(cfg.ghost_scope, cfg.ghost_scope)
        kind = block if group in scope.split("+") else "C2f"
        params = {"c2": c2, "n": n, **(extra if kind == "C3Ghost" else {})}
        if kind == "C2f":
            params["shortcut"] = shortcut
        return add(nid, kind, params, [inp], stage)

    # backbone
    c = {lvl: _ch(64 * 2 ** (lvl - 1), cfg) for lvl in range(1, 6)}  # 16, 32, 64, 128, 256
    reps = {2: _n(3, cfg), 3: _n(6, cfg), 4: _n(6, cfg), 5: _n(3, cfg)}
    x = add("stem", "ConvBNAct", {"c2": c[1], "k": 3, "s": 2}, ["in"], "backbone")
    bb: Dict[int, str] = {}
    for lvl in range(2, top + 1):
        x = add(f"down{lvl}", "ConvBNAct", {"c2": c[lvl], "k": 3, "s": 2}, [x], "backbone")
        x = enc(f"stage{lvl}", c[lvl], reps[lvl], x, "backbone")
        bb[lvl] = x
    bb[top] = add("sppf", "SPPF", {"c2": c[top], "k": 5}, [bb[top]], "backbone")

    proto_lvl = _level_num(levels[0]) if cfg.proto_level == "first" else 3
    low = 3 if cfg.full_neck else min(_level_num(levels[0]), proto_lvl)

    # neck: top-down to the lowest needed level, then bottom-up
    nrep = _n(3, cfg)
    td: Dict[int, str] = {top: bb[top]}
    for lvl in range(top - 1, low - 1, -1):
        u = add(f"up{lvl}", "Upsample", {"factor": 2}, [td[lvl + 1]], "neck")
        j = add(f"cat_td{lvl}", "Concat", {}, [u, bb[lvl]], "neck")
        td[lvl] = enc(f"td{lvl}", c[lvl], nrep, j, "neck", shortcut=False)
    out: Dict[int, str] = {low: td[low]}
    for lvl in range(low + 1, top + 1):
        d = add(f"pan_down{lvl}", "ConvBNAct", {"c2": c[lvl - 1], "k": 3, "s": 2}, [out[lvl - 1]], "neck")
        j = add(f"cat_bu{lvl}", "Concat", {}, [d, td[lvl]], "neck")
        out[lvl] = enc(f"bu{lvl}", c[lvl], nrep, j, "neck", shortcut=False)

    # heads; widths follow the YOLOv8 rule anchored at the first predicted level
    ch0 = c[_level_num(levels[0])]
    c_box = max(16, ch0 // 4, 4 * cfg.reg_max)
    c_cls = max(ch0, min(num_classes, 100))
    c4 = max(ch0 // 4, cfg.k)
    outputs: Dict[str, str] = {f"P{l}": out[l] for l in out if f"P{l}" in levels or l == proto_lvl}
    for lvl_name in levels:
        lvl = _level_num(lvl_name)
        if cfg.head == "efficient":
            det = add(f"det_{lvl_name}", "EfficientHead", {"width": _eff_width(cfg, c[lvl], c_cls, ch0)}, [out[lvl]], "head")
        else:
            det = add(f"det_{lvl_name}", "DetectHead", {"c_box": c_box, "c_cls": c_cls}, [out[lvl]], "head")
        mc = add(f"mc_{lvl_name}", "MaskCoeffBranch", {"c4": c4, "style": cfg.mask_branch}, [out[lvl]], "head")
        outputs[f"det_{lvl_name}"] = det
        outputs[f"mc_{lvl_name}"] = mc
    outputs["proto"] = add("proto", "ProtoNet", {"c_": cfg.proto_channels, "upsample": cfg.proto_upsample},
                           [out[proto_lvl]], "head")

    g = ModelGraph(nodes, outputs, (h, w), num_classes, cfg.k, cfg.reg_max, 3, cfg.name,
                   {"variant": cfg.name, "strides": {l: LEVEL_STRIDE[l] for l in levels}})
    g = prune(g)
    validate(g)
    return g


def build_baseline(input_size=640, num_classes: int = 80) -> ModelGraph:
    return build(BASELINE, input_size, num_classes)


def build_optimized(input_size=640, num_classes: int = 80) -> ModelGraph:
    return build(OPTIMIZED, input_size, num_classes)
