"""``railseg`` command line: analyze, quantize, run, bench, eval.

Exit codes: 0 success, 1 usage error, 2 data/shape error, 3 I/O error.
Settings resolve as flags > ``--config`` JSON file > built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np

from . import bench, evalfmt, quant
from .graph import (ModelGraph, build, build_baseline, build_optimized, count, init_weights, load_graph, load_weights,
                    save_graph, tiny_model)
from .graph.build import LEVEL_ABLATIONS, ABLATIONS
from .pipeline import Pipeline, write_outputs
from .postprocess import CONF_THRESHOLD, IOU_THRESHOLD
from .preprocess import SourceImage, read_image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3

DEFAULTS = {
    "model": None,
    "weights": None,
    "plan": None,
    "images": [],
    "input_size": None,
    "precision": "fp32",
    "conf": CONF_THRESHOLD,
    "iou": IOU_THRESHOLD,
    "out_dir": "out",
    "seed": 0,
    "num_classes": 80,
}


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, err: BaseException):
        super().__init__(f"{stage}: {err}")
        self.stage = stage
        self.err = err


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (OSError, UsageError):
        raise
    except Exception as e:
        raise StageError(name, e) from e


def resolve(args, keys) -> Dict:
    """flags > config file > defaults, for the given manifest keys."""
    cfg: Dict = {}
    path = getattr(args, "config", None)
    if path:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
        if not isinstance(cfg, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    out = {}
    for k in keys:
        flag = getattr(args, k, None)
        if flag is not None and flag != []:
            out[k] = flag
        elif k in cfg:
            out[k] = cfg[k]
        else:
            out[k] = DEFAULTS[k]
    return out


BUILTIN = {"baseline", "optimized", "tiny"} | {f"ablation:{k}" for k in ABLATIONS} | {
    f"levels:{k}" for k in LEVEL_ABLATIONS}


def load_model(spec: str, input_size=None, num_classes: int = 80) -> ModelGraph:
    if spec == "tiny":
        g = tiny_model()[0]
    elif spec in BUILTIN:
        size = input_size or 640
        if spec == "baseline":
            g = build_baseline(size, num_classes)
        elif spec == "optimized":
            g = build_optimized(size, num_classes)
        else:
            kind, name = spec.split(":", 1)
            g = build((ABLATIONS if kind == "ablation" else LEVEL_ABLATIONS)[name], size, num_classes)
    else:
        g = load_graph(spec)
    if input_size and tuple(g.input_size) != (input_size, input_size):
        if input_size % 32:
            raise ValueError(f"input size must be a multiple of 32, got {input_size}")
        g = replace(g, input_size=(input_size, input_size))
    return g


def load_plan_from(m: Dict) -> quant.Plan:
    if m.get("plan"):
        plan = quant.load_plan(m["plan"])
        size = m.get("input_size")
        if size and tuple(plan.input_shape[1:]) != (size, size):
            raise ValueError(f"plan is static at {plan.input_shape[1]}x{plan.input_shape[2]}, asked for {size}")
        return plan
    if not m.get("model"):
        raise UsageError("need --model (with optional --weights) or --plan")
    g = load_model(m["model"], m.get("input_size"), m.get("num_classes", 80))
    if m.get("weights"):
        w = load_weights(m["weights"])
    elif m["model"] == "tiny":
        w = tiny_model()[1]
    else:
        w = init_weights(g, int(m.get("seed", 0)))
    return quant.build_plan(g, w, m.get("precision", "fp32"))


# subcommands ------------------------------------------------------------------

def _fmt_table(rep) -> str:
    lines = [f"{'stage':<10}{'params':>14}{'GFLOPs':>10}{'share':>8}"]
    share = rep.stage_share()
    for s, c in rep.stages.items():
        lines.append(f"{s:<10}{c.params:>14,}{c.flops / 1e9:>10.3f}{share[s] * 100:>7.1f}%")
    lines.append(f"{'total':<10}{rep.params:>14,}{rep.gflops:>10.3f}{100:>7.1f}%")
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    g = load_model(args.model, args.input_size, args.num_classes)
    rep = count(g)
    print(f"{g.name}  input {rep.input_size[0]}x{rep.input_size[1]}  classes {g.num_classes}")
    print(_fmt_table(rep))
    if args.nodes:
        for nid, c in rep.nodes.items():
            print(f"  {nid:<16}{c.params:>12,}{c.flops / 1e9:>10.4f}  {list(c.shape)}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(rep.to_dict(), f, indent=1)
            f.write("\n")
    if args.save_graph:
        save_graph(g, args.save_graph)
    return EXIT_OK


def cmd_quantize(args) -> int:
    m = resolve(args, ["model", "weights", "input_size", "precision", "seed", "num_classes"])
    if not m["model"]:
        raise UsageError("quantize needs --model")
    plan = load_plan_from(m)
    n = quant.save_plan(plan, args.out)
    print(f"plan {args.out} ({plan.precision}): {len(plan.program.prims)} ops (from {plan.source_prims}), "
          f"weights {plan.bytes_before / bench.MB:.3f} MB -> {plan.nbytes / bench.MB:.3f} MB, file {n} bytes")
    return EXIT_OK


def cmd_run(args) -> int:
    m = resolve(args, ["model", "weights", "plan", "images", "input_size", "precision", "conf", "iou", "out_dir",
                       "seed", "num_classes"])
    if not m["images"]:
        raise UsageError("run needs at least one --image")
    for p in m["images"]:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"image not found: {p}")
    plan = _stage("load", load_plan_from, m)
    pipe = Pipeline(plan, float(m["conf"]), float(m["iou"]))
    for path in m["images"]:
        img = _stage("read", read_image, path)
        x = _stage("preprocess", pipe.pre, img)
        raw = _stage("infer", pipe.infer, x)
        masks = _stage("postprocess", pipe.post, raw, img)
        stem = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(m["out_dir"], stem)
        write_outputs(out, img, masks)
        print(f"{path}: {len(masks)} instances -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    m = resolve(args, ["model", "weights", "plan", "images", "input_size", "precision", "seed", "num_classes"])
    cfg = bench.BenchConfig(runs=args.runs, warmup=args.warmup, mode=args.mode, window_s=args.window_s,
                            precision=m["precision"])
    if args.stub_ms:
        try:
            a, b, c = (float(v) for v in args.stub_ms.split(","))
        except ValueError:
            raise UsageError("--stub-ms takes three comma-separated numbers: pre,infer,post") from None
        stages = bench.StubStages(a, b, c)
        images = [None]
    else:
        plan = load_plan_from(m)
        stages = Pipeline(plan)
        if m["images"]:
            images = [read_image(p) for p in m["images"]]
        else:
            _, h, w = plan.input_shape
            images = [SourceImage.from_array(np.full((h, w, 3), 114, np.uint8))]
    rep = bench.run_bench(stages, images, cfg)
    print(f"mode {rep.mode}  runs {rep.runs}")
    print(f"pre {rep.pre_ms:.3f} ms  infer {rep.infer_ms:.3f} ms  post {rep.post_ms:.3f} ms  total {rep.total_ms:.3f} ms")
    print(f"cost {rep.cost_ms:.3f} ms  FPS {rep.fps:.1f}  latency {rep.latency_ms:.3f} ms  "
          f"throughput {rep.throughput_qps:.1f} qps  model {rep.model_size_mb:.3f} MB")
    if args.out:
        with open(f"{args.out}.json", "w", encoding="utf-8") as f:
            f.write(rep.to_json())
        with open(f"{args.out}.csv", "w", encoding="utf-8") as f:
            f.write(rep.to_csv())
    return EXIT_OK


def cmd_eval(args) -> int:
    need = args.kind == "mask"
    gt = evalfmt.load_groundtruth(args.gt, need)
    preds = evalfmt.load_predictions(args.pred_dir, need)
    for iid in gt:
        preds.setdefault(iid, [])
    v = bench.compute_map50(preds, gt, args.iou, args.kind)
    print(f"mAP@{args.iou:g} ({args.kind}): {v:.4f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump({"kind": args.kind, "iou": args.iou, "map": v}, f)
            f.write("\n")
    return EXIT_OK


# parser -----------------------------------------------------------------------

def _model_flags(p, config=True):
    p.add_argument("--model", help="graph JSON, or baseline | optimized | tiny | ablation:<row> | levels:<row>")
    p.add_argument("--weights", help="RSEW weights (random init from --seed if omitted)")
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--precision", choices=["fp32", "fp16"])
    p.add_argument("--num-classes", dest="num_classes", type=int, help="class count for built-in models (80)")
    p.add_argument("--seed", type=int)
    if config:
        p.add_argument("--config", help="JSON run manifest; flags override it")


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="railseg", description="Railway-track instance segmentation edge pipeline")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("analyze", help="params / GFLOPs per stage")
    p.add_argument("--model", required=True)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=80)
    p.add_argument("--json", help="write the full CostReport here")
    p.add_argument("--save-graph", dest="save_graph", help="write the graph JSON here")
    p.add_argument("--nodes", action="store_true", help="also print per-layer rows")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("quantize", help="fuse + convert precision, write a plan")
    _model_flags(p)
    p.add_argument("--out", required=True, help="plan weights path; sidecar is <out>.json")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("run", help="image(s) -> detections, masks, overlay")
    _model_flags(p)
    p.add_argument("--plan")
    p.add_argument("--image", dest="images", action="append", default=[])
    p.add_argument("--conf", type=float)
    p.add_argument("--iou", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="timing harness")
    _model_flags(p)
    p.add_argument("--plan")
    p.add_argument("--image", dest="images", action="append", default=[])
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--mode", choices=bench.MODES, default="single")
    p.add_argument("--window-s", dest="window_s", type=float, default=10.0)
    p.add_argument("--stub-ms", dest="stub_ms", help="pre,infer,post stage stubs instead of a model")
    p.add_argument("--out", help="report prefix; writes <out>.json and <out>.csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("eval", help="mAP@0.5 of a run output directory")
    p.add_argument("--pred-dir", dest="pred_dir", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--kind", choices=["box", "mask"], default="box")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--json")
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("railseg: a subcommand is required (analyze, quantize, run, bench, eval)")
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        code = EXIT_IO if isinstance(e.err, OSError) else EXIT_DATA
        print(f"error in stage {e}", file=sys.stderr)
        return code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
