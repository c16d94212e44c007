"""Timing harness and evaluation metrics.

Definitions used throughout:

* latency  - mean inference time per image (pre/post excluded)
* cost     - mean pre + infer + post time per image
* FPS      - 1000 / cost_ms
* throughput - completions per second while the pipelined mode is kept
  saturated for a fixed wall-clock window
"""
from __future__ import annotations

import csv
import io
import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

MODES = ("single", "pipelined")
MB = float(1 << 20)


@dataclass
class BenchConfig:
    runs: int = 1000
    warmup: int = 10
    mode: str = "single"
    batch_size: int = 1
    prefetch: int = 2
    input_size: int = 640
    precision: str = "fp32"
    window_s: float = 10.0  # 0 disables the saturation window

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.prefetch < 1:
            raise ValueError("batch_size and prefetch depth must be >= 1")
        if self.window_s < 0:
            raise ValueError("window_s must be >= 0")


@dataclass
class BenchReport:
    mode: str
    runs: int
    pre_ms: float
    infer_ms: float
    post_ms: float
    total_ms: float
    cost_ms: float
    latency_ms: float
    fps: float
    throughput_qps: float
    model_size_mb: float
    wall_s: float
    samples: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self, with_samples: bool = True) -> dict:
        d = asdict(self)
        if not with_samples:
            d.pop("samples")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def to_csv(self) -> str:
        """Summary row plus one row per timed run."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = [k for k in self.to_dict(False)]
        w.writerow(keys)
        w.writerow([getattr(self, k) for k in keys])
        w.writerow([])
        w.writerow(["run", "pre_ms", "infer_ms", "post_ms"])
        for i, row in enumerate(zip(*(self.samples[s] for s in ("pre", "infer", "post")))):
            w.writerow([i, *row])
        return buf.getvalue()


class Stages:
    """pre(image) -> x; infer(x) -> raw; post(raw, image) -> result."""

    model_bytes: int = 0

    def pre(self, image):
        raise NotImplementedError

    def infer(self, x):
        raise NotImplementedError

    def post(self, raw, image):
        raise NotImplementedError


def _wait_ms(ms: float) -> None:
    """Sleep most of the interval, then spin to the deadline."""
    end = time.perf_counter_ns() + int(ms * 1e6)
    coarse = ms / 1000.0 - 0.001
    if coarse > 0:
        time.sleep(coarse)
    while time.perf_counter_ns() < end:
        pass


class StubStages(Stages):
    """Fixed-duration stand-ins for the three stages."""

    def __init__(self, pre_ms: float, infer_ms: float, post_ms: float, model_bytes: int = 0):
        self.ms = (pre_ms, infer_ms, post_ms)
        self.model_bytes = model_bytes

    def pre(self, image):
        _wait_ms(self.ms[0])
        return image

    def infer(self, x):
        _wait_ms(self.ms[1])
        return x

    def post(self, raw, image):
        _wait_ms(self.ms[2])
        return raw


def mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _timed(fn, *args):
    t0 = time.perf_counter_ns()
    out = fn(*args)
    return out, (time.perf_counter_ns() - t0) / 1e6


def _single(stages: Stages, images, n: int, offset: int = 0):
    pre, inf, post = [], [], []
    for i in range(n):
        img = images[(offset + i) % len(images)]
        x, a = _timed(stages.pre, img)
        raw, b = _timed(stages.infer, x)
        _, c = _timed(stages.post, raw, img)
        pre.append(a)
        inf.append(b)
        post.append(c)
    return pre, inf, post


def _pipelined(stages: Stages, images, n: Optional[int], depth: int, deadline_ns: Optional[int] = None):
    """Producer thread pre-processes into a bounded queue; caller infers + posts.

    Runs ``n`` items, or until ``deadline_ns`` when ``n`` is None.
    """
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()
    pre: List[float] = []
    err: List[BaseException] = []
    done = object()

    def producer():
        i = 0
        try:
            while not stop.is_set() and (n is None or i < n):
                img = images[i % len(images)]
                x, a = _timed(stages.pre, img)
                pre.append(a)
                while not stop.is_set():
                    try:
                        q.put((x, img), timeout=0.05)
                        break
                    except queue.Full:
                        continue
                i += 1
        except BaseException as e:  # surfaced on the caller's thread
            err.append(e)
        finally:
            while True:
                try:
                    q.put(done, timeout=0.05)
                    break
                except queue.Full:
                    if stop.is_set():
                        try:
                            q.get_nowait()
                        except queue.Empty:
                            pass

    th = threading.Thread(target=producer, daemon=True)
    th.start()
    inf: List[float] = []
    post: List[float] = []
    try:
        while True:
            item = q.get()
            if item is done:
                break
            x, img = item
            raw, b = _timed(stages.infer, x)
            _, c = _timed(stages.post, raw, img)
            inf.append(b)
            post.append(c)
            if deadline_ns is not None and time.perf_counter_ns() >= deadline_ns:
                stop.set()
    finally:
        stop.set()
        th.join()
    if err:
        raise err[0]
    return pre[:len(inf)], inf, post


def measure_throughput(stages: Stages, images, window_s: float, depth: int = 2) -> float:
    """Completions per second with the pipelined mode saturated for ``window_s``."""
    t0 = time.perf_counter_ns()
    _, inf, _ = _pipelined(stages, images, None, depth, t0 + int(window_s * 1e9))
    dt = (time.perf_counter_ns() - t0) / 1e9
    return len(inf) / dt


def run_bench(stages: Stages, images: Sequence, config: BenchConfig) -> BenchReport:
    if len(images) == 0:
        raise ValueError("run_bench needs at least one image")
    images = list(images)
    if config.warmup:
        _single(stages, images, config.warmup)
    t0 = time.perf_counter_ns()
    if config.mode == "single":
        pre, inf, post = _single(stages, images, config.runs)
    else:
        pre, inf, post = _pipelined(stages, images, config.runs, config.prefetch)
    wall = (time.perf_counter_ns() - t0) / 1e9
    if config.window_s > 0:
        qps = measure_throughput(stages, images, config.window_s, config.prefetch)
    else:
        qps = config.runs / wall
    pre_ms, inf_ms, post_ms = mean(pre), mean(inf), mean(post)
    cost = pre_ms + inf_ms + post_ms
    total = mean([a + b + c for a, b, c in zip(pre, inf, post)])
    return BenchReport(
        mode=config.mode,
        runs=config.runs,
        pre_ms=pre_ms,
        infer_ms=inf_ms,
        post_ms=post_ms,
        total_ms=total,
        cost_ms=cost,
        latency_ms=inf_ms,
        fps=1000.0 / cost,
        throughput_qps=qps,
        model_size_mb=stages.model_bytes / MB,
        wall_s=wall,
        samples={"pre": pre, "infer": inf, "post": post},
    )


def fps_from_cost(cost_ms: float) -> float:
    return 1000.0 / cost_ms


def model_size(plan_or_weights) -> float:
    """Parameter payload in MiB (bytes / 2**20)."""
    w = getattr(plan_or_weights, "weights", plan_or_weights)
    return sum(t.nbytes for t in w.values()) / MB


# mAP@0.5 --------------------------------------------------------------------

@dataclass
class Instance:
    class_id: int
    box: tuple = ()  # x1, y1, x2, y2
    mask: Optional[np.ndarray] = None  # bool H x W
    score: float = 1.0


def box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP from score-ranked TP flags."""
    if n_gt == 0:
        return 0.0 if len(tp) else 1.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = np.concatenate([[0.0], ctp / n_gt])
    prec = np.concatenate([[1.0], ctp / np.maximum(ctp + cfp, 1e-300)])
    # precision envelope, right to left
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.sum((rec[1:] - rec[:-1]) * prec[1:]))


def match_class(preds, gts, iou_thr: float, kind: str):
    """TP flags for score-ranked (image, Instance) predictions of one class."""
    iou = mask_iou if kind == "mask" else box_iou
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1].score, i))
    used: Dict[tuple, bool] = {}
    flags = []
    for i in order:
        img, p = preds[i]
        # highest-IoU still-unmatched ground truth at or above the threshold
        best, best_j = -1.0, None
        for j, g in enumerate(gts.get(img, [])):
            if used.get((img, j)):
                continue
            v = iou(p.mask, g.mask) if kind == "mask" else iou(p.box, g.box)
            if v >= iou_thr and v > best:
                best, best_j = v, j
        if best_j is not None:
            used[(img, best_j)] = True
        flags.append(best_j is not None)
    return flags


def compute_map50(predictions: Dict, groundtruth: Dict, iou: float = 0.5, kind: str = "box") -> float:
    """mAP at one IoU threshold.

    ``predictions`` / ``groundtruth`` map image id -> list of
    :class:`Instance`. Each class present in either set counts; a class with
    predictions but no ground truth scores 0. No classes at all -> 1.0.
    """
    if kind not in ("box", "mask"):
        raise ValueError(f"kind must be box or mask, got {kind!r}")
    missing = set(predictions) - set(groundtruth)
    if missing:
        raise ValueError(f"predictions for unknown image ids: {sorted(missing)}")
    classes = sorted({i.class_id for v in groundtruth.values() for i in v}
                     | {i.class_id for v in predictions.values() for i in v})
    if not classes:
        return 1.0
    aps = []
    for c in classes:
        gts = {img: [g for g in v if g.class_id == c] for img, v in groundtruth.items()}
        preds = [(img, p) for img in sorted(predictions) for p in predictions[img] if p.class_id == c]
        n_gt = sum(len(v) for v in gts.values())
        aps.append(average_precision(match_class(preds, gts, iou, kind), n_gt))
    return float(np.mean(aps))
