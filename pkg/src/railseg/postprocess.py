"""From raw head outputs to instance masks in source-image coordinates.

decode -> filter_confidence -> nms -> assemble_masks. Boxes live in
network-input pixels until :func:`box_to_source` maps them back.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import pnm
from .parallel import map_ordered
from .preprocess import AffineMap
from .tensor import as_array, sigmoid

CONF_THRESHOLD = 0.05
IOU_THRESHOLD = 0.25
MASK_THRESHOLD = 0.5


@dataclass
class Detection:
    class_id: int
    score: float
    box: Tuple[float, float, float, float]  # x1, y1, x2, y2 in input pixels
    coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class InstanceMask:
    class_id: int
    score: float
    bitmap: np.ndarray  # (H_src, W_src) bool
    box: Tuple[float, float, float, float]  # source pixels


def dfl_decode(dist: np.ndarray, reg_max: int = 16) -> np.ndarray:
    """Expected bin index per side from (N, 4*reg_max) logits -> (N, 4)."""
    d = np.asarray(dist, dtype=np.float64).reshape(-1, 4, reg_max)
    d = d - d.max(axis=2, keepdims=True)
    e = np.exp(d)
    p = e / e.sum(axis=2, keepdims=True)
    return p @ np.arange(reg_max, dtype=np.float64)


def decode(raw, conf: float = CONF_THRESHOLD) -> List[Detection]:
    """Anchor-free decode: one best-class candidate per location scoring >= conf."""
    ltrb = dfl_decode(raw.box_dist, raw.reg_max) * raw.strides[:, None]
    ax = raw.anchors[:, 0].astype(np.float64)
    ay = raw.anchors[:, 1].astype(np.float64)
    boxes = np.stack([ax - ltrb[:, 0], ay - ltrb[:, 1], ax + ltrb[:, 2], ay + ltrb[:, 3]], axis=1)
    probs = sigmoid(raw.cls_logits)
    cls = probs.argmax(axis=1)
    score = probs[np.arange(len(cls)), cls].astype(np.float64)
    ok = (score >= conf) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return [Detection(int(cls[i]), float(score[i]), tuple(float(v) for v in boxes[i]), raw.coeffs[i].copy())
            for i in np.flatnonzero(ok)]


def filter_confidence(dets: Sequence[Detection], threshold: float = CONF_THRESHOLD) -> List[Detection]:
    return [d for d in dets if d.score >= threshold]


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms_order(dets: Sequence[Detection]) -> List[int]:
    """Indices ordered by score descending, ties by original index."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def nms(dets: Sequence[Detection], iou_threshold: float = IOU_THRESHOLD) -> List[Detection]:
    """Class-wise greedy NMS; a box is suppressed when IoU > threshold."""
    order = nms_order(dets)
    kept: List[int] = []
    for i in order:
        d = dets[i]
        if all(dets[j].class_id != d.class_id or iou(dets[j].box, d.box) <= iou_threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


# mask assembly -------------------------------------------------------------

def _taps(n_dst: int, n_src: int, pos: np.ndarray):
    c = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, c - lo


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at the grid ys x xs (source pixel coordinates, clamped)."""
    y0, y1, fy = _taps(len(ys), img.shape[0], ys)
    x0, x1, fx = _taps(len(xs), img.shape[1], xs)
    fy = fy[:, None]
    fx = fx[None, :]
    a = img[y0]
    b = img[y1]
    top = (1.0 - fx) * a[:, x0] + fx * a[:, x1]
    bot = (1.0 - fx) * b[:, x0] + fx * b[:, x1]
    return (1.0 - fy) * top + fy * bot


def box_to_source(box, m: AffineMap):
    x1, y1 = m.inverse(box[0], box[1])
    x2, y2 = m.inverse(box[2], box[3])
    w, h = m.src_size
    return (min(max(x1, 0.0), w), min(max(y1, 0.0), h), min(max(x2, 0.0), w), min(max(y2, 0.0), h))


def _box_region(n: int, lo: float, hi: float) -> np.ndarray:
    c = np.arange(n, dtype=np.float64) + 0.5
    return (c >= lo) & (c < hi)


def combine(coeffs, proto: np.ndarray) -> np.ndarray:
    """Pre-sigmoid mask: sum_i coeffs[i] * proto[i], accumulated in index order."""
    acc = np.zeros(proto.shape[1:], dtype=np.float64)
    for i in range(proto.shape[0]):
        acc += float(coeffs[i]) * proto[i]
    return acc


def assemble_one(det: Detection, proto: np.ndarray, m: AffineMap, threshold: float = MASK_THRESHOLD) -> InstanceMask:
    k, ph, pw = proto.shape
    dw, dh = m.dst_size
    mask = 1.0 / (1.0 + np.exp(-combine(det.coeffs, proto)))
    # crop at prototype resolution (pixel centres inside the scaled box)
    sx, sy = pw / dw, ph / dh
    x1, y1, x2, y2 = det.box
    mask = mask * (_box_region(ph, y1 * sy, y2 * sy)[:, None] & _box_region(pw, x1 * sx, x2 * sx)[None, :])
    # prototype -> network input, half-pixel aligned
    ys = (np.arange(dh) + 0.5) * (ph / dh) - 0.5
    xs = (np.arange(dw) + 0.5) * (pw / dw) - 0.5
    full = _bilinear(mask, ys, xs)
    # network input -> source through the affine map
    sw, sh = m.src_size
    ys = (np.arange(sh) + 0.5) * m.scale + m.ty - 0.5
    xs = (np.arange(sw) + 0.5) * m.scale + m.tx - 0.5
    src = _bilinear(full, ys, xs)
    box = box_to_source(det.box, m)
    inside = _box_region(sh, box[1], box[3])[:, None] & _box_region(sw, box[0], box[2])[None, :]
    return InstanceMask(det.class_id, det.score, (src > threshold) & inside, box)


def assemble_masks(kept: Sequence[Detection], prototypes, m: AffineMap, mask_threshold: float = MASK_THRESHOLD,
                   workers=None) -> List[InstanceMask]:
    """Instance masks at source resolution, one per detection, in input order."""
    proto = as_array(prototypes).astype(np.float64)
    if proto.ndim == 4:
        proto = proto[0]
    if proto.ndim != 3:
        raise ValueError(f"prototypes must be k x h x w, got shape {proto.shape}")
    for j, d in enumerate(kept):
        if len(d.coeffs) != proto.shape[0]:
            raise ValueError(f"detection {j} has {len(d.coeffs)} coefficients, prototypes have k={proto.shape[0]}")
    return map_ordered(lambda d: assemble_one(d, proto, m, mask_threshold), kept, workers)


# outputs ---------------------------------------------------------------

PALETTE = np.array([[255, 56, 56], [56, 255, 56], [56, 56, 255], [255, 157, 151], [255, 178, 29],
                    [207, 210, 49], [72, 249, 10], [26, 147, 52], [0, 212, 187], [44, 153, 168]], dtype=np.uint16)


def detections_json(masks: Sequence[InstanceMask], mask_files: Sequence[str] | None = None) -> str:
    out = []
    for j, im in enumerate(masks):
        rec = {"class_id": int(im.class_id), "score": round(float(im.score), 6),
               "box_src": [round(float(v), 3) for v in im.box]}
        if mask_files is not None:
            rec["mask"] = mask_files[j]
        out.append(rec)
    return json.dumps(out, indent=1) + "\n"


def mask_pgm(im: InstanceMask) -> bytes:
    return pnm.encode(np.where(im.bitmap, 255, 0).astype(np.uint8))


def overlay(pixels: np.ndarray, masks: Sequence[InstanceMask]) -> np.ndarray:
    """Source image with each mask blended half-and-half in its class colour."""
    out = pixels.astype(np.uint16)
    for im in masks:
        col = PALETTE[im.class_id % len(PALETTE)]
        out[im.bitmap] = (out[im.bitmap] + col) // 2
    return out.astype(np.uint8)
