"""Ground-truth / prediction files for ``railseg eval``.

Ground truth (JSON)::

    {"images": [{"id": "frame_0001", "width": W, "height": H,
                 "annotations": [{"class_id": 0,
                                  "box": [x1, y1, x2, y2],          # optional if a mask is given
                                  "polygon": [[x, y], ...]          # or
                                  "rle": {"counts": [n0, n1, ...]}  # row-major, starts with a 0-run
                                 }]}]}

Predictions: the output directory of ``railseg run``; one sub-directory per
image id holding ``detections.json`` and the mask PGMs it references.
"""
from __future__ import annotations

import json
import os
from typing import Dict, List

import numpy as np

from . import pnm
from .bench import Instance


def rle_decode(counts, h: int, w: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise ValueError(f"RLE counts sum to {sum(counts)}, mask has {h * w} pixels")
    vals = np.zeros(len(counts), dtype=bool)
    vals[1::2] = True
    return np.repeat(vals, counts).reshape(h, w)


def rle_encode(mask: np.ndarray) -> List[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def polygon_mask(poly, h: int, w: int) -> np.ndarray:
    """Even-odd fill, sampled at pixel centres."""
    pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError("polygon needs at least 3 points")
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.zeros((h, w), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        if b == d:
            continue
        crosses = (b > py) != (d > py)
        xi = a + (py - b) * (c - a) / (d - b)
        inside ^= crosses & (px < xi)
    return inside


def _mask_box(m: np.ndarray):
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def load_groundtruth(path, need_masks: bool = False) -> Dict[str, List[Instance]]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    out: Dict[str, List[Instance]] = {}
    for img in doc["images"]:
        iid = str(img["id"])
        h, w = int(img["height"]), int(img["width"])
        insts = []
        for a in img.get("annotations", []):
            mask = None
            if "rle" in a:
                mask = rle_decode(a["rle"]["counts"], h, w)
            elif "polygon" in a:
                mask = polygon_mask(a["polygon"], h, w)
            if need_masks and mask is None:
                raise ValueError(f"image {iid}: annotation without polygon/rle in mask evaluation")
            box = tuple(float(v) for v in a["box"]) if "box" in a else (_mask_box(mask) if mask is not None else None)
            if box is None:
                raise ValueError(f"image {iid}: annotation needs a box, polygon or rle")
            insts.append(Instance(int(a["class_id"]), box, mask))
        out[iid] = insts
    return out


def load_predictions(pred_dir, need_masks: bool = False) -> Dict[str, List[Instance]]:
    out: Dict[str, List[Instance]] = {}
    for name in sorted(os.listdir(pred_dir)):
        d = os.path.join(pred_dir, name)
        det_path = os.path.join(d, "detections.json")
        if not os.path.isfile(det_path):
            continue
        with open(det_path, "r", encoding="utf-8") as f:
            dets = json.load(f)
        insts = []
        for r in dets:
            mask = None
            if need_masks:
                mask = pnm.read(os.path.join(d, r["mask"])) > 127
            insts.append(Instance(int(r["class_id"]), tuple(r["box_src"]), mask, float(r["score"])))
        out[name] = insts
    return out
