"""End-to-end image -> instance masks, and the files ``run`` writes."""
from __future__ import annotations

import os
from typing import List

from . import pnm
from .bench import Stages
from .postprocess import (CONF_THRESHOLD, IOU_THRESHOLD, InstanceMask, assemble_masks, decode, detections_json,
                          mask_pgm, nms, overlay)
from .preprocess import PAD_VALUE, SourceImage, apply, plan_letterbox
from .quant import Plan

MAX_DET = 300


class Pipeline(Stages):
    def __init__(self, plan: Plan, conf: float = CONF_THRESHOLD, iou: float = IOU_THRESHOLD,
                 pad_value: float = PAD_VALUE, max_det: int = MAX_DET):
        self.plan = plan
        self.conf = conf
        self.iou = iou
        self.pad_value = pad_value
        self.max_det = max_det
        self.model_bytes = plan.nbytes
        _, h, w = plan.input_shape
        self.dst = (w, h)

    def pre(self, image: SourceImage):
        m = plan_letterbox((image.width, image.height), self.dst)
        return apply(image, m, self.pad_value), m

    def infer(self, x):
        t, m = x
        return self.plan.execute(t), m

    def post(self, raw, image=None) -> List[InstanceMask]:
        out, m = raw
        dets = nms(decode(out, self.conf), self.iou)[: self.max_det]
        return assemble_masks(dets, out.proto, m)

    def __call__(self, image: SourceImage) -> List[InstanceMask]:
        return self.post(self.infer(self.pre(image)), image)


def write_outputs(out_dir, image: SourceImage, masks: List[InstanceMask]) -> List[str]:
    """detections.json, mask_NNN.pgm per instance, overlay.ppm; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    names = [f"mask_{j:03d}.pgm" for j in range(len(masks))]
    paths = []
    for name, im in zip(names, masks):
        p = os.path.join(out_dir, name)
        with open(p, "wb") as f:
            f.write(mask_pgm(im))
        paths.append(p)
    p = os.path.join(out_dir, "detections.json")
    with open(p, "w", encoding="utf-8") as f:
        f.write(detections_json(masks, names))
    paths.append(p)
    p = os.path.join(out_dir, "overlay.ppm")
    pnm.write(p, overlay(image.pixels, masks))
    paths.append(p)
    return paths
