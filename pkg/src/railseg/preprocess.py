"""Letterbox pre-processing as an explicit affine map plus bilinear sampling.

Forward map (source -> network input): ``x' = s*x + tx``, ``y' = s*y + ty``.
Destination pixel (i, j) samples the source at the inverse image of its
centre, ``((j + 0.5 - tx)/s - 0.5, (i + 0.5 - ty)/s - 0.5)``. Pixels whose
centre maps inside the closed source rectangle are content (coordinates are
clamped to the last row/column before interpolating); the rest are padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import pnm
from .parallel import chunk_ranges, run_chunks
from .tensor import FP32, ShapeError, TensorF

PAD_VALUE = 114.0
_ROWS = 32  # destination rows per work chunk


@dataclass(frozen=True)
class AffineMap:
    scale: float
    tx: float
    ty: float
    src_size: Tuple[int, int]  # (W, H)
    dst_size: Tuple[int, int]  # (W, H)

    def forward(self, x: float, y: float) -> Tuple[float, float]:
        return x * self.scale + self.tx, y * self.scale + self.ty

    def inverse(self, x: float, y: float) -> Tuple[float, float]:
        return (x - self.tx) / self.scale, (y - self.ty) / self.scale

    @property
    def content_size(self) -> Tuple[float, float]:
        return self.scale * self.src_size[0], self.scale * self.src_size[1]

    def to_dict(self) -> dict:
        return {"scale": self.scale, "tx": self.tx, "ty": self.ty,
                "src_size": list(self.src_size), "dst_size": list(self.dst_size)}


@dataclass(frozen=True)
class SourceImage:
    width: int
    height: int
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.size != self.width * self.height * 3:
            raise ShapeError(f"pixel buffer has {px.size} bytes, {self.width}x{self.height}x3 needs "
                             f"{self.width * self.height * 3}")
        object.__setattr__(self, "pixels", px.reshape(self.height, self.width, 3))

    @classmethod
    def from_array(cls, arr) -> "SourceImage":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected HxWx3 image, got shape {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr)


def plan_letterbox(src, dst) -> AffineMap:
    """Aspect-preserving centred fit of ``src`` (W, H) into ``dst`` (W, H)."""
    sw, sh = (int(v) for v in src)
    dw, dh = (int(v) for v in dst)
    if min(sw, sh, dw, dh) < 1:
        raise ValueError(f"extents must be >= 1, got src {src} dst {dst}")
    s = min(dw / sw, dh / sh)
    return AffineMap(s, (dw - s * sw) / 2, (dh - s * sh) / 2, (sw, sh), (dw, dh))


def forward_point(m: AffineMap, p):
    return m.forward(*p)


def invert_point(m: AffineMap, p):
    return m.inverse(*p)


def _axis_taps(n_dst: int, n_src: int, scale: float, t: float):
    """Per destination index: low/high source index, weight, content flag."""
    u = (np.arange(n_dst, dtype=np.float64) + 0.5 - t) / scale
    inside = (u >= 0) & (u <= n_src)
    c = np.clip(u - 0.5, 0.0, n_src - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, c - lo, inside


def apply(src: SourceImage, m: AffineMap, pad_value: float = PAD_VALUE, workers=None) -> TensorF:
    """Letterboxed, /255-normalized 1 x 3 x H x W float32 tensor."""
    if (src.width, src.height) != tuple(m.src_size):
        raise ShapeError(f"image is {src.width}x{src.height}, map expects {m.src_size[0]}x{m.src_size[1]}")
    if not 0 <= pad_value <= 255:
        raise ValueError("pad_value must be in [0, 255]")
    dw, dh = m.dst_size
    x0, x1, fx, xin = _axis_taps(dw, src.width, m.scale, m.tx)
    y0, y1, fy, yin = _axis_taps(dh, src.height, m.scale, m.ty)
    px = src.pixels.astype(np.float64)
    out = np.empty((3, dh, dw), dtype=np.float32)
    pad = np.float32(pad_value) / np.float32(255.0)
    fxc = fx[None, :, None]
    gx = 1.0 - fxc

    def rows(r):
        lo, hi = r
        a = px[y0[lo:hi]]
        b = px[y1[lo:hi]]
        fyc = fy[lo:hi, None, None]
        top = gx * a[:, x0] + fxc * a[:, x1]
        bot = gx * b[:, x0] + fxc * b[:, x1]
        v = (1.0 - fyc) * top + fyc * bot
        v = (v / 255.0).astype(np.float32)
        v[~(yin[lo:hi, None] & xin[None, :])] = pad
        out[:, lo:hi] = v.transpose(2, 0, 1)

    run_chunks(rows, chunk_ranges(dh, _ROWS), workers)
    return TensorF.from_array(out[None], FP32)


def letterbox(src: SourceImage, dst, pad_value: float = PAD_VALUE, workers=None):
    """``(tensor, map)`` for fitting ``src`` into ``dst`` (W, H)."""
    m = plan_letterbox((src.width, src.height), dst)
    return apply(src, m, pad_value, workers), m


def read_image(path) -> SourceImage:
    """Binary PPM, or an RSEW file holding one H x W x 3 tensor of 0..255 values."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == b"RSEW":
        from .graph.io import load_weights

        ts = load_weights(path)
        if len(ts) != 1:
            raise ShapeError(f"raw image file must hold exactly one tensor, found {len(ts)}")
        arr = next(iter(ts.values())).numpy()
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"raw image tensor must be HxWx3, got {arr.shape}")
        return SourceImage.from_array(np.clip(np.rint(arr), 0, 255).astype(np.uint8))
    return SourceImage.from_array(pnm.read(path))
