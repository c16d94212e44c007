"""Dense tensors and the numeric kernels used by the reference executor.

Activations are N x C x H x W, conv weights O x I x Kh x Kw, all row-major.
Kernels take numpy arrays (or :class:`TensorF`, which is widened) and always
compute in float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import half
from .parallel import chunk_ranges, run_chunks

FP32 = "FP32"
FP16 = "FP16"
DTYPES = (FP32, FP16)


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent; names the dimension."""


@dataclass(frozen=True)
class TensorF:
    """Shape + dtype + flat row-major payload.

    FP16 payloads are stored as raw binary16 bit patterns (``uint16``) so
    they round-trip through storage bit-exactly.
    """

    shape: tuple
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if any(s < 1 for s in shape):
            raise ShapeError(f"all extents must be >= 1, got {shape}")
        want = np.uint16 if self.dtype == FP16 else np.float32
        data = np.ascontiguousarray(self.data, dtype=want).reshape(-1)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError(f"payload has {data.size} elements, shape {shape} needs {int(np.prod(shape))}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr, dtype: str = FP32) -> "TensorF":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if dtype == FP16:
            return cls(arr.shape, FP16, half.float32_to_half_bits(arr).reshape(-1))
        return cls(arr.shape, FP32, arr.reshape(-1))

    def numpy(self) -> np.ndarray:
        """Widened float32 view/copy in the logical shape."""
        if self.dtype == FP16:
            return half.half_bits_to_float32(self.data).reshape(self.shape)
        return self.data.reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def __len__(self):
        return self.data.size


def as_array(x) -> np.ndarray:
    if isinstance(x, TensorF):
        return x.numpy()
    return np.asarray(x, dtype=np.float32)


def _check_nchw(x: np.ndarray, what: str = "input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D NxCxHxW, got shape {x.shape}")


# rows of output per chunk; fixed so chunking never depends on worker count
_ROW_CHUNK = 16


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """2-D cross-correlation, direct-convolution semantics.

    Evaluated as im2col + matmul over fixed output-row chunks. ``x`` may also
    be a list of tensors read as consecutive channel ranges of one input
    (groups must be 1); their im2col columns are gathered straight from each
    part, so the result is bit-identical to convolving the concatenation.
    """
    parts = [as_array(p) for p in x] if isinstance(x, (list, tuple)) else [as_array(x)]
    w = as_array(weight)
    for p in parts:
        _check_nchw(p)
    if len(parts) > 1:
        if groups != 1:
            raise ShapeError(f"multi-part input needs groups=1, got groups={groups}")
        base = parts[0].shape
        for p in parts[1:]:
            if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
                raise ShapeError(f"input parts disagree outside the channel axis: {base} vs {p.shape}")
    if w.ndim != 4:
        raise ShapeError(f"weight must be 4-D OxIxKhxKw, got shape {w.shape}")
    n, _, h, wd = parts[0].shape
    c = sum(p.shape[1] for p in parts)
    o, i, kh, kw = w.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"input channels C={c} not divisible by groups={groups}")
    if i != c // groups:
        raise ShapeError(f"weight in-channels I={i} != C/groups={c // groups}")
    if o % groups:
        raise ShapeError(f"weight out-channels O={o} not divisible by groups={groups}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1:
        raise ShapeError(f"output height H={ho} < 1 (H_in={h}, Kh={kh}, pad={padding}, stride={stride})")
    if wo < 1:
        raise ShapeError(f"output width W={wo} < 1 (W_in={wd}, Kw={kw}, pad={padding}, stride={stride})")
    if bias is not None:
        bias = as_array(bias).reshape(-1)
        if bias.size != o:
            raise ShapeError(f"bias length {bias.size} != out-channels O={o}")

    wins = []
    for p in parts:
        if padding:
            p = np.pad(p, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        # (n, c, ho', wo', kh, kw) windows
        win = np.lib.stride_tricks.sliding_window_view(p, (kh, kw), axis=(2, 3))
        wins.append(win[:, :, ::stride, ::stride][:, :, :ho, :wo])
    og = o // groups
    wg = w.reshape(groups, og, i * kh * kw)
    out = np.empty((n, o, ho, wo), dtype=np.float32)

    def gather(b, lo, hi, c0, c1):
        # (i, r, wo, kh, kw) -> (r, wo, i*kh*kw)
        return wins[0][b, c0:c1, lo:hi].transpose(1, 2, 0, 3, 4).reshape((hi - lo) * wo, (c1 - c0) * kh * kw)

    def work(rows):
        lo, hi = rows
        for b in range(n):
            for g in range(groups):
                if len(wins) == 1:
                    cols = gather(b, lo, hi, g * i, (g + 1) * i)
                else:
                    cols = np.concatenate([v[b, :, lo:hi].transpose(1, 2, 0, 3, 4).reshape((hi - lo) * wo, -1)
                                           for v in wins], axis=1)
                res = cols @ wg[g].T
                out[b, g * og:(g + 1) * og, lo:hi] = res.T.reshape(og, hi - lo, wo)

    run_chunks(work, chunk_ranges(ho, _ROW_CHUNK))
    if bias is not None:
        out += bias.reshape(1, o, 1, 1)
    return out


def conv_transpose2d(x, weight, bias=None, stride: int = 2) -> np.ndarray:
    """Transposed convolution for the non-overlapping case (kernel == stride).

    ``weight`` is I x O x K x K as in the usual deconvolution layout.
    """
    x = as_array(x)
    w = as_array(weight)
    _check_nchw(x)
    n, c, h, wd = x.shape
    i, o, kh, kw = w.shape
    if i != c:
        raise ShapeError(f"weight in-channels I={i} != C={c}")
    if kh != stride or kw != stride:
        raise ShapeError(f"only kernel == stride supported, got kernel {kh}x{kw}, stride {stride}")
    # out[n, o, y*s+a, x*s+b] = sum_c x[n,c,y,x] * w[c,o,a,b]
    t = np.einsum("nchw,coab->nohawb", x, w, optimize=True)
    out = np.ascontiguousarray(t.reshape(n, o, h * kh, wd * kw), dtype=np.float32)
    if bias is not None:
        out += as_array(bias).reshape(1, o, 1, 1)
    return out


def batch_norm(x, gamma, beta, mean, var, eps: float = 1e-3) -> np.ndarray:
    x = as_array(x)
    _check_nchw(x)
    c = x.shape[1]
    vecs = {"gamma": gamma, "beta": beta, "mean": mean, "var": var}
    vecs = {k: as_array(v).reshape(-1) for k, v in vecs.items()}
    for k, v in vecs.items():
        if v.size != c:
            raise ShapeError(f"batch_norm {k} length {v.size} != C={c}")
    if np.any(vecs["var"] < 0):
        raise ValueError("batch_norm variance must be non-negative")
    denom = np.sqrt(vecs["var"].astype(np.float64) + eps)
    if np.any(denom == 0):
        raise ValueError("batch_norm var + eps must be > 0")
    scale = (vecs["gamma"] / denom).astype(np.float32).reshape(1, c, 1, 1)
    shift = vecs["mean"].reshape(1, c, 1, 1)
    return ((x - shift) * scale + vecs["beta"].reshape(1, c, 1, 1)).astype(np.float32)


def sigmoid(x) -> np.ndarray:
    x = as_array(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x) -> np.ndarray:
    x = as_array(x)
    return x * sigmoid(x)


def tanh(x) -> np.ndarray:
    return np.tanh(as_array(x))


def maxpool(x, k: int, stride: int = 1, padding: int | None = None) -> np.ndarray:
    """Max pooling; default padding k//2 (same-size output for stride 1)."""
    x = as_array(x)
    _check_nchw(x)
    p = k // 2 if padding is None else padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def upsample_nearest(x, factor: int = 2) -> np.ndarray:
    x = as_array(x)
    _check_nchw(x)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(parts: Sequence, axis: int = 1) -> np.ndarray:
    arrs = [as_array(p) for p in parts]
    if not arrs:
        raise ShapeError("concat needs at least one part")
    ax = _axis(axis, arrs[0].ndim)
    ref = arrs[0].shape
    for j, a in enumerate(arrs[1:], 1):
        if a.ndim != len(ref):
            raise ShapeError(f"concat part {j} has rank {a.ndim}, expected {len(ref)}")
        for d, (u, v) in enumerate(zip(ref, a.shape)):
            if d != ax and u != v:
                raise ShapeError(f"concat part {j} dim {d} is {v}, expected {u}")
    return np.concatenate(arrs, axis=ax)


def split(x, sizes: Sequence[int], axis: int = 1) -> list:
    x = as_array(x)
    ax = _axis(axis, x.ndim)
    if sum(sizes) != x.shape[ax] or any(s < 1 for s in sizes):
        raise ShapeError(f"split sizes {list(sizes)} do not partition dim {ax} of extent {x.shape[ax]}")
    return np.split(x, np.cumsum(sizes)[:-1], axis=ax)


def matmul(a, b) -> np.ndarray:
    a, b = as_array(a), as_array(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return a @ b
