"""IEEE 754 binary16 conversion on raw bit patterns.

Narrowing is round-to-nearest-even, overflow goes to infinity, subnormals are
kept, NaN payloads are quieted. Everything works on whole numpy arrays with
integer arithmetic only, so results never depend on the platform's float16
support.
"""
from __future__ import annotations

import numpy as np

MAX_FINITE = 65504.0


def float32_to_half_bits(x) -> np.ndarray:
    """Narrow float32 values to binary16 bit patterns (``uint16``)."""
    x = np.asarray(x, dtype=np.float32)
    shape = x.shape
    b = np.ascontiguousarray(x).reshape(-1).view(np.uint32).astype(np.int64)
    sign = (b >> 16) & 0x8000
    exp = (b >> 23) & 0xFF
    mant = b & 0x7FFFFF

    out = np.zeros_like(b)

    # exponent re-biased to binary16; <= 0 means subnormal (or zero) result
    e = exp - 127 + 15

    normal = (exp != 255) & (e >= 1)
    if normal.any():
        en = np.minimum(e[normal], 31)
        mn = mant[normal]
        h = (en << 10) | (mn >> 13)
        rem = mn & 0x1FFF
        up = (rem > 0x1000) | ((rem == 0x1000) & ((h & 1) == 1))
        h = h + up
        # anything that reached exponent 31 is infinity, mantissa cleared
        h = np.where(h >= 0x7C00, 0x7C00, h)
        out[normal] = h

    sub = (exp != 255) & (e < 1)
    if sub.any():
        # full significand incl. implicit bit; float32 subnormals have none
        m = np.where(exp[sub] == 0, mant[sub], mant[sub] | 0x800000)
        shift = np.minimum(14 - e[sub], 40)
        q = m >> shift
        rem = m & ((np.int64(1) << shift) - 1)
        halfway = np.int64(1) << (shift - 1)
        up = (rem > halfway) | ((rem == halfway) & ((q & 1) == 1))
        out[sub] = q + up

    special = exp == 255
    if special.any():
        ms = mant[special]
        out[special] = np.where(ms == 0, 0x7C00, 0x7E00 | (ms >> 13))

    return (out | sign).astype(np.uint16).reshape(shape)


def half_bits_to_float32(h) -> np.ndarray:
    """Widen binary16 bit patterns to float32 (exact)."""
    h = np.asarray(h, dtype=np.uint16)
    shape = h.shape
    h = h.reshape(-1).astype(np.uint32)
    sign = (h & 0x8000) << 16
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF

    bits = np.where(
        exp == 31,
        0x7F800000 | (mant << 13),
        ((exp + 112) << 23) | (mant << 13),
    ).astype(np.uint32)
    out = (bits | sign).view(np.float32)

    sub = exp == 0
    if sub.any():
        # mant * 2**-24 is exact in float32
        vals = np.ldexp(mant[sub].astype(np.float32), -24).astype(np.float32)
        out = out.copy()
        out[sub] = np.where(sign[sub] != 0, -vals, vals)
    return out.reshape(shape)


def round_trip(x) -> np.ndarray:
    """float32 -> binary16 -> float32."""
    return half_bits_to_float32(float32_to_half_bits(x))
