"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only."""
from __future__ import annotations

import numpy as np


class PNMError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """First ``count`` header tokens and the offset just past the last one."""
    toks = []
    i = 0
    n = len(buf)
    while len(toks) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise PNMError("truncated header")
        toks.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates header from raster
    return toks, i + 1


def decode(buf: bytes) -> np.ndarray:
    """Decode P6 to ``(H, W, 3)`` or P5 to ``(H, W)`` uint8."""
    toks, off = _tokens(buf, 4)
    magic = toks[0]
    if magic not in (b"P6", b"P5"):
        raise PNMError(f"unsupported magic {magic!r}, want P6 or P5")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PNMError("non-integer header field") from None
    if w < 1 or h < 1:
        raise PNMError(f"bad size {w}x{h}")
    if maxval != 255:
        raise PNMError(f"only maxval 255 supported, got {maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    data = np.frombuffer(buf, dtype=np.uint8, count=-1, offset=off) if off <= len(buf) else np.empty(0, np.uint8)
    if data.size < need:
        raise PNMError(f"raster has {data.size} bytes, need {need}")
    data = data[:need]
    return data.reshape(h, w, 3) if ch == 3 else data.reshape(h, w)


def encode(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise PNMError(f"expected HxWx3 or HxW array, got {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + img.tobytes()


def read(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())


def write(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode(img))
