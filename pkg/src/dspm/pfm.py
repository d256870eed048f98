"""Portable float map reader/writer.

Header is "Pf\\n<width> <height>\\n<scale>\\n" for one channel ("PF" for
three), rows stored bottom-to-top; a negative scale marks little-endian
payloads, positive marks big-endian.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError


def write_pfm(path, data, scale=-1.0):
    """Write a [H,W] or [H,W,3] float32 map; default header scale -1.0
    (little-endian)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"pfm stores [H,W] or [H,W,3] maps, got {data.shape}")
    if scale >= 0:
        raise ValueError("writer emits little-endian maps; scale must be negative")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{scale:g}\n".encode("ascii"))
        f.write(data[::-1].astype("<f4").tobytes())


def read_pfm(path):
    """Read a float map to float32, byte-swapping big-endian payloads."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if raw[:3] == b"Pf\n":
            channels = 1
        elif raw[:3] == b"PF\n":
            channels = 3
        else:
            raise ParseError(f"bad magic {raw[:3]!r}", path=path, offset=0)
        i1 = raw.index(b"\n", 3)
        w, h = (int(v) for v in raw[3:i1].split())
        i2 = raw.index(b"\n", i1 + 1)
        scale = float(raw[i1 + 1:i2])
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed header: {exc}", path=path, offset=0) from exc
    if scale == 0:
        raise ParseError("scale must be nonzero", path=path, offset=i1 + 1)
    dtype = "<f4" if scale < 0 else ">f4"
    start = i2 + 1
    count = w * h * channels
    if len(raw) - start < 4 * count:
        raise ParseError("truncated payload", path=path, offset=start)
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return flat.astype(np.float32).reshape(shape)[::-1].copy()
