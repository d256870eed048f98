"""Flat binary container for named float32 tensors.

Layout: the magic header b"DSPM1\\n", then per entry a little-endian u32
name length, the UTF-8 name, a u32 rank, one u32 per extent, and the raw
little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ParseError

MAGIC = b"DSPM1\n"


def save(path, tensors):
    """Write name -> array mappings atomically (temp file + rename)."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            for name, arr in tensors.items():
                data = np.asarray(arr, dtype="<f4")
                enc = name.encode("utf-8")
                f.write(struct.pack("<I", len(enc)))
                f.write(enc)
                f.write(struct.pack("<I", data.ndim))
                f.write(struct.pack(f"<{data.ndim}I", *data.shape))
                f.write(data.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    """Read a container back into an ordered name -> float32 array dict."""
    tensors = {}
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError(f"bad checkpoint magic {magic!r}", path=path, offset=0)
        while True:
            off = f.tell()
            raw = f.read(4)
            if not raw:
                break
            if len(raw) < 4:
                raise ParseError("truncated name length", path=path, offset=off)
            (nlen,) = struct.unpack("<I", raw)
            name = f.read(nlen)
            if len(name) < nlen:
                raise ParseError("truncated name", path=path, offset=off)
            raw = f.read(4)
            if len(raw) < 4:
                raise ParseError("truncated rank", path=path, offset=off)
            (rank,) = struct.unpack("<I", raw)
            raw = f.read(4 * rank)
            if len(raw) < 4 * rank:
                raise ParseError("truncated extents", path=path, offset=off)
            shape = struct.unpack(f"<{rank}I", raw) if rank else ()
            count = int(np.prod(shape)) if rank else 1
            payload = f.read(4 * count)
            if len(payload) < 4 * count:
                raise ParseError("truncated payload", path=path, offset=off)
            tensors[name.decode("utf-8")] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return tensors
