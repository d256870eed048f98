import struct

import numpy as np
import pytest

from dspm import pfm
from dspm.errors import ParseError


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    depth = rng.uniform(0.5, 9.0, size=(13, 17)).astype(np.float32)
    p = tmp_path / "d.pfm"
    pfm.write_pfm(p, depth)
    back = pfm.read_pfm(p)
    assert np.array_equal(back, depth)


def test_color_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((6, 8, 3)).astype(np.float32)
    p = tmp_path / "c.pfm"
    pfm.write_pfm(p, img)
    assert np.array_equal(pfm.read_pfm(p), img)


def test_header_scale_written_negative(tmp_path):
    p = tmp_path / "d.pfm"
    pfm.write_pfm(p, np.zeros((2, 3), dtype=np.float32))
    head = p.read_bytes()[:20]
    assert head.startswith(b"Pf\n3 2\n-1\n")


def test_big_endian_accepted_and_swapped(tmp_path):
    vals = np.array([[1.5, -2.0], [3.25, 0.125]], dtype=np.float32)
    p = tmp_path / "be.pfm"
    with open(p, "wb") as f:
        f.write(b"Pf\n2 2\n1.0\n")
        f.write(vals[::-1].astype(">f4").tobytes())
    back = pfm.read_pfm(p)
    assert np.array_equal(back, vals)


def test_bottom_to_top_row_order(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    p = tmp_path / "r.pfm"
    pfm.write_pfm(p, data)
    raw = p.read_bytes()
    payload = raw[len(b"Pf\n2 2\n-1\n"):]
    first_row = struct.unpack("<2f", payload[:8])
    assert first_row == (3.0, 4.0)  # bottom row first


def test_truncated_rejected_with_offset(tmp_path):
    p = tmp_path / "t.pfm"
    pfm.write_pfm(p, np.zeros((4, 4), dtype=np.float32))
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(ParseError) as exc:
        pfm.read_pfm(p)
    assert "offset" in str(exc.value)


def test_bad_magic(tmp_path):
    p = tmp_path / "m.pfm"
    p.write_bytes(b"P5\n2 2\n-1\n" + b"\x00" * 16)
    with pytest.raises(ParseError):
        pfm.read_pfm(p)
