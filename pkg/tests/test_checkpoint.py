import numpy as np
import pytest

from dspm import checkpoint
from dspm.errors import ParseError


def test_round_trip(tmp_path):
    path = tmp_path / "w.ckpt"
    rng = np.random.default_rng(0)
    tensors = {
        "backbone.stem.weight": rng.standard_normal((8, 3, 3, 3)).astype(np.float32),
        "backbone.stem.bias": rng.standard_normal(8).astype(np.float32),
        "scalar": np.float32(3.25),
    }
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], np.asarray(tensors[k], dtype=np.float32))


def test_header_layout(tmp_path):
    path = tmp_path / "w.ckpt"
    checkpoint.save(path, {"a": np.array([1.0, 2.0], dtype=np.float32)})
    raw = path.read_bytes()
    assert raw.startswith(b"DSPM1\n")
    # u32 name length, name, u32 rank, u32 extent, 2 f32s
    assert raw[6:10] == (1).to_bytes(4, "little")
    assert raw[10:11] == b"a"
    assert raw[11:15] == (1).to_bytes(4, "little")
    assert raw[15:19] == (2).to_bytes(4, "little")
    assert len(raw) == 19 + 8


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE!\n")
    with pytest.raises(ParseError):
        checkpoint.load(path)


def test_truncated_payload_reports_offset(tmp_path):
    path = tmp_path / "w.ckpt"
    checkpoint.save(path, {"a": np.zeros(4, dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(ParseError) as exc:
        checkpoint.load(path)
    assert "offset" in str(exc.value)
