import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from model_export.refpack import read_array, write_array


def test_roundtrip_3d(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7.0
    path = tmp_path / "a.bin"
    write_array(path, arr)
    back = read_array(path)
    assert back.dtype == np.float32
    assert back.shape == (2, 3, 4)
    np.testing.assert_array_equal(back, arr)


def test_header_byte_layout(tmp_path):
    path = tmp_path / "vec.bin"
    write_array(path, np.array([1.0, 2.0, 3.0], dtype=np.float32))
    raw = path.read_bytes()
    assert raw[:4] == struct.pack("<I", 1)
    assert raw[4:12] == struct.pack("<Q", 3)
    assert raw[12:] == np.array([1.0, 2.0, 3.0], dtype="<f4").tobytes()
    assert len(raw) == 4 + 8 + 12


def test_scalar_roundtrip(tmp_path):
    path = tmp_path / "s.bin"
    write_array(path, np.float32(2.5))
    back = read_array(path)
    assert back.shape == ()
    assert back == np.float32(2.5)


def test_float64_input_is_quantized(tmp_path):
    path = tmp_path / "q.bin"
    write_array(path, np.array([1.0 / 3.0], dtype=np.float64))
    back = read_array(path)
    assert back.dtype == np.float32
    assert back[0] == np.float32(1.0 / 3.0)


@settings(max_examples=50, deadline=None)
@given(
    shape=st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_roundtrip_property(tmp_path_factory, shape, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    arr = rng.standard_normal(shape).astype(np.float32)
    path = tmp_path_factory.mktemp("rp") / "arr.bin"
    write_array(path, arr)
    back = read_array(path)
    assert back.shape == tuple(shape)
    np.testing.assert_array_equal(back, arr)


def test_truncated_rank_rejected(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(b"\x01\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_array(path)


def test_truncated_shape_rejected(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(struct.pack("<I", 2) + struct.pack("<Q", 3))
    with pytest.raises(ValueError, match="truncated"):
        read_array(path)


def test_payload_size_mismatch_rejected(tmp_path):
    path = tmp_path / "t.bin"
    write_array(path, np.zeros(4, dtype=np.float32))
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="expected"):
        read_array(path)


def test_implausible_rank_rejected(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(struct.pack("<I", 4096) + b"\x00" * 64)
    with pytest.raises(ValueError, match="rank"):
        read_array(path)
