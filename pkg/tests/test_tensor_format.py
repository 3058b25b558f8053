import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from posediff.errors import BadMagic, NonFinite, ShapeMismatch
from posediff.tensor_format import decode_blob, encode_blob, read_blob, write_blob


def test_zero_blob_round_trip_bytes(tmp_path):
    arr = np.zeros((2, 8, 8), np.float32)
    write_blob(tmp_path / "a.pdtb", arr)
    back = read_blob(tmp_path / "a.pdtb")
    assert back.shape == (2, 8, 8)
    assert back.tobytes() == arr.tobytes()
    write_blob(tmp_path / "b.pdtb", back)
    assert (tmp_path / "a.pdtb").read_bytes() == (tmp_path / "b.pdtb").read_bytes()


def test_header_layout():
    buf = encode_blob(np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert buf[:4] == b"PDTB"
    assert struct.unpack_from("<IBB", buf, 4) == (1, 1, 2)
    assert struct.unpack_from("<2I", buf, 10) == (2, 3)
    assert buf[18:] == bytes(range(6))


def test_bad_magic(tmp_path):
    buf = b"XXXX" + encode_blob(np.zeros(3, np.float32))[4:]
    with pytest.raises(BadMagic):
        decode_blob(buf)


def test_payload_shorter_than_header_shape():
    header = b"PDTB" + struct.pack("<IBB", 1, 0, 3) + struct.pack("<3I", 2, 8, 8)
    corrupt = header + np.zeros(100, np.float32).tobytes()
    with pytest.raises(ShapeMismatch):
        decode_blob(corrupt)


def test_nan_rejected_on_write_and_read():
    with pytest.raises(NonFinite):
        encode_blob(np.array([1.0, np.nan], np.float32))
    raw = b"PDTB" + struct.pack("<IBBI", 1, 0, 1, 1) + np.array([np.inf], np.float32).tobytes()
    with pytest.raises(NonFinite):
        decode_blob(raw)


def test_rank_limits():
    with pytest.raises(ShapeMismatch):
        encode_blob(np.zeros((1, 1, 1, 1, 1), np.float32))
    with pytest.raises(ShapeMismatch):
        encode_blob(np.float32(1.0).reshape(()))


shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=6)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, shapes, elements=st.floats(-1e6, 1e6, width=32)))
def test_float_round_trip(arr):
    back = decode_blob(encode_blob(arr))
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, shapes))
def test_uint8_round_trip(arr):
    np.testing.assert_array_equal(decode_blob(encode_blob(arr)), arr)
