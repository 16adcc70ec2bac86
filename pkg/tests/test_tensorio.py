from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relaxconv.errors import DataError
from relaxconv.tensorio import from_bytes, read_tensor, to_bytes, write_tensor

DATA = Path(__file__).parent / "data"


def reference_tensor():
    return np.arange(6, dtype="<f4").reshape(2, 3) / 4


def test_reference_hex_dump():
    expected = bytes.fromhex("".join(DATA.joinpath("reference_2x3_f32.hex").read_text().split()))
    assert to_bytes(reference_tensor()) == expected
    np.testing.assert_array_equal(from_bytes(expected), reference_tensor())


def test_header_layout():
    buf = to_bytes(np.zeros((4, 5), dtype=np.float64))
    assert buf[:4] == b"AEQV"
    assert buf[4:6] == b"\x01\x00" and buf[6:8] == b"\x02\x00"
    assert int.from_bytes(buf[8:16], "little") == 4 and int.from_bytes(buf[16:24], "little") == 5
    assert buf[24] == 8 and len(buf) == 25 + 20 * 8


@settings(max_examples=50, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]),
              st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple)))
def test_roundtrip_bit_exact(t):
    back = from_bytes(to_bytes(t))
    assert back.dtype == t.dtype and back.shape == t.shape
    assert back.tobytes() == np.ascontiguousarray(t).tobytes()


def test_file_roundtrip(tmp_path):
    t = np.random.default_rng(0).standard_normal((3, 2, 4))
    write_tensor(tmp_path / "t.aeqv", t)
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.aeqv"), t)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x02\x00" + b[6:],
    lambda b: b[:-1],
    lambda b: b[:24] + b"\x03" + b[25:],
])
def test_corrupt_headers(mutate):
    with pytest.raises(DataError):
        from_bytes(mutate(to_bytes(np.ones((2, 2)))))
