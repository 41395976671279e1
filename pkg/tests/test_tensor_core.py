import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformconv import tensor_core as tc


def test_zeros():
    assert tc.zeros((1, 1, 2, 2)).tolist() == [[[[0.0, 0.0], [0.0, 0.0]]]]
    empty = tc.zeros((0, 3, 4, 4))
    assert empty.size == 0 and empty.shape == (0, 3, 4, 4)
    assert tc.zeros((2, 1, 1, 1)).ravel().tolist() == [0.0, 0.0]
    assert tc.zeros((1, 1, 1, 1)).dtype == np.float64


def test_zeros_rejects_bad_dims():
    with pytest.raises(ValueError):
        tc.zeros((1, -1, 2, 2))
    with pytest.raises(ValueError):
        tc.zeros((1, 2, 2))
    with pytest.raises(OverflowError):
        tc.zeros((2**31, 2**31, 2**31, 2))


def test_fill_random_deterministic():
    a = tc.fill_random((2, 3, 4, 5), seed=7, lo=-1, hi=1)
    b = tc.fill_random((2, 3, 4, 5), seed=7, lo=-1, hi=1)
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() < 1


def test_fill_random_degenerate_interval():
    assert np.all(tc.fill_random((1, 2, 3, 4), seed=0, lo=0.5, hi=0.5) == 0.5)


def test_fill_random_seeds_differ():
    a = tc.fill_random((1, 1, 2, 4), seed=1)
    b = tc.fill_random((1, 1, 2, 4), seed=2)
    assert np.any(a != b)


def test_fill_random_rejects_inverted_interval():
    with pytest.raises(ValueError):
        tc.fill_random((1, 1, 1, 1), seed=0, lo=1.0, hi=0.0)


def test_row_major_indexing_law():
    n, c, h, w = 2, 3, 4, 5
    t = np.arange(n * c * h * w, dtype=np.float64).reshape(n, c, h, w)
    back = tc.read_tensor(tc.write_tensor(t))
    for idx in [(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 2, 3), (1, 0, 3, 1)]:
        b, ch, y, x = idx
        assert back[idx] == ((b * c + ch) * h + y) * w + x


def test_header_layout():
    data = tc.write_tensor(tc.zeros((1, 1, 1, 1)))
    assert tc.HEADER_SIZE == 28
    assert len(data) == tc.HEADER_SIZE + 8
    assert data[:4] == b"DTEN"
    assert data[4] == 1 and data[5] == 1
    assert data[6:8] == b"\x00\x00"
    assert int.from_bytes(data[8:12], "little") == 4


def test_f32_interchange():
    t = np.array([0.5, -2.0, 3.25, 1e3]).reshape(1, 1, 2, 2)
    data = tc.write_tensor(t, dtype=tc.DTYPE_F32)
    assert len(data) == tc.HEADER_SIZE + 16
    assert np.array_equal(tc.read_tensor(data), t)


def test_truncated_payload():
    data = tc.write_tensor(tc.fill_random((1, 2, 3, 3), seed=0))
    with pytest.raises(tc.TensorFormatError, match="length mismatch"):
        tc.read_tensor(data[:-1])


@pytest.mark.parametrize(
    "patch, message",
    [((0, b"XTEN"), "magic"), ((4, b"\x02"), "version"), ((5, b"\x07"), "dtype")],
)
def test_bad_headers(patch, message):
    data = bytearray(tc.write_tensor(tc.zeros((1, 1, 1, 1))))
    offset, value = patch
    data[offset : offset + len(value)] = value
    with pytest.raises(tc.TensorFormatError, match=message):
        tc.read_tensor(bytes(data))


def test_short_header():
    with pytest.raises(tc.TensorFormatError):
        tc.read_tensor(b"DTEN")


def test_save_load(tmp_path):
    t = tc.fill_random((2, 1, 3, 2), seed=3)
    tc.save_tensor(tmp_path / "t.dten", t)
    assert np.array_equal(tc.load_tensor(tmp_path / "t.dten"), t)


dims = st.tuples(*[st.integers(0, 4)] * 4)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=150, deadline=None)
@given(dims=dims, data=st.data())
def test_round_trip_bit_exact(dims, data):
    size = int(np.prod(dims))
    vals = data.draw(st.lists(finite, min_size=size, max_size=size))
    t = np.array(vals, dtype=np.float64).reshape(dims)
    back = tc.read_tensor(tc.write_tensor(t))
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()
