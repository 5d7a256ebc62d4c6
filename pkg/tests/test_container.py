import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from facereg.container import ContainerError, load, save


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                  elements=st.floats(-1e30, 1e30, allow_nan=False)),
       hnp.arrays(np.int64, hnp.array_shapes(max_dims=2, max_side=6)),
       st.dictionaries(st.text(max_size=5), st.integers(), max_size=3))
def test_round_trip_is_bit_exact(a, b, meta):
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        p = f"{d}/x.frgc"
        save(p, {"a": a, "b": b, "c": a.astype(np.float32)}, meta)
        arrays, back = load(p)
    assert arrays["a"].tobytes() == a.tobytes() and arrays["a"].shape == a.shape
    assert np.array_equal(arrays["b"], b)
    assert arrays["c"].dtype == np.float32
    assert back == meta


def test_bool_and_small_ints_widen(tmp_path):
    save(tmp_path / "x", {"m": np.array([True, False]), "i": np.array([1, 2], np.int32)})
    arrays, _ = load(tmp_path / "x")
    assert arrays["m"].dtype == np.int64 and arrays["m"].tolist() == [1, 0]


def test_unsupported_dtype(tmp_path):
    with pytest.raises(ContainerError):
        save(tmp_path / "x", {"z": np.array([1j])})


def test_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContainerError, match="magic"):
        load(p)


def test_bad_version(tmp_path):
    p = tmp_path / "x"
    save(p, {"a": np.zeros(3)})
    data = bytearray(p.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(data))
    with pytest.raises(ContainerError, match="version 99"):
        load(p)


def test_truncated(tmp_path):
    p = tmp_path / "x"
    save(p, {"a": np.zeros(3), "b": np.ones(100)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ContainerError, match="'b'"):
        load(p)
