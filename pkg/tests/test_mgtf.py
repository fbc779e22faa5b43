import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tokenmrf import mgtf
from tokenmrf.train import init_params, load_params, save_params
from tokenmrf.types import GridGeometry, VocabSpec


def test_layout_by_hand():
    buf = mgtf.dumps({"ab": np.array([1, 2], dtype=np.uint16)})
    expected = (
        b"MGTF"
        + struct.pack("<II", 1, 1)
        + struct.pack("<I", 2)
        + b"ab"
        + struct.pack("<BI", 1, 1)
        + struct.pack("<I", 2)
        + b"\x01\x00\x02\x00"
    )
    assert buf == expected


def test_float_layout_little_endian():
    buf = mgtf.dumps({"x": np.array([[1.0]], dtype=np.float32)})
    assert buf.endswith(struct.pack("<f", 1.0))
    assert buf[-4 - 8 - 5 : -4 - 8] == struct.pack("<BI", 0, 2)


@settings(max_examples=50)
@given(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5), elements=st.floats(width=32)),
    hnp.arrays(np.uint16, hnp.array_shapes(min_dims=1, max_dims=2, max_side=6)),
)
def test_round_trip_bit_identical(floats, labels):
    tensors, meta = mgtf.loads(mgtf.dumps({"w": floats, "labels": labels}, {"k": [1, "é"]}))
    assert tensors["w"].dtype == np.float32 and tensors["labels"].dtype == np.uint16
    assert tensors["w"].tobytes() == floats.tobytes()
    assert np.array_equal(tensors["labels"], labels)
    assert meta == {"k": [1, "é"]}


def test_bad_magic():
    buf = bytearray(mgtf.dumps({"a": np.zeros(2, np.float32)}))
    buf[:4] = b"XXXX"
    with pytest.raises(mgtf.MGTFError, match="malformed file"):
        mgtf.loads(bytes(buf))


def test_version_mismatch():
    buf = bytearray(mgtf.dumps({}))
    buf[4:8] = struct.pack("<I", 99)
    with pytest.raises(mgtf.MGTFError, match="version mismatch"):
        mgtf.loads(bytes(buf))


def test_truncated():
    buf = mgtf.dumps({"a": np.zeros(8, np.float32)})
    with pytest.raises(mgtf.MGTFError, match="malformed"):
        mgtf.loads(buf[:-3])


def test_uint16_overflow_rejected():
    with pytest.raises(mgtf.MGTFError):
        mgtf.dumps({"a": np.array([70000])})


def test_mrf_params_file(tmp_path):
    p = init_params(GridGeometry(3, 2), VocabSpec(4), seed=1)
    # float32-representable weights survive exactly
    p = p.replace(p.w_spatial.astype(np.float32), p.w_label.astype(np.float32))
    path = tmp_path / "mrf.mgtf"
    save_params(path, p)
    q = load_params(path)
    assert q.geometry == p.geometry and q.vocab == p.vocab
    assert np.array_equal(q.w_spatial, p.w_spatial) and np.array_equal(q.w_label, p.w_label)
    tensors, _ = mgtf.read(path)
    assert set(tensors) == {"w_spatial", "w_label"}
