import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from caseforge import archive

dtypes = st.sampled_from([np.float32, np.float64, np.int64, np.uint8, np.int32, np.bool_])


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       dtypes.flatmap(lambda d: hnp.arrays(d, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0))),
                       max_size=5))
def test_round_trip(records):
    back = archive.loads(archive.dumps(records))
    assert list(back) == list(records)
    for k, v in records.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_layout_is_little_endian_and_documented():
    blob = archive.dumps({"w": np.array([1, 2], dtype=">i4")})
    assert blob[:4] == b"CFAR"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert blob.endswith(struct.pack("<2i", 1, 2))


def test_non_contiguous_and_scalar():
    a = np.arange(12.0).reshape(3, 4).T
    back = archive.loads(archive.dumps({"a": a, "s": np.float32(2.5).reshape(())}))
    np.testing.assert_array_equal(back["a"], a)
    assert back["s"].shape == ()


def test_rejects_corrupt_input(tmp_path):
    with pytest.raises(ValueError, match="magic"):
        archive.loads(b"NOPE" + bytes(8))
    blob = archive.dumps({"x": np.zeros(10)})
    with pytest.raises(ValueError, match="truncated"):
        archive.loads(blob[:-3])
    archive.save(tmp_path / "a.bin", {"x": np.ones(3)})
    np.testing.assert_array_equal(archive.load(tmp_path / "a.bin")["x"], np.ones(3))
