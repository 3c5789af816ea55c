import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from msca import checkpoint
from msca.checkpoint import CheckpointError


def handmade(name, code, arr):
    """Independent byte assembly of a one-record file."""
    raw = name.encode()
    return (b"MSCA1" + struct.pack("<I", len(raw)) + raw + code + struct.pack("<I", arr.ndim)
            + b"".join(struct.pack("<Q", n) for n in arr.shape) + arr.tobytes())


class TestFormat:
    def test_bytes_match_hand_assembly(self):
        arr = np.arange(6, dtype="<f8").reshape(2, 3) / 7
        assert checkpoint.dumps({"w": arr}) == handmade("w", b"d", arr)
        f = np.array([1.5, -2.0], dtype="<f4")
        assert checkpoint.dumps({"bias": f}) == handmade("bias", b"f", f)

    def test_hand_assembled_file_loads(self):
        arr = np.linspace(-1, 1, 12, dtype="<f4").reshape(3, 4)
        out = checkpoint.loads(handmade("layer.0.w", b"f", arr))
        np.testing.assert_array_equal(out["layer.0.w"], arr)
        assert out["layer.0.w"].dtype == np.float32

    def test_scalar_empty_and_unicode(self):
        blob = {"s": np.float64(3.25), "e": np.zeros((0, 4)), "ü.ß": np.ones(2)}
        out = checkpoint.loads(checkpoint.dumps(blob))
        assert out["s"].shape == () and out["s"] == 3.25
        assert out["e"].shape == (0, 4)
        assert list(out) == ["s", "e", "ü.ß"]

    def test_non_finite_payload_is_bitwise(self):
        arr = np.array([np.nan, np.inf, -np.inf, -0.0, 5e-324])
        back = checkpoint.loads(checkpoint.dumps({"x": arr}))["x"]
        assert back.tobytes() == arr.tobytes()

    def test_dtype_argument_casts(self):
        back = checkpoint.loads(checkpoint.dumps({"x": np.ones(3)}, dtype=np.float32))["x"]
        assert back.dtype == np.float32


class TestErrors:
    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.loads(b"NOPE1")

    def test_truncated_data(self):
        blob = checkpoint.dumps({"w": np.ones((4, 4))})
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.loads(blob[:-3])

    def test_truncated_header(self):
        blob = checkpoint.dumps({"w": np.ones(2)})
        with pytest.raises(CheckpointError):
            checkpoint.loads(blob[:8])

    def test_unknown_element_type(self):
        with pytest.raises(CheckpointError, match="element type"):
            checkpoint.loads(handmade("w", b"q", np.ones(1)))


def test_save_is_atomic_and_round_trips(tmp_path):
    path = tmp_path / "c.bin"
    checkpoint.save(path, {"a": np.arange(3.0)})
    checkpoint.save(path, {"b": np.arange(2.0)})
    assert list(checkpoint.load(path)) == ["b"]
    assert not list(tmp_path.glob("*.tmp"))


floats = st.sampled_from([np.float32, np.float64])


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       floats.flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=4,
                                                                                   max_side=5))),
                       max_size=5))
def test_round_trip_is_bit_exact(tensors):
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()
