import numpy as np
import pytest

from scpcap import checkpoint as C
from scpcap.layers import Linear


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(0)
    arrays = {"b": rng.normal(size=3), "a.w": rng.normal(size=(2, 4)), "s": np.array(1.5)}
    out = C.decode(C.encode(arrays))
    assert out.keys() == arrays.keys()
    for k in arrays:
        assert np.array_equal(out[k], arrays[k]) and out[k].shape == arrays[k].shape


def test_encoding_is_order_independent():
    x, y = np.ones(2), np.zeros(3)
    assert C.encode({"x": x, "y": y}) == C.encode({"y": y, "x": x})


def test_bad_magic_and_trailing_bytes():
    with pytest.raises(C.CheckpointError):
        C.decode(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(C.CheckpointError):
        C.decode(C.encode({"x": np.ones(2)}) + b"\0")


def test_module_roundtrip_and_shape_mismatch(tmp_path):
    rng = np.random.default_rng(1)
    src, dst = Linear(rng, 3, 2), Linear(rng, 3, 2)
    path = tmp_path / "m.ckpt"
    C.save_module(src, path)
    C.load_module(dst, path)
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(a.data, b.data)
    with pytest.raises(C.CheckpointError, match="shape"):
        C.load_module(Linear(rng, 4, 2), path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    C.atomic_write(tmp_path / "f.txt", "hello\n", mode="w")
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]
