import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ego import io as eio


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_tensor_roundtrip_bit_exact(arr):
    back = eio.decode_tensors(eio.encode_tensors({"a": arr}))["a"]
    assert back.shape == arr.shape and back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()


def test_file_roundtrip(tmp_path, rng):
    arr = rng.standard_normal((3, 32, 32)).astype(np.float32)
    p = tmp_path / "x.egot"
    eio.save_tensor(p, arr)
    assert eio.load_tensor(p).tobytes() == arr.tobytes()
    raw = p.read_bytes()
    assert raw[:4] == b"EGOT" and struct.unpack("<I", raw[4:8])[0] == 1
    eio.save_tensor(p, arr)
    assert p.read_bytes() == raw
    assert not list(tmp_path.glob("*.tmp*"))


def test_checkpoint_roundtrip(tmp_path, tiny32):
    p = tmp_path / "m.egod"
    eio.save_checkpoint(p, tiny32.params)
    back = eio.load_checkpoint(p)
    assert list(back) == list(tiny32.params)
    for k, v in tiny32.params.items():
        assert back[k].tobytes() == v.tobytes()
    with pytest.raises(eio.BadMagicError):
        eio.load_tensors(p)


def test_format_errors():
    good = eio.encode_tensors({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    with pytest.raises(eio.BadMagicError) as e:
        eio.decode_tensors(b"XGOT" + good[4:])
    assert e.value.offset == 0 and "offset 0" in str(e.value)
    with pytest.raises(eio.VersionMismatchError) as e:
        eio.decode_tensors(good[:4] + struct.pack("<I", 2) + good[8:])
    assert e.value.offset == 4
    with pytest.raises(eio.TruncatedFileError) as e:
        eio.decode_tensors(good[:-3])
    assert e.value.offset > 8
    with pytest.raises(eio.TruncatedFileError):
        eio.decode_tensors(good[:2])
    # distinct error types, shared base
    assert len({eio.BadMagicError, eio.VersionMismatchError, eio.TruncatedFileError}) == 3
    assert issubclass(eio.TruncatedFileError, eio.FormatError)


def test_text_mask():
    m = eio.parse_text_mask("010/111/010")
    assert m.shape == (3, 3) and m.sum() == 5
    np.testing.assert_array_equal(eio.parse_text_mask("010\n111\n010\n"), m)
    assert eio.parse_text_mask(eio.format_text_mask(m)).tobytes() == m.tobytes()
    for bad in ["", "01/1", "012"]:
        with pytest.raises(ValueError):
            eio.parse_text_mask(bad)


def test_mask_files(tmp_path, rng):
    m = rng.random((8, 8)) < 0.4
    eio.save_mask(tmp_path / "m.txt", m)
    eio.save_mask(tmp_path / "m.egot", m)
    np.testing.assert_array_equal(eio.load_mask(tmp_path / "m.txt"), m)
    np.testing.assert_array_equal(eio.load_mask(tmp_path / "m.egot"), m)
    eio.save_tensor(tmp_path / "bad.egot", np.zeros((2, 2, 2), np.float32))
    with pytest.raises(ValueError):
        eio.load_mask(tmp_path / "bad.egot")
