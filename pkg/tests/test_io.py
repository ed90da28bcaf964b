import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from gdrq.io import (FormatError, atomic_write_text, decode_tensor, encode_tensor, load_checkpoint_dir,
                     read_tensor, save_checkpoint_dir, write_tensor)


def test_f32_layout_is_bit_exact():
    arr = np.array([[1.0, -2.5, 3.25]], dtype=np.float32)
    buf = encode_tensor(arr)
    expected = b"QTEN" + struct.pack("<III", 1, 1, 2) + struct.pack("<2Q", 1, 3) + struct.pack("<3f", 1.0, -2.5, 3.25)
    assert buf == expected
    assert len(buf) - (16 + 16) == 4 * arr.size


def test_f64_code():
    buf = encode_tensor(np.zeros(2))
    assert struct.unpack_from("<I", buf, 8)[0] == 2


@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=True, allow_infinity=True, width=32)))
def test_roundtrip_bit_identical(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_file_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5))
    write_tensor(tmp_path / "a.qten", arr)
    assert read_tensor(tmp_path / "a.qten").tobytes() == arr.tobytes()


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:8] + struct.pack("<I", 7) + b[12:], "dtype"),
    (lambda b: b[:-1], "payload"),
    (lambda b: b + b"\0", "payload"),
])
def test_corrupt_tensor_rejected(mutate, msg):
    with pytest.raises(FormatError, match=msg):
        decode_tensor(mutate(encode_tensor(np.ones((2, 2), dtype=np.float32))))


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        encode_tensor(np.ones(3, dtype=np.int32))


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a.weight": np.arange(6.0).reshape(2, 3), "b/c": np.ones(1, dtype=np.float32)}
    save_checkpoint_dir(tmp_path / "ck", {"epoch": 3}, tensors)
    manifest, back = load_checkpoint_dir(tmp_path / "ck")
    assert manifest["schema"] == 1 and manifest["epoch"] == 3
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_overwrite_leaves_no_temp(tmp_path):
    for e in range(2):
        save_checkpoint_dir(tmp_path / "ck", {"epoch": e}, {"x": np.zeros(2)})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]
    assert load_checkpoint_dir(tmp_path / "ck")[0]["epoch"] == 1


def test_failed_save_keeps_previous(tmp_path):
    save_checkpoint_dir(tmp_path / "ck", {"epoch": 1}, {"x": np.zeros(2)})
    with pytest.raises(FormatError):
        save_checkpoint_dir(tmp_path / "ck", {"epoch": 2}, {"x": np.zeros(2, dtype=np.int8)})
    assert load_checkpoint_dir(tmp_path / "ck")[0]["epoch"] == 1
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]


@pytest.mark.parametrize("content", ["{not json", json.dumps({"schema": 99}), json.dumps([1, 2])])
def test_bad_manifest(tmp_path, content):
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "manifest.json").write_text(content)
    with pytest.raises(FormatError):
        load_checkpoint_dir(tmp_path / "ck")


def test_missing_manifest_and_tensor(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint_dir(tmp_path)
    save_checkpoint_dir(tmp_path / "ck", {}, {"x": np.zeros(2)})
    next((tmp_path / "ck" / "tensors").iterdir()).unlink()
    with pytest.raises(FormatError, match="missing"):
        load_checkpoint_dir(tmp_path / "ck")


def test_atomic_write_text(tmp_path):
    atomic_write_text(tmp_path / "sub" / "f.txt", "hello")
    assert (tmp_path / "sub" / "f.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
