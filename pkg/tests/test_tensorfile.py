"""Binary tensor format: exact header layout, roundtrips, typed failures."""

import struct

import numpy as np
import pytest

from m2malign.errors import (
    BadDtypeError,
    BadMagicError,
    BadVersionError,
    PayloadSizeError,
    ShapeError,
    TensorFileError,
)
from m2malign.tensor import Tensor
from m2malign.tensorfile import load_params, read_tensor, save_params, write_tensor


def test_header_bytes_for_a_2x3_tensor(tmp_path):
    path = tmp_path / "t.m2mt"
    write_tensor(path, Tensor(np.zeros((2, 3))))
    header = path.read_bytes()[:18]
    assert header == (
        b"M2MT"
        + bytes([0x01, 0x00, 0x00, 0x00])  # version 1, u32 LE
        + bytes([0x00])                    # dtype float32
        + bytes([0x02])                    # ndim
        + bytes([0x02, 0x00, 0x00, 0x00])  # dim 2
        + bytes([0x03, 0x00, 0x00, 0x00])  # dim 3
    )


def test_roundtrip_preserves_dims_and_float32_values(tmp_path):
    rng = np.random.default_rng(0)
    t = Tensor(rng.normal(size=(2, 3, 4)))
    path = tmp_path / "t.m2mt"
    write_tensor(path, t)
    back = read_tensor(path)
    assert back.shape == (2, 3, 4)
    np.testing.assert_allclose(back.data, t.data, rtol=6e-8)


def test_payload_is_little_endian_float32(tmp_path):
    path = tmp_path / "t.m2mt"
    write_tensor(path, Tensor([1.5, -2.0]))
    payload = path.read_bytes()[14:]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), [1.5, -2.0])


def test_empty_file_fails_with_bad_magic(tmp_path):
    path = tmp_path / "empty.m2mt"
    path.write_bytes(b"")
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_wrong_magic(tmp_path):
    path = tmp_path / "t.m2mt"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_wrong_version(tmp_path):
    path = tmp_path / "t.m2mt"
    path.write_bytes(b"M2MT" + struct.pack("<IBB", 2, 0, 1) + struct.pack("<I", 1) + b"\x00" * 4)
    with pytest.raises(BadVersionError):
        read_tensor(path)


def test_wrong_dtype(tmp_path):
    path = tmp_path / "t.m2mt"
    path.write_bytes(b"M2MT" + struct.pack("<IBB", 1, 7, 1) + struct.pack("<I", 1) + b"\x00" * 4)
    with pytest.raises(BadDtypeError):
        read_tensor(path)


def test_unsupported_rank_byte(tmp_path):
    path = tmp_path / "t.m2mt"
    path.write_bytes(b"M2MT" + struct.pack("<IBB", 1, 0, 9))
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.m2mt"
    write_tensor(path, Tensor(np.ones(4)))
    whole = path.read_bytes()
    path.write_bytes(whole[:-3])
    with pytest.raises(PayloadSizeError):
        read_tensor(path)


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / "t.m2mt"
    write_tensor(path, Tensor(np.ones(4)))
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(PayloadSizeError):
        read_tensor(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "t.m2mt"
    path.write_bytes(b"M2MT" + struct.pack("<IBB", 1, 0, 3) + struct.pack("<I", 2))
    with pytest.raises(PayloadSizeError):
        read_tensor(path)


def test_scalars_are_not_storable(tmp_path):
    with pytest.raises(ShapeError):
        write_tensor(tmp_path / "s.m2mt", Tensor(3.0))


def test_param_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    params = {
        "enc.embed_w": Tensor(rng.normal(size=(4, 8)), requires_grad=True),
        "head/b": Tensor(rng.normal(size=2), requires_grad=True),
    }
    save_params(tmp_path / "ckpt", params)
    back = load_params(tmp_path / "ckpt")
    assert set(back) == set(params)
    for name, t in params.items():
        assert back[name].requires_grad
        assert back[name].name == name
        np.testing.assert_allclose(back[name].data, t.data, rtol=6e-8)


def test_bundle_without_manifest_is_rejected(tmp_path):
    (tmp_path / "ckpt").mkdir()
    (tmp_path / "ckpt" / "manifest.json").write_text("{\"format\": \"other\"}")
    with pytest.raises(TensorFileError):
        load_params(tmp_path / "ckpt")
