"""Unit tests for tensor and checkpoint files"""
import struct

import pytest
import torch
from torch import nn

from src.core.params import ParameterStore
from src.core.persistence import (
    DimensionOverflowError,
    InvalidDimensionError,
    MagicMismatchError,
    TensorFormatError,
    TruncatedFileError,
    UnsupportedDtypeError,
    VersionMismatchError,
    apply_checkpoint,
    decode_tensor,
    encode_tensor,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)
from src.core.tensor import NonFiniteTensorError


def test_tensor_file_is_bit_exact(tmp_path):
    """Saved tensors load back bit-identical, including extreme values"""
    x = torch.tensor([[0.0, -0.0, 1e-38], [3.4e38, -1.5, 7.25]])
    save_tensor(x, tmp_path / "a" / "x.tnsr")
    y = load_tensor(tmp_path / "a" / "x.tnsr")
    assert y.dtype == torch.float32
    assert torch.equal(x.view(torch.int32), y.view(torch.int32))


def test_tensor_record_layout():
    """Header is magic, version, dtype, ndim, then little-endian u32 dims"""
    data = encode_tensor(torch.ones(2, 3))
    assert data[:4] == b"TNSR"
    assert data[4:7] == bytes([1, 0, 2])
    assert struct.unpack("<2I", data[7:15]) == (2, 3)
    assert len(data) == 15 + 4 * 6


def test_scalar_tensor():
    """A zero-dimensional tensor has one element and no dims"""
    x, end = decode_tensor(encode_tensor(torch.tensor(2.5)))
    assert x.shape == () and x.item() == 2.5
    assert end == 7 + 4


def test_decode_errors():
    """Corrupted records raise their specific error"""
    good = encode_tensor(torch.ones(2, 2))
    with pytest.raises(MagicMismatchError):
        decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(VersionMismatchError):
        decode_tensor(good[:4] + bytes([9]) + good[5:])
    with pytest.raises(UnsupportedDtypeError):
        decode_tensor(good[:5] + bytes([3]) + good[6:])
    with pytest.raises(TruncatedFileError):
        decode_tensor(good[:-1])
    with pytest.raises(InvalidDimensionError):
        decode_tensor(good[:7] + struct.pack("<I", 0) + good[11:])
    huge = b"TNSR" + bytes([1, 0, 2]) + struct.pack("<2I", 2**20, 2**20)
    with pytest.raises(DimensionOverflowError):
        decode_tensor(huge)


def test_error_codes_are_distinct():
    """Each format error kind carries its own code"""
    codes = {
        cls.code
        for cls in (
            MagicMismatchError,
            VersionMismatchError,
            TruncatedFileError,
            DimensionOverflowError,
            UnsupportedDtypeError,
            InvalidDimensionError,
        )
    }
    assert len(codes) == 6
    assert issubclass(TruncatedFileError, TensorFormatError)


def test_encode_rejects_bad_tensors():
    """Only finite float32 tensors with positive dims are written"""
    with pytest.raises(UnsupportedDtypeError):
        encode_tensor(torch.ones(2, dtype=torch.float64))
    with pytest.raises(InvalidDimensionError):
        encode_tensor(torch.ones(0, 3))
    with pytest.raises(NonFiniteTensorError):
        encode_tensor(torch.tensor([1.0, float("inf")]))


def test_checkpoint_round_trip_with_flags(tmp_path):
    """Values and trainable flags survive a checkpoint"""
    module = nn.Sequential(nn.Linear(3, 2), nn.Linear(2, 1))
    store = ParameterStore.from_module(module)
    store.freeze(["0"])
    path = tmp_path / "ckpt" / "model.ckpt"
    save_checkpoint(store, path)

    entries = load_checkpoint(path)
    assert list(entries) == ["0.weight", "0.bias", "1.weight", "1.bias"]
    assert entries["0.weight"][1] is False and entries["1.bias"][1] is True
    assert torch.equal(entries["1.weight"][0], module[1].weight.detach())

    other = nn.Sequential(nn.Linear(3, 2), nn.Linear(2, 1))
    restored = apply_checkpoint(ParameterStore.from_module(other), path, strict=True)
    assert restored == 4
    assert torch.equal(other[0].weight, module[0].weight)


def test_apply_checkpoint_mismatches(tmp_path):
    """Shape mismatches always raise; missing names raise only in strict mode"""
    path = tmp_path / "small.ckpt"
    save_checkpoint(ParameterStore.from_module(nn.Linear(3, 2)), path)
    with pytest.raises(TensorFormatError):
        apply_checkpoint(ParameterStore.from_module(nn.Linear(4, 2)), path)

    bigger = nn.Sequential()
    bigger.add_module("weight_holder", nn.Linear(3, 2))
    store = ParameterStore.from_module(bigger)
    assert apply_checkpoint(store, path) == 0
    with pytest.raises(TensorFormatError):
        apply_checkpoint(store, path, strict=True)


def test_checkpoint_magic_checked(tmp_path):
    """A tensor file is not a checkpoint"""
    path = tmp_path / "x.tnsr"
    save_tensor(torch.ones(2), path)
    with pytest.raises(MagicMismatchError):
        load_checkpoint(path)
