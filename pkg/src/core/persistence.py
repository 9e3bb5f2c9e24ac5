"""
Bit-exact tensor and checkpoint files

Tensor record (little-endian):
    magic "TNSR" | version u8 = 1 | dtype u8 = 0 (f32) | ndim u8 | ndim x u32 dims | f32 payload

Checkpoint file:
    magic "CKPT" | version u8 = 1 | u32 count | per parameter:
    u16 name length | UTF-8 name | u8 trainable | tensor record
"""
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import torch

from src.common.errors import RestoredDepthError
from src.common.logging import get_logger
from src.core.params import ParameterStore
from src.core.tensor import NonFiniteTensorError

logger = get_logger(__name__)

PathLike = Union[str, Path]

TENSOR_MAGIC = b"TNSR"
CHECKPOINT_MAGIC = b"CKPT"
FORMAT_VERSION = 1
DTYPE_F32 = 0
MAX_U32 = 2**32 - 1
MAX_ELEMENTS = 2**31 - 1


class TensorFormatError(RestoredDepthError):
    """Base exception for tensor/checkpoint file errors; `code` identifies the kind"""

    code = 0


class MagicMismatchError(TensorFormatError):
    """File does not start with the expected magic bytes"""

    code = 1


class VersionMismatchError(TensorFormatError):
    """File format version is not supported"""

    code = 2


class TruncatedFileError(TensorFormatError):
    """File ended before the record was complete"""

    code = 3


class DimensionOverflowError(TensorFormatError):
    """Dimensions exceed what the format or memory can address"""

    code = 4


class UnsupportedDtypeError(TensorFormatError):
    """Tensor dtype other than float32"""

    code = 5


class InvalidDimensionError(TensorFormatError):
    """A dimension of size zero"""

    code = 6


def _take(buf: bytes, offset: int, size: int) -> Tuple[bytes, int]:
    end = offset + size
    if end > len(buf):
        raise TruncatedFileError(f"need {size} bytes at offset {offset}, file has {len(buf)}")
    return buf[offset:end], end


def encode_tensor(x: torch.Tensor) -> bytes:
    """Serialize a float32 tensor into a tensor record"""
    if x.dtype != torch.float32:
        raise UnsupportedDtypeError(f"only float32 is supported, got {x.dtype}")
    if x.dim() > 255:
        raise DimensionOverflowError(f"ndim {x.dim()} does not fit in u8")
    if any(d > MAX_U32 for d in x.shape):
        raise DimensionOverflowError(f"dimension in {tuple(x.shape)} does not fit in u32")
    if any(d == 0 for d in x.shape):
        raise InvalidDimensionError(f"dimensions must be positive, got {tuple(x.shape)}")
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteTensorError("refusing to persist a tensor with NaN/Inf")

    header = struct.pack("<4sBBB", TENSOR_MAGIC, FORMAT_VERSION, DTYPE_F32, x.dim())
    dims = struct.pack(f"<{x.dim()}I", *x.shape)
    payload = x.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()
    return header + dims + payload


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[torch.Tensor, int]:
    """
    Parse a tensor record starting at offset

    Returns:
        (tensor, offset just past the record)
    """
    head, offset = _take(buf, offset, 7)
    magic, version, dtype, ndim = struct.unpack("<4sBBB", head)
    if magic != TENSOR_MAGIC:
        raise MagicMismatchError(f"expected {TENSOR_MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported tensor format version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")

    raw_dims, offset = _take(buf, offset, 4 * ndim)
    dims = struct.unpack(f"<{ndim}I", raw_dims)
    if any(d == 0 for d in dims):
        raise InvalidDimensionError(f"dimensions must be positive, got {dims}")
    count = int(np.prod(dims, dtype=np.float64)) if dims else 1
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{count} elements exceed the addressable maximum")

    payload, offset = _take(buf, offset, 4 * count)
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32, copy=True)
    return torch.from_numpy(values).reshape(dims), offset


def save_tensor(x: torch.Tensor, path: PathLike) -> None:
    """Write a tensor file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(x))


def load_tensor(path: PathLike) -> torch.Tensor:
    """Read a tensor file written by save_tensor"""
    buf = Path(path).read_bytes()
    tensor, end = decode_tensor(buf)
    if end != len(buf):
        logger.warning(f"Ignoring {len(buf) - end} trailing bytes in {path}")
    return tensor


def save_checkpoint(store: ParameterStore, path: PathLike) -> None:
    """
    Write every parameter of a store, with its trainable flag, to a checkpoint file

    Args:
        store: Parameters to persist
        path: Destination file
    """
    parts = [struct.pack("<4sBI", CHECKPOINT_MAGIC, FORMAT_VERSION, len(store))]
    for name, tensor in store.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", 1 if store.is_trainable(name) else 0))
        parts.append(encode_tensor(tensor.detach().float()))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    logger.info(f"Saved checkpoint with {len(store)} parameters to {path}")


def load_checkpoint(path: PathLike) -> Dict[str, Tuple[torch.Tensor, bool]]:
    """
    Read a checkpoint file

    Returns:
        Mapping of parameter name -> (tensor, trainable flag)
    """
    buf = Path(path).read_bytes()
    head, offset = _take(buf, 0, 9)
    magic, version, count = struct.unpack("<4sBI", head)
    if magic != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint format version {version}")

    entries: Dict[str, Tuple[torch.Tensor, bool]] = {}
    for _ in range(count):
        raw_len, offset = _take(buf, offset, 2)
        (name_len,) = struct.unpack("<H", raw_len)
        raw_name, offset = _take(buf, offset, name_len)
        raw_flag, offset = _take(buf, offset, 1)
        tensor, offset = decode_tensor(buf, offset)
        entries[raw_name.decode("utf-8")] = (tensor, raw_flag[0] == 1)
    return entries


def apply_checkpoint(store: ParameterStore, path: PathLike, strict: bool = False) -> int:
    """
    Copy checkpoint values into matching parameters of a store

    Args:
        store: Destination parameters
        path: Checkpoint file
        strict: Require every store parameter to be present in the checkpoint

    Returns:
        Number of parameters restored
    """
    entries = load_checkpoint(path)
    missing = [name for name in store if name not in entries]
    if strict and missing:
        raise TensorFormatError(f"checkpoint {path} lacks {len(missing)} parameters: {missing[:3]}")

    restored = 0
    with torch.no_grad():
        for name, tensor in store.items():
            if name not in entries:
                continue
            value, _ = entries[name]
            if value.shape != tensor.shape:
                raise TensorFormatError(
                    f"{name}: checkpoint shape {tuple(value.shape)} != {tuple(tensor.shape)}"
                )
            tensor.copy_(value.to(tensor.dtype))
            restored += 1

    logger.info(f"Restored {restored}/{len(store)} parameters from {path}")
    return restored
