"""Minimal bit-exact tensor container (``.prtc`` files).

Layout, all little-endian::

    magic      4 bytes   b"PRTC"
    version    uint8     1
    dtype_code uint8     0 = float32, 1 = float64, 2 = uint8
    ndim       uint8
    shape      ndim x uint32
    payload    row-major values
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import ContainerFormatError
from .utils.logger import get_logger

MAGIC = b"PRTC"
VERSION = 1
DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

logger = get_logger(__name__)


def encode_container(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in DTYPE_CODES:
        raise ContainerFormatError(
            f"Unsupported dtype {array.dtype}; expected float32, float64 or uint8"
        )
    if array.ndim > 255:
        raise ContainerFormatError(f"Too many dimensions: {array.ndim}")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=dtype).tobytes(order="C")
    return header + payload


def decode_container(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 7:
        raise ContainerFormatError(f"{source}: truncated header")
    if blob[:4] != MAGIC:
        raise ContainerFormatError(f"{source}: bad magic {blob[:4]!r}")
    _version, dtype_code, ndim = struct.unpack("<BBB", blob[4:7])
    if dtype_code not in CODE_DTYPES:
        raise ContainerFormatError(f"{source}: unknown dtype_code {dtype_code}")
    offset = 7 + 4 * ndim
    if len(blob) < offset:
        raise ContainerFormatError(f"{source}: truncated shape")
    shape = struct.unpack(f"<{ndim}I", blob[7:offset])
    dtype = CODE_DTYPES[dtype_code]
    expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    payload = blob[offset:]
    if len(payload) < expected:
        raise ContainerFormatError(
            f"{source}: truncated payload ({len(payload)} of {expected} bytes)"
        )
    if len(payload) > expected:
        raise ContainerFormatError(f"{source}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_container(array: np.ndarray, path: Union[str, Path]) -> Path:
    """Write ``array`` to ``path`` in the container layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(array))
    logger.debug(f"Saved container {path} shape={np.shape(array)}")
    return path


def load_container(path: Union[str, Path]) -> np.ndarray:
    """Read a container written by :func:`save_container`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Container not found: {path}")
    try:
        return decode_container(path.read_bytes(), source=str(path))
    except ContainerFormatError as e:
        logger.error(str(e))
        raise
