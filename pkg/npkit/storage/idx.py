"""IDX 二进制格式读写

头部：两个零字节、类型码、维数；随后是每一维的 32 位大端长度，最后是大端数据。
MNIST 图像文件的魔数为 0x00000803，标签文件为 0x00000801。
"""

import gzip
from pathlib import Path
from typing import Optional, Union

import numpy as np

from npkit.core.exceptions import (
    BadMagicError,
    DimensionOverflowError,
    IdxFormatError,
    TruncatedPayloadError,
)

# 类型码 -> 大端 numpy 类型
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {dtype.newbyteorder("="): code for code, dtype in IDX_TYPES.items()}

MAX_ELEMENTS = 2**31 - 1


def parse_idx(data: bytes, expect_ndim: Optional[int] = None) -> np.ndarray:
    """解析 IDX 字节流

    Args:
        data: 完整的文件内容
        expect_ndim: 期望的维数（图像 3、标签 1），None 表示不检查

    Returns:
        np.ndarray: 原生字节序的数组

    Raises:
        BadMagicError: 魔数非法或维数不符
        TruncatedPayloadError: 头部或数据长度不足
        DimensionOverflowError: 维度乘积超出上限
        IdxFormatError: 数据之后还有多余字节
    """
    if len(data) < 4:
        raise TruncatedPayloadError(f"IDX 头部不完整: {len(data)} 字节")
    if data[0] != 0 or data[1] != 0:
        raise BadMagicError(f"IDX 魔数前两个字节必须为 0，当前 {data[:2].hex()}")
    code, ndim = data[2], data[3]
    if code not in IDX_TYPES:
        raise BadMagicError(f"未知 IDX 类型码 0x{code:02X}")
    if ndim == 0 or (expect_ndim is not None and ndim != expect_ndim):
        raise BadMagicError(f"IDX 维数 {ndim} 不符合预期 {expect_ndim}")

    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayloadError(f"IDX 维度信息不完整: 需要 {header} 字节，实际 {len(data)}")
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimensionOverflowError(f"IDX 维度 {dims} 的元素数超出上限")

    dtype = IDX_TYPES[code]
    expected = header + count * dtype.itemsize
    if len(data) < expected:
        raise TruncatedPayloadError(f"IDX 数据不完整: 需要 {expected} 字节，实际 {len(data)}")
    if len(data) > expected:
        raise IdxFormatError(f"IDX 数据之后有 {len(data) - expected} 个多余字节")
    values = np.frombuffer(data, dtype=dtype, count=count, offset=header)
    return values.astype(dtype.newbyteorder("=")).reshape(dims)


def serialize_idx(array: np.ndarray) -> bytes:
    """把数组写成 IDX 字节流（parse_idx 的逆运算）"""
    array = np.asarray(array)
    code = _TYPE_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"IDX 不支持的元素类型 {array.dtype}")
    if array.ndim == 0 or array.ndim > 255:
        raise IdxFormatError(f"IDX 不支持的维数 {array.ndim}")
    header = bytes([0, 0, code, array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    return header + array.astype(IDX_TYPES[code]).tobytes()


def read_idx(path: Union[str, Path], expect_ndim: Optional[int] = None) -> np.ndarray:
    """读取 IDX 文件，支持 .gz 压缩"""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return parse_idx(f.read(), expect_ndim)


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(serialize_idx(array))


def normalize_images(raw: np.ndarray) -> np.ndarray:
    """uint8 灰度 -> [0,1] 浮点"""
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    return np.clip(raw.astype(np.float64), 0.0, 1.0)
