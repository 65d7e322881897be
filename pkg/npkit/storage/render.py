"""条件补全网格渲染（PGM 灰度栅格）

版式：每列对应一个上下文集合。第一行为上下文（未观测像素为中灰 128），
中间每行一个后验样本的均值图，最后一行为逐像素标准差；
真实图像按 2 倍缩小后嵌在最后一个上下文图块的右上角。图块之间用 1 像素白线分隔。
"""

from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from npkit.core.exceptions import ShapeError
from npkit.models.domain import PointSet

SENTINEL = 128
SEPARATOR = 255
STD_SCALE = 0.5     # 标准差 0.5 对应白色


def context_image(context: PointSet, shape) -> np.ndarray:
    """上下文集合 -> [H, W] 图像，未观测像素为 NaN"""
    if context.indices is None:
        raise ShapeError("渲染上下文需要像素下标")
    height, width = shape
    image = np.full(height * width, np.nan)
    image[context.indices] = context.values[:, 0]
    return image.reshape(height, width)


def _to_gray(image: np.ndarray) -> np.ndarray:
    out = np.full(image.shape, SENTINEL, dtype=np.uint8)
    observed = ~np.isnan(image)
    out[observed] = np.round(np.clip(image[observed], 0.0, 1.0) * 255.0).astype(np.uint8)
    return out


def _downsample(image: np.ndarray) -> np.ndarray:
    height, width = (image.shape[0] // 2) * 2, (image.shape[1] // 2) * 2
    cropped = image[:height, :width]
    return cropped.reshape(height // 2, 2, width // 2, 2).mean(axis=(1, 3))


def render_grid(
    contexts: Sequence[np.ndarray],
    samples: Sequence[np.ndarray],
    stds: Sequence[np.ndarray],
    ground_truth: Optional[np.ndarray] = None,
) -> np.ndarray:
    """拼出补全网格

    Args:
        contexts: 每列的上下文图像 [H, W]（NaN 表示未观测）
        samples: 每列的样本均值图 [S, H, W]
        stds: 每列的标准差图 [H, W]
        ground_truth: 真实图像 [H, W]，None 表示不嵌入

    Returns:
        np.ndarray: uint8 栅格

    Raises:
        ShapeError: 各图尺寸或列数不一致
    """
    columns = len(contexts)
    if columns == 0 or len(samples) != columns or len(stds) != columns:
        raise ShapeError(f"列数不一致: contexts={len(contexts)}, samples={len(samples)}, stds={len(stds)}")
    height, width = np.shape(contexts[0])
    rows = 2 + len(samples[0])
    for col in range(columns):
        shapes = [np.shape(contexts[col]), np.shape(stds[col])] + [np.shape(s) for s in samples[col]]
        if any(s != (height, width) for s in shapes) or len(samples[col]) != rows - 2:
            raise ShapeError(f"第 {col} 列的图像尺寸不一致")
    if ground_truth is not None and np.shape(ground_truth) != (height, width):
        raise ShapeError(f"真实图像尺寸 {np.shape(ground_truth)} 与 {(height, width)} 不一致")

    raster = np.full((rows * height + rows - 1, columns * width + columns - 1), SEPARATOR, dtype=np.uint8)

    def place(row: int, col: int, tile: np.ndarray) -> None:
        top, left = row * (height + 1), col * (width + 1)
        raster[top:top + height, left:left + width] = tile

    for col in range(columns):
        place(0, col, _to_gray(np.asarray(contexts[col], dtype=np.float64)))
        for row, mean in enumerate(samples[col], start=1):
            place(row, col, _to_gray(np.asarray(mean, dtype=np.float64)))
        place(rows - 1, col, _to_gray(np.asarray(stds[col], dtype=np.float64) / STD_SCALE))

    if ground_truth is not None:
        inset = _to_gray(_downsample(np.asarray(ground_truth, dtype=np.float64)))
        left = (columns - 1) * (width + 1) + width - inset.shape[1]
        raster[:inset.shape[0], left:left + inset.shape[1]] = inset
    return raster


def encode_pgm(raster: np.ndarray) -> bytes:
    """二进制 PGM（P5，最大值 255）"""
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.dtype != np.uint8:
        raise ShapeError(f"PGM 需要二维 uint8 栅格，当前 {raster.shape} {raster.dtype}")
    height, width = raster.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + raster.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """读取本模块写出的 P5 文件"""
    magic, dims, maxval, payload = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ShapeError("不是 P5 / 255 格式的 PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(payload, dtype=np.uint8, count=width * height).reshape(height, width)


def write_pgm(path: Union[str, Path], raster: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(raster))


def completion_columns(
    contexts: List[PointSet],
    means: List[np.ndarray],
    stds: List[np.ndarray],
    shape,
    show: int,
    ground_truth: Optional[np.ndarray] = None,
) -> np.ndarray:
    """把若干个 Completion 组织成网格：显示前 show 个样本，标准差使用全部样本"""
    return render_grid(
        [context_image(c, shape) for c in contexts],
        [m[:show] for m in means],
        stds,
        ground_truth,
    )
