"""MNIST 数据仓库"""

from pathlib import Path
from typing import Optional

import numpy as np

from npkit.core.config import settings
from npkit.core.exceptions import ShapeError
from npkit.core.logging import logger
from npkit.models.domain import ImageDataset
from npkit.storage.idx import normalize_images, read_idx

DESK_SUFFIX = "-desk"


class MnistRepository:
    """按 Settings 中的路径读取 MNIST 训练 / 测试集"""

    def __init__(self, data_dir: Optional[str] = None):
        self.data_dir = Path(data_dir or settings.data_dir)

    def _resolve(self, name: str) -> Path:
        """依次尝试原文件名与 .gz 压缩版本"""
        for candidate in (self.data_dir / name, self.data_dir / f"{name}.gz"):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"找不到数据文件: {self.data_dir / name}")

    def available(self) -> bool:
        try:
            self._resolve(settings.train_images_file)
            self._resolve(settings.test_images_file)
            return True
        except FileNotFoundError:
            return False

    def load_split(self, images_file: str, labels_file: str, limit: Optional[int] = None) -> ImageDataset:
        """读取一个划分

        Args:
            images_file: 图像 IDX 文件名
            labels_file: 标签 IDX 文件名
            limit: 只取前 limit 张，None 表示全部

        Returns:
            ImageDataset: 灰度归一化到 [0,1] 的数据集
        """
        try:
            images = read_idx(self._resolve(images_file), expect_ndim=3)
            labels = read_idx(self._resolve(labels_file), expect_ndim=1)
            if len(images) != len(labels):
                raise ShapeError(f"图像数 {len(images)} 与标签数 {len(labels)} 不一致")
            if limit is not None:
                images, labels = images[:limit], labels[:limit]
            logger.info(f"读取 {images_file}: {images.shape}")
            return ImageDataset(normalize_images(images), labels.astype(np.int64))
        except Exception as e:
            logger.error(f"读取 MNIST 数据失败: {e}")
            raise

    def load_train(self, desk: bool = False) -> ImageDataset:
        """训练集；desk=True 时取桌面规模子集（优先读取 import_data.py 写出的子集文件）"""
        return self._load(settings.train_images_file, settings.train_labels_file, settings.desk_train_size, desk)

    def load_test(self, desk: bool = False) -> ImageDataset:
        return self._load(settings.test_images_file, settings.test_labels_file, settings.desk_test_size, desk)

    def _load(self, images_file: str, labels_file: str, desk_size: int, desk: bool) -> ImageDataset:
        if not desk:
            return self.load_split(images_file, labels_file)
        subset_images, subset_labels = images_file + DESK_SUFFIX, labels_file + DESK_SUFFIX
        if (self.data_dir / subset_images).exists() and (self.data_dir / subset_labels).exists():
            return self.load_split(subset_images, subset_labels)
        return self.load_split(images_file, labels_file, limit=desk_size)
