#!/usr/bin/env python3
"""
MNIST 数据准备脚本
校验官方 IDX 文件，并写出桌面规模子集（前 2000 张训练图像 / 前 500 张测试图像）
"""

import sys
import time
from pathlib import Path

import numpy as np
import yaml
from tqdm import tqdm

from npkit.core.exceptions import IdxFormatError
from npkit.storage.idx import read_idx, write_idx
from npkit.storage.repositories.mnist_repository import DESK_SUFFIX

EXPECTED_COUNTS = {"train": 60000, "test": 10000}


class MnistImporter:
    """MNIST 数据准备器"""

    def __init__(self, config_path: str = "config.yaml"):
        """初始化准备器"""
        config = {}
        if Path(config_path).exists():
            with open(config_path, 'r', encoding='utf-8') as f:
                config = yaml.safe_load(f) or {}
        data = config.get('data', {})
        self.data_dir = Path(data.get('dir', 'data'))
        self.splits = {
            "train": (data.get('train_images', 'train-images-idx3-ubyte'),
                      data.get('train_labels', 'train-labels-idx1-ubyte'),
                      int(data.get('desk_train_size', 2000))),
            "test": (data.get('test_images', 't10k-images-idx3-ubyte'),
                     data.get('test_labels', 't10k-labels-idx1-ubyte'),
                     int(data.get('desk_test_size', 500))),
        }

    def _path(self, name: str) -> Path:
        plain = self.data_dir / name
        gz = self.data_dir / f"{name}.gz"
        return plain if plain.exists() or not gz.exists() else gz

    def verify(self, split: str):
        """读取并校验一个划分"""
        images_file, labels_file, _ = self.splits[split]
        print(f"\n[校验] {split}: {images_file} / {labels_file}")
        images_path, labels_path = self._path(images_file), self._path(labels_file)
        for path in (images_path, labels_path):
            if not path.exists():
                print(f"   ✗ 文件不存在: {path}")
                return None
        try:
            images = read_idx(images_path, expect_ndim=3)
            labels = read_idx(labels_path, expect_ndim=1)
        except IdxFormatError as e:
            print(f"   ✗ 格式错误: {e}")
            return None

        print(f"   图像: {images.shape} {images.dtype}")
        print(f"   标签: {labels.shape}，类别 {sorted(np.unique(labels).tolist())}")
        if len(images) != len(labels):
            print("   ✗ 图像数与标签数不一致")
            return None
        if len(images) != EXPECTED_COUNTS[split]:
            print(f"   [警告] 图像数 {len(images):,} 与官方数量 {EXPECTED_COUNTS[split]:,} 不同")
        print("   ✓ 校验通过")
        return images, labels

    def write_subset(self, split: str, images: np.ndarray, labels: np.ndarray):
        """写出桌面规模子集"""
        images_file, labels_file, size = self.splits[split]
        size = min(size, len(images))
        print(f"[写出] {split} 子集: 前 {size:,} 张")
        start = time.time()
        with tqdm(total=2, desc=f"{split} 子集", unit="文件") as pbar:
            write_idx(self.data_dir / (images_file + DESK_SUFFIX), images[:size])
            pbar.update(1)
            write_idx(self.data_dir / (labels_file + DESK_SUFFIX), labels[:size])
            pbar.update(1)
        print(f"   ✓ 完成，耗时 {time.time() - start:.1f}秒")

    def run(self, check_only: bool = False) -> bool:
        """执行准备流程"""
        print(f"[数据目录] {self.data_dir.resolve()}")
        success = True
        for split in self.splits:
            result = self.verify(split)
            if result is None:
                success = False
                continue
            if not check_only:
                self.write_subset(split, *result)

        if success:
            print("\n[成功] 数据准备完成！")
        else:
            print("\n[错误] 部分数据文件缺失或损坏")
            print("[提示] 请把官方 MNIST 的四个 IDX 文件（可为 .gz）放到数据目录下")
        return success


def main():
    """主函数"""
    print("=" * 60)
    print("MNIST 数据准备工具")
    print("=" * 60)

    # 如果启动参数包含 --check，只做校验
    check_only = len(sys.argv) > 1 and sys.argv[1] == '--check'
    importer = MnistImporter()
    success = importer.run(check_only=check_only)

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
