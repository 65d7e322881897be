"""测试公共夹具：小尺寸模型与 8×8 合成图像"""

import numpy as np
import pytest

from npkit.engine.random import make_rng
from npkit.models.domain import ImageDataset
from npkit.models.schemas import ModelConfig
from npkit.services.neural_process import NeuralProcess, init_params
from npkit.storage.repositories.mnist_repository import MnistRepository

TINY_DIMS = dict(d_h=8, d_s=8, d_z=8, d_psi=4, d_eps=4)


def pytest_collection_modifyitems(config, items):
    if MnistRepository().available():
        return
    skip = pytest.mark.skip(reason="没有 MNIST 数据文件（NPKIT_DATA_DIR）")
    for item in items:
        if "mnist" in item.keywords or "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def model_factory():
    """按覆盖项构造随机初始化的小模型（float64 参数）"""
    def build(seed: int = 0, **overrides) -> NeuralProcess:
        config = ModelConfig(**{**TINY_DIMS, **overrides})
        return NeuralProcess(config, init_params(config, make_rng(seed), dtype=np.float64))
    return build


@pytest.fixture
def plain_model(model_factory):
    return model_factory()


@pytest.fixture
def sivi_model(model_factory):
    return model_factory(head="sivi")


@pytest.fixture
def image():
    """8×8 合成灰度图像"""
    rows, cols = np.mgrid[0:8, 0:8]
    return np.clip(0.5 + 0.4 * np.sin(rows / 2.0) * np.cos(cols / 3.0), 0.0, 1.0)


def synthetic_digits(count: int, size: int = 8, seed: int = 0) -> ImageDataset:
    """带 10 类标签的合成数据集：第 d 类在第 d 个位置附近有一条亮线"""
    rng = make_rng(seed, 99)
    labels = np.arange(count) % 10
    images = rng.uniform(0.0, 0.2, size=(count, size, size))
    for i, label in enumerate(labels):
        row = label % size
        images[i, row, :] = 0.9
        if label >= size:
            images[i, :, label % size] = 0.9
    return ImageDataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64))


@pytest.fixture
def digits():
    return synthetic_digits(40)


@pytest.fixture
def mnist():
    repo = MnistRepository()
    if not repo.available():
        pytest.skip("没有 MNIST 数据文件")
    return repo


@pytest.fixture
def digits_factory():
    return synthetic_digits
