"""可复现的随机数流

所有随机性都来自计数器型的 Philox 生成器。每个 (seed, stream...) 组合对应一条独立的流，
工作线程各自持有自己的流，从不共享。标准正态变量由 numpy Generator 的确定性
ziggurat 变换得到；同一构建上结果逐位一致，不承诺跨平台逐位一致。
"""

from typing import Tuple

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """创建一条命名随机流

    Args:
        seed: 根种子
        stream: 流标识（例如 epoch、batch、槽位），不同标识得到独立的流

    Returns:
        np.random.Generator: Philox 生成器
    """
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def standard_normal(rng: np.random.Generator, shape: Tuple[int, ...], dtype=np.float64) -> np.ndarray:
    """抽取标准正态噪声（先以 float64 抽样再转换类型，保证不同精度下取值一致）"""
    return np.asarray(rng.standard_normal(size=tuple(shape))).astype(dtype, copy=False)
