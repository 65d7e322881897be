"""对角高斯分布

所有量以 nat 为单位，对最后一维求和；前导轴作为 batch 轴逐一计算。
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from npkit.core.exceptions import DimensionMismatchError, DomainError
from npkit.engine import functional as F
from npkit.engine.graph import Graph, Tensor
from npkit.engine.random import standard_normal

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass(frozen=True)
class DiagGaussian:
    """N(mu, diag(sigma²))，sigma 必须严格为正"""
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise DimensionMismatchError(f"mu {self.mu.shape} 与 sigma {self.sigma.shape} 形状不一致")
        if np.any(self.sigma.value <= 0):
            raise DomainError("sigma 必须严格为正")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.mu.shape[:-1]

    @property
    def graph(self) -> Graph:
        return self.mu.graph

    @classmethod
    def standard(cls, graph: Graph, dim: int) -> "DiagGaussian":
        """标准正态 N(0, I)"""
        return cls(graph.constant(np.zeros(dim)), graph.constant(np.ones(dim)))


def _check_dims(a: int, b: int) -> None:
    if a != b:
        raise DimensionMismatchError(f"维度不一致: {a} != {b}")


def logpdf(g: DiagGaussian, v: Union[Tensor, np.ndarray]) -> Tensor:
    """Σ_i [−log σ_i − ½log 2π − ½((v_i−μ_i)/σ_i)²]"""
    v_shape = v.shape if isinstance(v, Tensor) else np.shape(v)
    _check_dims(g.dim, v_shape[-1] if v_shape else 1)
    standardized = F.div(F.sub(v, g.mu), g.sigma)
    per_dim = F.sub(F.neg(F.log(g.sigma)), F.mul(F.square(standardized), 0.5))
    return F.sub(F.sum(per_dim, axis=-1), g.dim * HALF_LOG_2PI)


def entropy(g: DiagGaussian) -> Tensor:
    """½·d·ln(2πe) + Σ ln σ_i"""
    return F.add(F.sum(F.log(g.sigma), axis=-1), g.dim * HALF_LOG_2PIE)


def kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q ‖ p) = Σ [ln(σp/σq) + (σq² + (μq−μp)²)/(2σp²) − ½]"""
    _check_dims(q.dim, p.dim)
    log_ratio = F.sub(F.log(p.sigma), F.log(q.sigma))
    spread = F.add(F.square(q.sigma), F.square(F.sub(q.mu, p.mu)))
    quad = F.div(spread, F.mul(F.square(p.sigma), 2.0))
    return F.sum(F.sub(F.add(log_ratio, quad), 0.5), axis=-1)


def reparam_sample(
    g: DiagGaussian,
    rng: np.random.Generator,
    sample_shape: Tuple[int, ...] = (),
    eps: Optional[np.ndarray] = None,
) -> Tuple[Tensor, np.ndarray]:
    """重参数化采样 z = μ + σ⊙ε

    Args:
        g: 分布
        rng: 随机流
        sample_shape: 额外的前导采样轴
        eps: 指定噪声（测试或确定性解码时使用），None 表示从 rng 抽取

    Returns:
        Tuple[Tensor, np.ndarray]: 与 μ、σ 连通的样本，以及所用的噪声
    """
    shape = tuple(sample_shape) + g.mu.shape
    if eps is None:
        eps = standard_normal(rng, shape, dtype=g.graph.dtype)
    else:
        eps = np.broadcast_to(np.asarray(eps, dtype=g.graph.dtype), shape)
    return F.add(g.mu, F.mul(g.sigma, eps)), eps
