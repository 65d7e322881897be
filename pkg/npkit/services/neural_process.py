"""神经过程模型：置换不变编码器（普通 / SIVI 头部，mean / max 池化）与解码器"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from npkit.core.exceptions import HeadMismatchError, ShapeError
from npkit.core.logging import logger
from npkit.engine import functional as F
from npkit.engine.distributions import DiagGaussian, logpdf, reparam_sample
from npkit.engine.graph import Graph, Tensor
from npkit.engine.random import standard_normal
from npkit.models.domain import Completion, ModelParams, PointSet, pixel_coords
from npkit.models.schemas import ModelConfig

# 每个子网络的全连接层数
LAYERS = {"h": 3, "rho": 2, "eta": 2, "g": 5}


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """按结构配置列出全部参数的名称与形状

    Args:
        config: 结构配置

    Returns:
        Dict[str, Tuple[int, ...]]: 参数名到形状（按层顺序）
    """
    shapes: Dict[str, Tuple[int, ...]] = {}

    def mlp(prefix, widths):
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"{prefix}.{i}.W"] = (fan_in, fan_out)
            shapes[f"{prefix}.{i}.b"] = (fan_out,)

    c = config
    mlp("h", [c.d_x + c.d_y, c.d_h, c.d_h, c.d_s])
    if c.head == "plain":
        mlp("rho", [c.d_s, c.d_h, 2 * c.d_z])
    else:
        mlp("rho", [c.d_s + c.d_eps, c.d_h, c.d_psi])
        mlp("eta", [c.d_s + c.d_psi, c.d_h, 2 * c.d_z])
    out = 2 * c.d_y if c.obs_variance == "learned" else c.d_y
    mlp("g", [c.d_x + c.d_z, c.d_h, c.d_h, c.d_h, c.d_h, out])
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """按 fan-in 缩放的均匀分布 U(−1/√fan_in, 1/√fan_in) 初始化权重与偏置"""
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        fan_in = shape[0] if name.endswith(".W") else tensors[name[:-1] + "W"].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(tensors)


def latent_scale(raw: Tensor, head: str = "narrow") -> Tensor:
    """潜变量标准差：narrow 为 0.9 + 0.1·sigmoid，wide 为 0.1 + 0.9·sigmoid"""
    low, span = (0.9, 0.1) if head == "narrow" else (0.1, 0.9)
    return F.add(F.mul(F.sigmoid(raw), span), low)


def observation_scale(raw: Tensor) -> Tensor:
    """学习型观测标准差：0.9 + 0.1·softplus"""
    return F.add(F.mul(F.softplus(raw), 0.1), 0.9)


@dataclass
class NPEncoding:
    """普通头部的编码结果"""
    s_c: Tensor
    posterior: DiagGaussian


@dataclass
class SiviEncoding:
    """SIVI 头部的编码结果：混合变量 ψ 及其条件高斯 q(z|ψ, C)"""
    s_c: Tensor
    psi: Tensor
    posterior: DiagGaussian
    eps: np.ndarray


class NeuralProcess:
    """神经过程模型

    参数在评估期间不可变；同一模型可以在多个线程中分别构图求值。
    """

    def __init__(self, config: ModelConfig, params: ModelParams):
        params.validate(parameter_shapes(config))
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "NeuralProcess":
        """随机初始化一个模型"""
        return cls(config, init_params(config, rng))

    # ---- 网络组件 ----

    def _mlp(self, graph: Graph, prefix: str, x) -> Tensor:
        layers = LAYERS[prefix]
        for i in range(layers):
            W = graph.param(f"{prefix}.{i}.W", self.params[f"{prefix}.{i}.W"])
            b = graph.param(f"{prefix}.{i}.b", self.params[f"{prefix}.{i}.b"])
            x = F.affine(x, W, b)
            if i < layers - 1:
                x = F.relu(x)
        return x

    def _split_latent(self, out: Tensor) -> DiagGaussian:
        d_z = self.config.d_z
        mu = F.slice_last(out, 0, d_z)
        sigma = latent_scale(F.slice_last(out, d_z, 2 * d_z), self.config.latent_sigma_head)
        return DiagGaussian(mu, sigma)

    def embed(self, graph: Graph, points: PointSet) -> Tensor:
        """逐点嵌入 s_i = h_φ(x_i, y_i)，返回 [n, d_s]"""
        return self.embed_arrays(graph, points.coords, points.values)

    def embed_arrays(self, graph: Graph, coords: np.ndarray, values: np.ndarray) -> Tensor:
        """批量逐点嵌入：coords [..., n, d_x]、values [..., n, d_y] -> [..., n, d_s]"""
        inputs = graph.constant(np.concatenate([coords, values], axis=-1))
        return self._mlp(graph, "h", inputs)

    def pool(self, graph: Graph, s: Tensor) -> Tensor:
        """s_C = ⊕ s_i"""
        return F.pool(s, self.config.pooling)

    def plain_posterior(self, graph: Graph, s_c: Tensor) -> DiagGaussian:
        """(μ_C, σ_C) = ρ_φ(s_C)，s_C 可以带前导 batch 轴"""
        self._require_head("plain")
        return self._split_latent(self._mlp(graph, "rho", s_c))

    def mixing(self, graph: Graph, s_c: Tensor, eps: np.ndarray) -> Tensor:
        """ψ = ρ_φ(s_C, ε)；eps 的前导轴决定 ψ 的 batch 形状"""
        self._require_head("sivi")
        eps = np.asarray(eps)
        batch = eps.shape[:-1]
        s = F.broadcast_to(s_c, batch + (self.config.d_s,)) if batch != s_c.shape[:-1] else s_c
        return self._mlp(graph, "rho", F.concat([s, graph.constant(eps)], axis=-1))

    def conditional_posterior(self, graph: Graph, s_c: Tensor, psi: Tensor) -> DiagGaussian:
        """q(z | ψ, C) = η_φ(s_C, ψ)"""
        self._require_head("sivi")
        batch = psi.shape[:-1]
        s = F.broadcast_to(s_c, batch + (self.config.d_s,)) if batch != s_c.shape[:-1] else s_c
        return self._split_latent(self._mlp(graph, "eta", F.concat([s, psi], axis=-1)))

    def posterior_from_embedding(
        self, graph: Graph, s_c: Tensor, eps: Optional[np.ndarray] = None
    ) -> DiagGaussian:
        """由池化嵌入得到后验；SIVI 头部默认取 ε = 0 的条件高斯"""
        if self.config.head == "plain":
            return self.plain_posterior(graph, s_c)
        if eps is None:
            eps = np.zeros(s_c.shape[:-1] + (self.config.d_eps,))
        return self.conditional_posterior(graph, s_c, self.mixing(graph, s_c, eps))

    # ---- 编码 / 解码 ----

    def encode_np(self, graph: Graph, context: PointSet) -> NPEncoding:
        """普通编码器：返回 s_C 与 q(z|C)

        Raises:
            EmptyContextError: 上下文为空
            HeadMismatchError: 模型不是普通头部
        """
        self._require_head("plain")
        s_c = self.pool(graph, self.embed(graph, context.require_nonempty()))
        return NPEncoding(s_c, self.plain_posterior(graph, s_c))

    def encode_sivi(
        self,
        graph: Graph,
        context: PointSet,
        rng: np.random.Generator,
        eps: Optional[np.ndarray] = None,
        draws: Tuple[int, ...] = (),
    ) -> SiviEncoding:
        """SIVI 编码器：ε ~ N(0, I)，ψ = ρ_φ(s_C, ε)，q(z|ψ, C) = η_φ(s_C, ψ)

        Args:
            graph: 计算图
            context: 上下文集合
            rng: 随机流
            eps: 指定 ε（None 时从 rng 抽取）
            draws: ε 的前导采样形状

        Returns:
            SiviEncoding: s_C、ψ 与条件高斯
        """
        self._require_head("sivi")
        s_c = self.pool(graph, self.embed(graph, context.require_nonempty()))
        if eps is None:
            eps = standard_normal(rng, tuple(draws) + (self.config.d_eps,), dtype=graph.dtype)
        psi = self.mixing(graph, s_c, eps)
        return SiviEncoding(s_c, psi, self.conditional_posterior(graph, s_c, psi), np.asarray(eps))

    def sample_latents(self, graph: Graph, context: PointSet, k: int, rng: np.random.Generator) -> Tensor:
        """从 q(z|C) 抽取 k 个 z（SIVI 头部每个 z 使用独立的 ψ），返回 [k, d_z]"""
        if self.config.head == "plain":
            z, _ = reparam_sample(self.encode_np(graph, context).posterior, rng, (k,))
            return z
        encoding = self.encode_sivi(graph, context, rng, draws=(k,))
        z, _ = reparam_sample(encoding.posterior, rng)
        return z

    def decode(self, graph: Graph, coords: np.ndarray, z: Tensor) -> DiagGaussian:
        """解码器 g_θ(x'_j, z)

        Args:
            graph: 计算图
            coords: 目标坐标 [m, d_x]
            z: 任务嵌入 [d_z]，或 k 个嵌入 [k, d_z]

        Returns:
            DiagGaussian: 第一轴对应目标点，形状 [m, d_y]（z 为一维）或 [m, k, d_y]
        """
        coords = np.asarray(coords)
        if coords.ndim != 2 or len(coords) < 1:
            raise ShapeError(f"目标坐标应为非空 [m, d_x]，当前 {coords.shape}")
        c = self.config
        m = len(coords)
        if z.ndim == 1:
            x = graph.constant(coords)
            zb = F.broadcast_to(z, (m, c.d_z))
        else:
            k = z.shape[0]
            x = graph.constant(np.broadcast_to(coords[:, None, :], (m, k, c.d_x)))
            zb = F.broadcast_to(z, (m, k, c.d_z))
        out = self._mlp(graph, "g", F.concat([x, zb], axis=-1))
        if c.obs_variance == "learned":
            mu = F.slice_last(out, 0, c.d_y)
            sigma = observation_scale(F.slice_last(out, c.d_y, 2 * c.d_y))
        else:
            mu = out
            sigma = graph.constant(np.full(mu.shape, c.sigma0))
        return DiagGaussian(mu, sigma)

    def log_likelihood(self, graph: Graph, target: PointSet, z: Tensor) -> Tensor:
        """log p(y_T | z, x_T)；z 为 [k, d_z] 时返回 [k]"""
        prediction = self.decode(graph, target.coords, z)
        values = target.values if z.ndim == 1 else target.values[:, None, :]
        return F.sum(logpdf(prediction, values), axis=0)

    def sample_completion(
        self,
        context: PointSet,
        shape: Tuple[int, int],
        k: int,
        rng: np.random.Generator,
        copy_context: bool = False,
        chunk_size: int = 100,
    ) -> Completion:
        """条件补全：抽取 z₁..z_k，在整幅像素网格上解码均值图

        Args:
            context: 上下文集合（需带像素下标才能回填）
            shape: 图像尺寸 (H, W)
            k: 采样次数
            rng: 随机流
            copy_context: 是否把上下文取值直接复制到输出
            chunk_size: 每次解码的 z 数量

        Returns:
            Completion: k 张均值图与 k 张图的逐像素标准差
        """
        if k < 1:
            raise ValueError("k 必须至少为 1")
        height, width = shape
        grid = pixel_coords(height, width, np.arange(height * width))

        graph = Graph(requires_grad=False)
        latents = self.sample_latents(graph, context, k, rng).value

        means = np.empty((k, height * width), dtype=np.float64)
        for start in range(0, k, chunk_size):
            chunk = Graph(requires_grad=False)
            z = chunk.constant(latents[start:start + chunk_size])
            mu = self.decode(chunk, grid, z).mu.value  # [m, c, 1]
            means[start:start + len(z.value)] = mu[..., 0].T
        means = means.reshape(k, height, width)

        if copy_context:
            if context.indices is None:
                raise ShapeError("copy_context 需要上下文的像素下标")
            rows, cols = np.divmod(context.indices, width)
            means[:, rows, cols] = context.values[:, 0]
        logger.debug(f"条件补全完成: k={k}, context={len(context)}")
        return Completion(means=means, std=means.std(axis=0))

    def _require_head(self, head: str) -> None:
        if self.config.head != head:
            raise HeadMismatchError(f"该操作需要 {head} 头部，当前为 {self.config.head}")
