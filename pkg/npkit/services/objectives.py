"""训练与评估目标：ELBO、NP 目标、SIVI 下界、IWAE 预测对数似然

所有目标都是 (参数, 任务, 随机流) 的纯函数，结果为 nat。
先验 p(z) 取标准正态 N(0, I)。
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from npkit.core.exceptions import HeadMismatchError, OverlapError
from npkit.engine import functional as F
from npkit.engine.distributions import DiagGaussian, kl, logpdf, reparam_sample
from npkit.engine.graph import Graph, Tensor
from npkit.engine.random import standard_normal
from npkit.models.domain import PointSet
from npkit.services.neural_process import NeuralProcess


@dataclass
class ObjectiveValue:
    """目标值及其可分离的分项"""
    value: Tensor
    reconstruction: float
    divergence: float
    extras: Dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.value.item()


def elbo(
    graph: Graph,
    model: NeuralProcess,
    target: PointSet,
    rng: np.random.Generator,
    sivi_k: int = 16,
) -> ObjectiveValue:
    """单任务 ELBO：E_q(z|x,y)[log p(y|z,x)] − KL(q(z|x,y) ‖ p(z))，单样本估计

    SIVI 头部没有解析 KL，转而计算 sivi_bound。
    """
    if model.config.head == "sivi":
        return sivi_bound(graph, model, target, sivi_k, rng)
    posterior = model.encode_np(graph, target).posterior
    z, _ = reparam_sample(posterior, rng)
    recon = model.log_likelihood(graph, target, z)
    divergence = kl(posterior, DiagGaussian.standard(graph, model.config.d_z))
    return ObjectiveValue(F.sub(recon, divergence), recon.item(), divergence.item())


def np_objective(
    graph: Graph,
    model: NeuralProcess,
    context: PointSet,
    target: PointSet,
    rng: np.random.Generator,
    form: str = "sampled",
) -> ObjectiveValue:
    """NP 目标：z ~ q(z|T)，log p(y_T|z, x_T) + log q(z|C) − log q(z|T)

    同时给出解析形式 E[log p(y_T|z, x_T)] − KL(q(·|T) ‖ q(·|C))，存于 extras["analytic"]。

    Args:
        graph: 计算图
        model: 普通头部模型
        context: 上下文集合 C（C ⊆ T）
        target: 目标集合 T
        rng: 随机流
        form: "sampled" 以采样形式作为 value，"analytic" 以解析 KL 形式作为 value
    """
    if model.config.head != "plain":
        raise HeadMismatchError("NP 目标需要普通头部")
    q_context = model.encode_np(graph, context).posterior
    q_target = model.encode_np(graph, target).posterior
    z, _ = reparam_sample(q_target, rng)
    recon = model.log_likelihood(graph, target, z)
    sampled_div = F.sub(logpdf(q_target, z), logpdf(q_context, z))
    analytic_div = kl(q_target, q_context)
    sampled = F.sub(recon, sampled_div)
    analytic = F.sub(recon, analytic_div)
    value = sampled if form == "sampled" else analytic
    return ObjectiveValue(
        value,
        recon.item(),
        sampled_div.item() if form == "sampled" else analytic_div.item(),
        {
            "sampled": sampled.item(),
            "analytic": analytic.item(),
            "sampled_divergence": sampled_div.item(),
            "analytic_divergence": analytic_div.item(),
        },
    )


def _context_log_density(
    graph: Graph, model: NeuralProcess, context: PointSet, z: Tensor, K: int, rng: np.random.Generator
) -> Tensor:
    """隐式混合 q(z|C) 的对数密度估计：logsumexp_k log q(z|C, ψ_k) − log K"""
    K = max(K, 1)
    encoding = model.encode_sivi(graph, context, rng, draws=(K,))
    return F.sub(F.logsumexp(logpdf(encoding.posterior, z)), float(np.log(K)))


def sivi_bound(
    graph: Graph,
    model: NeuralProcess,
    target: PointSet,
    K: int,
    rng: np.random.Generator,
    prior: str = "prior",
    context: Optional[PointSet] = None,
) -> ObjectiveValue:
    """SIVI 下界

    联合抽取 (ψ₀, z)，再独立抽取 ψ₁..ψ_K：
    log p(y|z,x) + log p(z) − [logsumexp_{k=0..K} log q(z|x, ψ_k) − log(K+1)]

    Args:
        graph: 计算图
        model: SIVI 头部模型
        target: 有监督数据 (x, y)
        K: 额外的 ψ 数量，K ≥ 0
        rng: 随机流
        prior: "prior" 使用 N(0, I)；"context" 用 q(z|C) 的估计代替 p(z)（NP 风格变体）
        context: prior="context" 时的上下文集合
    """
    if model.config.head != "sivi":
        raise HeadMismatchError("SIVI 下界需要 SIVI 头部")
    if K < 0:
        raise ValueError("K 必须非负")
    s_t = model.pool(graph, model.embed(graph, target.require_nonempty()))
    eps = standard_normal(rng, (K + 1, model.config.d_eps), dtype=graph.dtype)
    psi = model.mixing(graph, s_t, eps)
    conditionals = model.conditional_posterior(graph, s_t, psi)      # batch [K+1]
    first = DiagGaussian(F.take(conditionals.mu, [0]), F.take(conditionals.sigma, [0]))
    z, _ = reparam_sample(first, rng)
    z = F.sum(z, axis=0)                                                # [d_z]

    log_mixture = F.sub(F.logsumexp(logpdf(conditionals, z)), float(np.log(K + 1)))
    if prior == "context":
        if context is None:
            raise ValueError("prior='context' 需要上下文集合")
        log_prior = _context_log_density(graph, model, context, z, K, rng)
    else:
        log_prior = logpdf(DiagGaussian.standard(graph, model.config.d_z), z)
    recon = model.log_likelihood(graph, target, z)
    divergence = F.sub(log_mixture, log_prior)
    return ObjectiveValue(F.sub(recon, divergence), recon.item(), divergence.item(), {"K": float(K)})


def _check_disjoint(context: PointSet, target: PointSet) -> None:
    if context.indices is not None and target.indices is not None:
        overlap = np.intersect1d(context.indices, target.indices)
        if len(overlap):
            raise OverlapError(f"上下文与目标有 {len(overlap)} 个重叠像素")
        return
    shared = {tuple(c) for c in context.coords} & {tuple(c) for c in target.coords}
    if shared:
        raise OverlapError(f"上下文与目标有 {len(shared)} 个重叠坐标")


def iwae_loglik(
    graph: Graph,
    model: NeuralProcess,
    context: PointSet,
    target: PointSet,
    K: int,
    rng: np.random.Generator,
    chunk_size: Optional[int] = None,
) -> Tensor:
    """按 |T| 归一化的 IWAE 预测对数似然

    (1/|T|) · log (1/K) Σ_k p(y_T|x_T, z_k)，z_k ~ q(z|C)

    Raises:
        OverlapError: 上下文与目标相交
    """
    if K < 1:
        raise ValueError("K 必须至少为 1")
    _check_disjoint(context, target)
    latents = model.sample_latents(graph, context, K, rng)
    chunk_size = chunk_size or K
    parts = [
        model.log_likelihood(graph, target, F.take(latents, np.arange(start, min(start + chunk_size, K))))
        for start in range(0, K, chunk_size)
    ]
    loglik = parts[0] if len(parts) == 1 else F.concat(parts, axis=0)
    return F.mul(F.sub(F.logsumexp(loglik), float(np.log(K))), 1.0 / len(target))


def iwae_bound(
    graph: Graph,
    model: NeuralProcess,
    target: PointSet,
    K: int,
    rng: np.random.Generator,
) -> Tensor:
    """以编码器为提议分布的重要性加权边际下界（未归一化）

    log (1/K) Σ_k p(y|z_k, x) p(z_k) / q(z_k|x, y)，z_k ~ q(z|x, y)
    """
    if model.config.head != "plain":
        raise HeadMismatchError("iwae_bound 需要普通头部")
    if K < 1:
        raise ValueError("K 必须至少为 1")
    posterior = model.encode_np(graph, target).posterior
    z, _ = reparam_sample(posterior, rng, (K,))
    prior = DiagGaussian.standard(graph, model.config.d_z)
    weights = F.sub(F.add(model.log_likelihood(graph, target, z), logpdf(prior, z)), logpdf(posterior, z))
    return F.sub(F.logsumexp(weights), float(np.log(K)))
