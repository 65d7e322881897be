"""后验收缩与校准诊断

所有诊断只读取冻结的模型参数，在不记录梯度的计算图上批量求值。
SIVI 头部的 KL 与贪心准则使用 ε = 0 的条件高斯；熵曲线对 16 个 ψ 取平均。
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats
from tqdm import tqdm

from npkit.core.config import settings
from npkit.core.exceptions import ContextSizeError, MissingClassError, PoolingMismatchError, ShapeError
from npkit.core.logging import logger
from npkit.engine.distributions import DiagGaussian, entropy, kl
from npkit.engine.graph import Graph
from npkit.engine.random import make_rng
from npkit.models.domain import (
    ClassifierModel,
    EmbeddingTrace,
    EntropyCurve,
    GreedySelection,
    ImageDataset,
    PointSet,
    pixel_coords,
)
from npkit.services.classifier_service import SIZE_BUCKETS, predict, predict_proba
from npkit.services.neural_process import NeuralProcess

SIVI_ENTROPY_DRAWS = 16
CRITERIA = ("kl_to_full", "entropy")
EMBEDDING_MODES = ("random", "greedy_entropy", "greedy_kl")


def _pixel_grid(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    height, width = image.shape
    pixels = height * width
    return pixel_coords(height, width, np.arange(pixels)), image.reshape(pixels, 1).astype(np.float64)


def _pixel_embeddings(model: NeuralProcess, image: np.ndarray) -> np.ndarray:
    """整幅图像每个像素的嵌入 s_i，[P, d_s]"""
    graph = Graph(dtype=np.float64, requires_grad=False)
    coords, values = _pixel_grid(image)
    return model.embed_arrays(graph, coords, values).value


def _posterior_entropy(model: NeuralProcess, pooled: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """池化嵌入 [..., d_s] 对应后验的熵 [...]

    SIVI 头部给出 16 个 ψ 下条件高斯熵的平均；rng 为 None 时取 ε = 0。
    """
    graph = Graph(dtype=np.float64, requires_grad=False)
    s_c = graph.constant(pooled)
    if model.config.head == "plain" or rng is None:
        return entropy(model.posterior_from_embedding(graph, s_c)).value
    eps = rng.standard_normal((SIVI_ENTROPY_DRAWS,) + pooled.shape[:-1] + (model.config.d_eps,))
    return entropy(model.posterior_from_embedding(graph, s_c, eps)).value.mean(axis=0)


def _full_posterior(model: NeuralProcess, graph: Graph, pixel_embeddings: np.ndarray):
    pooled = _pool(model, pixel_embeddings)
    return model.posterior_from_embedding(graph, graph.constant(pooled))


def _pool(model: NeuralProcess, s: np.ndarray) -> np.ndarray:
    return s.max(axis=-2) if model.config.pooling == "max" else s.mean(axis=-2)


def entropy_curve(
    model: NeuralProcess,
    images: np.ndarray,
    sizes: Sequence[int],
    reps: int,
    seed: int,
    train_max: int = 199,
    progress: bool = True,
) -> EntropyCurve:
    """后验熵随上下文大小的变化

    对每个大小 n、每幅图像抽取 reps 个随机上下文集合，计算编码后验的熵并汇总均值与标准差。

    Args:
        model: 神经过程模型
        images: 图像 [N, H, W]
        sizes: 严格递增的上下文大小
        reps: 每幅图像每个大小的重复次数
        seed: 随机种子
        train_max: 训练中出现过的最大上下文大小，超过者标记为训练范围外

    Returns:
        EntropyCurve: 每个大小的熵均值、标准差与范围外标记

    Raises:
        ContextSizeError: 大小超过像素数或不严格递增
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    pixels = images.shape[1] * images.shape[2]
    sizes = [int(n) for n in sizes]
    if any(n < 1 or n > pixels for n in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ContextSizeError(f"上下文大小必须严格递增且位于 [1, {pixels}]: {sizes}")
    if reps < 1:
        raise ValueError("reps 必须至少为 1")

    means, stds = [], []
    for n in tqdm(sizes, desc="熵曲线", disable=not progress):
        values = []
        for image_id, image in enumerate(images):
            rng = make_rng(seed, n, image_id)
            coords, pixel_values = _pixel_grid(image)
            chosen = np.stack([rng.permutation(pixels)[:n] for _ in range(reps)])    # [reps, n]
            graph = Graph(dtype=np.float64, requires_grad=False)
            s = model.embed_arrays(graph, coords[chosen], pixel_values[chosen]).value
            values.append(_posterior_entropy(model, _pool(model, s), rng))
        values = np.concatenate(values)
        means.append(float(values.mean()))
        stds.append(float(values.std()))
        logger.debug(f"熵曲线: n={n}, mean={means[-1]:.4f}")
    return EntropyCurve(sizes=sizes, means=means, stds=stds, outside_training=[n > train_max for n in sizes])


def greedy_select(
    model: NeuralProcess,
    image: np.ndarray,
    budget: int,
    criterion: str = "kl_to_full",
    candidate_cap: Optional[int] = None,
    seed: int = 0,
) -> GreedySelection:
    """贪心选择上下文像素

    每一步对所有未观测像素（或随机子集）计算加入后的准则值，选取最小者；
    平局取像素编号最小者。kl_to_full 为 KL(q(z|整幅图像) ‖ q(z|C))。

    Args:
        model: 神经过程模型
        image: 图像 [H, W]
        budget: 选取的像素数
        criterion: "kl_to_full" 或 "entropy"
        candidate_cap: 每步最多评估的候选数，None 表示全部
        seed: 候选子抽样的随机种子

    Returns:
        GreedySelection: 选点顺序、准则轨迹与熵
    """
    if criterion not in CRITERIA:
        raise ValueError(f"未知贪心准则: {criterion}")
    pixels = image.size
    if not 0 <= budget <= pixels:
        raise ContextSizeError(f"budget={budget} 超出像素数 {pixels}")

    s = _pixel_embeddings(model, image)
    graph = Graph(dtype=np.float64, requires_grad=False)
    full = _full_posterior(model, graph, s)
    full_entropy = float(entropy(full).value)
    full_mu, full_sigma = full.mu.value, full.sigma.value
    rng = make_rng(seed)

    remaining = np.ones(pixels, dtype=bool)
    running_max: Optional[np.ndarray] = None
    running_sum = np.zeros(s.shape[1])
    order: List[int] = []
    raw_trace: List[float] = []
    entropies: List[float] = []
    for step in range(budget):
        candidates = np.flatnonzero(remaining)
        if candidate_cap is not None and len(candidates) > candidate_cap:
            candidates = np.sort(rng.choice(candidates, size=candidate_cap, replace=False))
        if model.config.pooling == "max":
            pooled = s[candidates] if running_max is None else np.maximum(running_max, s[candidates])
        else:
            pooled = (running_sum + s[candidates]) / (step + 1)
        graph = Graph(dtype=np.float64, requires_grad=False)
        posterior = model.posterior_from_embedding(graph, graph.constant(pooled))
        candidate_entropy = entropy(posterior).value
        if criterion == "entropy":
            scores = candidate_entropy
        else:
            reference = DiagGaussian(graph.constant(full_mu), graph.constant(full_sigma))
            scores = kl(reference, posterior).value
        best = int(np.argmin(scores))
        pixel = int(candidates[best])
        order.append(pixel)
        raw_trace.append(float(scores[best]))
        entropies.append(float(candidate_entropy[best]))
        remaining[pixel] = False
        running_max = pooled[best]
        running_sum = running_sum + s[pixel]
    trace = np.minimum.accumulate(raw_trace).tolist() if raw_trace else []
    return GreedySelection(criterion, order, trace, raw_trace, entropies, full_entropy)


def _mode_order(model: NeuralProcess, image: np.ndarray, mode: str, budget: int, seed: int) -> np.ndarray:
    if mode == "random":
        return make_rng(seed, 0).permutation(image.size)[:budget]
    criterion = "entropy" if mode == "greedy_entropy" else "kl_to_full"
    return np.asarray(greedy_select(model, image, budget, criterion, seed=seed).order)


def embedding_stats(
    model: NeuralProcess,
    image: np.ndarray,
    modes: Sequence[str] = EMBEDDING_MODES,
    budget: Optional[int] = None,
    seed: int = 0,
) -> List[EmbeddingTrace]:
    """沿逐步增长的上下文序列统计 max 池化嵌入的平移 L1 范数与后验熵

    每一维减去所有方式、所有步骤中该维的最小值（共用同一平移），再求 L1 范数。

    Raises:
        PoolingMismatchError: 模型不是 max 池化
    """
    if model.config.pooling != "max":
        raise PoolingMismatchError("嵌入范数统计需要 max 池化")
    budget = image.size if budget is None else budget
    if not 1 <= budget <= image.size:
        raise ContextSizeError(f"budget={budget} 超出像素数 {image.size}")
    for mode in modes:
        if mode not in EMBEDDING_MODES:
            raise ValueError(f"未知上下文生成方式: {mode}")

    s = _pixel_embeddings(model, image)
    sequences = {
        mode: np.maximum.accumulate(s[_mode_order(model, image, mode, budget, seed)], axis=0)
        for mode in modes
    }
    shift = np.min(np.concatenate(list(sequences.values()), axis=0), axis=0)
    traces = []
    for mode, pooled in sequences.items():
        norms = np.sum(pooled - shift, axis=-1)
        entropies = _posterior_entropy(model, pooled)
        rho = stats.spearmanr(norms, entropies).statistic if len(norms) > 1 else float("nan")
        traces.append(EmbeddingTrace(
            mode=mode,
            sizes=list(range(1, budget + 1)),
            norms=norms.tolist(),
            entropies=entropies.tolist(),
            rank_correlation=float(rho),
        ))
        logger.info(f"嵌入统计: mode={mode}, spearman={rho:.3f}")
    return traces


def collect_size_embeddings(
    model: NeuralProcess,
    images: np.ndarray,
    per_image: int,
    seed: int,
    buckets: Sequence[Tuple[int, int]] = SIZE_BUCKETS,
) -> Tuple[np.ndarray, np.ndarray]:
    """为上下文大小分类器生成 (s_C, n) 数据

    先均匀抽取大小桶，再在桶内均匀抽取 n（不超过像素数）。
    """
    images = np.asarray(images)
    pixels = images.shape[1] * images.shape[2]
    usable = [(lo, min(hi, pixels)) for lo, hi in buckets if lo <= pixels]
    embeddings, sizes = [], []
    for image_id, image in enumerate(images):
        rng = make_rng(seed, image_id)
        coords, values = _pixel_grid(image)
        for _ in range(per_image):
            lo, hi = usable[int(rng.integers(len(usable)))]
            n = int(rng.integers(lo, hi + 1))
            chosen = rng.permutation(pixels)[:n]
            graph = Graph(dtype=np.float64, requires_grad=False)
            s = model.embed_arrays(graph, coords[chosen], values[chosen]).value
            embeddings.append(_pool(model, s))
            sizes.append(n)
    return np.stack(embeddings), np.asarray(sizes, dtype=np.int64)


def inception_score_from_probs(probs: np.ndarray) -> float:
    """IS = exp(E_x[KL(p(y|x) ‖ p(y))])，p(y) 为类别后验的平均"""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) < 1:
        raise ShapeError(f"类别后验应为非空 [n, C]，当前 {probs.shape}")
    marginal = probs.mean(axis=0, keepdims=True)
    divergence = special.rel_entr(probs, marginal).sum(axis=1)
    return float(np.exp(divergence.mean()))


def inception_score(samples: np.ndarray, classifier: ClassifierModel) -> float:
    """样本图像 [n, H, W] 的 inception score"""
    samples = np.clip(np.asarray(samples), 0.0, 1.0)
    return inception_score_from_probs(predict_proba(classifier, samples.reshape(len(samples), -1)))


def reference_inception_score(images: np.ndarray, classifier: ClassifierModel) -> float:
    """真实图像的 inception score，作为上参考线"""
    return inception_score(images, classifier)


def inception_by_size(
    model: NeuralProcess,
    images: np.ndarray,
    sizes: Sequence[int],
    classifier: ClassifierModel,
    k: int,
    seed: int,
    context_sets: int = 10,
    chunk_size: Optional[int] = None,
    progress: bool = True,
) -> Dict[int, Tuple[float, float]]:
    """每个上下文大小在 context_sets 个随机上下文集合上的 IS 均值与标准差

    每个上下文集合抽取 k 个补全样本并计算一次 IS。
    """
    images = np.asarray(images)
    chunk_size = chunk_size or settings.eval_chunk_size
    height, width = images.shape[1:]
    results: Dict[int, Tuple[float, float]] = {}
    for n in tqdm(list(sizes), desc="Inception score", disable=not progress):
        if not 1 <= n <= height * width:
            raise ContextSizeError(f"上下文大小 {n} 超出像素数")
        scores = []
        for rep in range(context_sets):
            rng = make_rng(seed, n, rep)
            image = images[rep % len(images)]
            context = PointSet.from_image(image, rng.permutation(image.size)[:n])
            completion = model.sample_completion(context, (height, width), k, rng, chunk_size=chunk_size)
            scores.append(inception_score(completion.means, classifier))
        results[n] = (float(np.mean(scores)), float(np.std(scores)))
        logger.info(f"IS: n={n}, mean={results[n][0]:.3f}, std={results[n][1]:.3f}")
    return results


def elimination_sequence(
    train: ImageDataset,
    query: np.ndarray,
    target_digit: int = 3,
    per_step: int = 10,
) -> List[PointSet]:
    """逐个排除其他数字的上下文序列

    第 0 个上下文只含左上角像素；之后依次对 d = 0..9，加入 |mean_target − mean_d|
    最大的 per_step 个尚未选中的像素（稳定排序，平局取编号小者），取值来自查询图像。

    Raises:
        MissingClassError: 训练集缺少某个数字
    """
    if train.labels is None:
        raise MissingClassError("训练集没有标签")
    present = set(np.unique(train.labels).tolist())
    missing = [d for d in range(10) if d not in present]
    if missing:
        raise MissingClassError(f"训练集缺少数字 {missing}")
    flat = train.images.reshape(len(train), -1)
    means = np.stack([flat[train.labels == d].mean(axis=0) for d in range(10)])

    chosen = [0]
    taken = np.zeros(flat.shape[1], dtype=bool)
    taken[0] = True
    contexts = [PointSet.from_image(query, chosen)]
    for digit in range(10):
        diff = np.abs(means[target_digit] - means[digit])
        ranked = np.argsort(-diff, kind="stable")
        picks = [int(p) for p in ranked if not taken[p]][:per_step]
        taken[picks] = True
        chosen.extend(picks)
        contexts.append(PointSet.from_image(query, chosen))
    return contexts


def prediction_histogram(
    model: NeuralProcess,
    context: PointSet,
    shape: Tuple[int, int],
    classifier: ClassifierModel,
    k: int,
    rng: np.random.Generator,
    chunk_size: Optional[int] = None,
) -> np.ndarray:
    """k 个补全样本的分类结果分布（10 个桶，和为 1）"""
    completion = model.sample_completion(context, shape, k, rng, chunk_size=chunk_size or settings.eval_chunk_size)
    samples = np.clip(completion.means, 0.0, 1.0).reshape(k, -1)
    counts = np.bincount(predict(classifier, samples), minlength=classifier.num_classes)
    return counts / counts.sum()
