"""训练业务服务：任务采样、Adam、学习率调度、训练循环与留出集评估"""

import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from npkit.core.config import settings
from npkit.core.exceptions import (
    EmptyImageError,
    NonFiniteError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from npkit.core.logging import logger
from npkit.engine import functional as F
from npkit.engine.graph import Graph
from npkit.engine.random import make_rng
from npkit.models.domain import (
    Checkpoint,
    EpochMetrics,
    ImageDataset,
    ModelParams,
    OptimizerState,
    PointSet,
    TaskInstance,
)
from npkit.models.schemas import ModelConfig, TrainConfig
from npkit.services.neural_process import NeuralProcess, init_params
from npkit.services.objectives import ObjectiveValue, elbo, iwae_loglik, np_objective, sivi_bound
from npkit.storage.checkpoint import save_checkpoint
from npkit.storage.tables import write_tsv

# 随机流标签：初始化 / 每个 epoch 的图像顺序 / 每个任务 / 评估
STREAM_INIT = 0
STREAM_ORDER = 1
STREAM_TASK = 2
STREAM_EVAL = 3

METRICS_HEADER = ["epoch", "objective", "lr", "seconds"]


def _clamp_range(lo: int, hi: int, limit: int) -> Tuple[int, int]:
    """把半开区间 [lo, hi) 裁剪到 [0, limit]，保证非空"""
    lo = min(lo, limit)
    hi = max(min(hi, limit + 1), lo + 1)
    return lo, hi


def sample_task(
    image: np.ndarray,
    image_id: int,
    rng: np.random.Generator,
    n_range: Tuple[int, int] = (1, 200),
    mprime_range: Tuple[int, int] = (0, 200),
) -> TaskInstance:
    """为一幅图像采样训练任务

    n ~ U[n_range)、m' ~ U[mprime_range)，无放回抽取 n + m' 个像素；
    前 n 个作为上下文，全部作为目标。区间超出像素数时按像素数裁剪。

    Args:
        image: 图像 [H, W]
        image_id: 图像编号
        rng: 随机流
        n_range: 上下文大小的半开区间
        mprime_range: 额外目标点数的半开区间

    Returns:
        TaskInstance: 满足 C ⊆ T 的任务

    Raises:
        EmptyImageError: 图像没有像素
    """
    pixels = int(np.size(image))
    if pixels == 0:
        raise EmptyImageError("图像没有任何像素")
    n_lo, n_hi = _clamp_range(max(n_range[0], 1), n_range[1], pixels)
    n = int(rng.integers(n_lo, n_hi))
    m_lo, m_hi = _clamp_range(mprime_range[0], mprime_range[1], pixels - n)
    m_extra = int(rng.integers(m_lo, m_hi))
    drawn = rng.choice(pixels, size=n + m_extra, replace=False)
    return TaskInstance(image_id=image_id, context_indices=drawn[:n], target_indices=drawn)


def sample_eval_task(
    image: np.ndarray,
    rng: np.random.Generator,
    n_range: Tuple[int, int] = (1, 200),
) -> Tuple[PointSet, PointSet]:
    """评估任务：上下文大小 n ~ U[n_range)，目标为其余全部像素（二者不相交）"""
    pixels = int(np.size(image))
    if pixels < 2:
        raise EmptyImageError("评估任务至少需要两个像素")
    n_lo, n_hi = _clamp_range(max(n_range[0], 1), n_range[1], pixels - 1)
    n = int(rng.integers(n_lo, n_hi))
    order = rng.permutation(pixels)
    return PointSet.from_image(image, order[:n]), PointSet.from_image(image, order[n:])


def init_optimizer_state(params: ModelParams, config: TrainConfig) -> OptimizerState:
    """为每个参数建立零初始化的一阶 / 二阶矩"""
    return OptimizerState(
        m={name: np.zeros_like(value) for name, value in params.items()},
        v={name: np.zeros_like(value) for name, value in params.items()},
        step=0,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
    )


def adam_step(
    state: OptimizerState,
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    lr: float,
) -> Tuple[ModelParams, OptimizerState]:
    """带偏差修正的 Adam 更新（沿梯度的反方向，即最小化）

    Args:
        state: 优化器状态
        params: 当前参数
        grads: 待最小化损失对各参数的梯度
        lr: 学习率

    Returns:
        Tuple[ModelParams, OptimizerState]: 新参数与新状态（输入不被修改）

    Raises:
        NonFiniteGradientError: 某个梯度包含 NaN / Inf
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads[name].astype(value.dtype, copy=False)
        m = b1 * state.m[name] + (1.0 - b1) * grad
        v = b2 * state.v[name] + (1.0 - b2) * np.square(grad)
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params[name] = (value - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(m=new_m, v=new_v, step=step, beta1=b1, beta2=b2, eps=state.eps)
    return ModelParams(new_params), new_state


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """按全局 L2 范数裁剪梯度"""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def lr_at(config: TrainConfig, epoch: int) -> float:
    """第 epoch 个 epoch（从 0 计）的学习率

    启用调度时，每越过一个里程碑乘以 lr_factor；否则保持基础学习率。
    """
    if epoch < 0:
        raise ValueError("epoch 必须非负")
    if not config.lr_schedule:
        return config.lr
    passed = sum(1 for milestone in config.lr_milestones if epoch >= milestone)
    return config.lr * config.lr_factor ** passed


def task_objective(
    graph: Graph,
    model: NeuralProcess,
    config: TrainConfig,
    context: PointSet,
    target: PointSet,
    rng: np.random.Generator,
) -> ObjectiveValue:
    """按训练配置计算单个任务的目标值"""
    if config.objective == "elbo":
        return elbo(graph, model, target, rng, sivi_k=config.sivi_k)
    if config.objective == "np":
        return np_objective(graph, model, context, target, rng, form=config.np_form)
    return sivi_bound(
        graph, model, target, config.sivi_k, rng,
        prior=config.sivi_prior,
        context=context if config.sivi_prior == "context" else None,
    )


class TrainingService:
    """训练业务服务

    每个任务拥有独立的计算图和随机流 (seed, epoch, batch, slot)，
    因此结果与工作线程数无关；梯度按槽位顺序求和后取平均，由唯一的写者更新参数。
    """

    def __init__(
        self,
        train_config: TrainConfig,
        model_config: ModelConfig,
        workers: Optional[int] = None,
        progress: bool = True,
    ):
        self.train_config = train_config
        self.model_config = model_config
        self.workers = max(1, workers if workers is not None else settings.workers)
        self.progress = progress

    def initial_checkpoint(self) -> Checkpoint:
        """按种子初始化参数与优化器状态"""
        params = init_params(self.model_config, make_rng(self.train_config.seed, STREAM_INIT))
        return Checkpoint(
            model_config=self.model_config,
            params=params,
            train_config=self.train_config,
            seed=self.train_config.seed,
            epoch=0,
            optimizer=init_optimizer_state(params, self.train_config),
        )

    def _task_gradients(
        self,
        model: NeuralProcess,
        image: np.ndarray,
        image_id: int,
        stream: Tuple[int, ...],
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        config = self.train_config
        rng = make_rng(config.seed, STREAM_TASK, *stream)
        task = sample_task(image, image_id, rng, config.n_range, config.mprime_range)
        context, target = task.materialize(image)
        graph = Graph()
        values = [
            task_objective(graph, model, config, context, target, rng).value
            for _ in range(config.z_samples)
        ]
        total = values[0]
        for value in values[1:]:
            total = F.add(total, value)
        objective = F.mul(total, 1.0 / config.z_samples)
        return objective.item(), graph.backward(objective)

    def train_batch(
        self,
        checkpoint: Checkpoint,
        dataset: ImageDataset,
        image_ids: np.ndarray,
        epoch: int,
        batch: int,
        lr: float,
        pool: Optional[ThreadPoolExecutor] = None,
    ) -> Tuple[Checkpoint, float]:
        """对一个批次做一次 Adam 更新，返回新检查点与批次平均目标值

        Raises:
            TrainingDivergedError: 目标值或梯度出现非有限值
        """
        model = NeuralProcess(self.model_config, checkpoint.params)

        def run(slot: int):
            image_id = int(image_ids[slot])
            return self._task_gradients(model, dataset.images[image_id], image_id, (epoch, batch, slot))

        try:
            slots = range(len(image_ids))
            results = list(pool.map(run, slots)) if pool is not None else [run(s) for s in slots]
            # 按槽位顺序归约，结果与线程调度无关
            summed = {name: np.zeros_like(value) for name, value in checkpoint.params.items()}
            for _, grads in results:
                for name, grad in grads.items():
                    summed[name] += grad
            scale = -1.0 / len(results)
            loss_grads = {name: g * scale for name, g in summed.items()}
            if self.train_config.grad_clip is not None:
                loss_grads = clip_gradients(loss_grads, self.train_config.grad_clip)
            params, optimizer = adam_step(checkpoint.optimizer, checkpoint.params, loss_grads, lr)
        except (NonFiniteError, NonFiniteGradientError) as e:
            raise TrainingDivergedError(epoch, batch, [int(i) for i in image_ids], e) from e

        mean_objective = float(np.mean([value for value, _ in results]))
        updated = Checkpoint(
            model_config=checkpoint.model_config,
            params=params,
            train_config=checkpoint.train_config,
            seed=checkpoint.seed,
            epoch=checkpoint.epoch,
            optimizer=optimizer,
        )
        return updated, mean_objective

    def train(
        self,
        dataset: ImageDataset,
        out_dir: Optional[Path] = None,
        resume: Optional[Checkpoint] = None,
    ) -> Tuple[Checkpoint, List[EpochMetrics]]:
        """训练神经过程模型

        每个 epoch 打乱图像顺序，按 batch_size 分批，每幅图像采样一个任务，
        以 Adam 最大化批次平均目标值。

        Args:
            dataset: 训练图像
            out_dir: 输出目录（指标表与检查点），None 表示不落盘
            resume: 从该检查点继续训练（参数、Adam 状态与已完成 epoch 数）

        Returns:
            Tuple[Checkpoint, List[EpochMetrics]]: 最终检查点与本次运行的每 epoch 指标
        """
        if len(dataset) == 0:
            raise EmptyImageError("训练集为空")
        config = self.train_config
        checkpoint = resume if resume is not None else self.initial_checkpoint()
        if checkpoint.optimizer is None:
            checkpoint.optimizer = init_optimizer_state(checkpoint.params, config)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)

        metrics: List[EpochMetrics] = []
        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        logger.info(
            f"开始训练: objective={config.objective}, pooling={self.model_config.pooling}, "
            f"images={len(dataset)}, epochs={checkpoint.epoch}->{config.epochs}, workers={self.workers}"
        )
        try:
            for epoch in range(checkpoint.epoch, config.epochs):
                started = time.perf_counter()
                lr = lr_at(config, epoch)
                order = make_rng(config.seed, STREAM_ORDER, epoch).permutation(len(dataset))
                batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
                totals = []
                for batch, image_ids in enumerate(
                    tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not self.progress)
                ):
                    checkpoint, value = self.train_batch(checkpoint, dataset, image_ids, epoch, batch, lr, pool)
                    totals.append(value * len(image_ids))
                checkpoint.epoch = epoch + 1
                record = EpochMetrics(
                    epoch=epoch,
                    objective=float(np.sum(totals) / len(dataset)),
                    lr=lr,
                    seconds=time.perf_counter() - started,
                )
                metrics.append(record)
                logger.info(f"epoch={epoch} 完成: objective={record.objective:.4f}, lr={lr:.2e}, 用时 {record.seconds:.1f}s")

                if out_dir is not None:
                    write_tsv(out_dir / "metrics.tsv", METRICS_HEADER, [m.to_row() for m in metrics])
                    if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                        save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:03d}.npc", checkpoint)
        except TrainingDivergedError as e:
            logger.error(f"训练失败: {e}")
            raise
        finally:
            if pool is not None:
                pool.shutdown()

        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.npc", checkpoint)
        return checkpoint, metrics


def train(
    train_config: TrainConfig,
    model_config: ModelConfig,
    dataset: ImageDataset,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
) -> Tuple[Checkpoint, List[EpochMetrics]]:
    """训练入口的函数形式"""
    return TrainingService(train_config, model_config, workers=workers).train(dataset, out_dir)


def evaluate_loglik(
    model: NeuralProcess,
    dataset: ImageDataset,
    K: int,
    seed: int,
    n_range: Tuple[int, int] = (1, 200),
    chunk_size: Optional[int] = None,
    progress: bool = True,
) -> np.ndarray:
    """在留出图像上计算按目标点归一化的 IWAE 预测对数似然

    每幅图像一个任务：上下文大小 n ~ U[n_range)，目标为其余全部像素，二者不相交。

    Returns:
        np.ndarray: 每幅图像一个值（nat / 像素）
    """
    chunk_size = chunk_size or settings.eval_chunk_size
    scores = np.empty(len(dataset), dtype=np.float64)
    try:
        for image_id in tqdm(range(len(dataset)), desc="IWAE 评估", disable=not progress):
            rng = make_rng(seed, STREAM_EVAL, image_id)
            context, target = sample_eval_task(dataset.images[image_id], rng, n_range)
            graph = Graph(requires_grad=False)
            scores[image_id] = iwae_loglik(graph, model, context, target, K, rng, chunk_size).item()
    except Exception as e:
        logger.error(f"IWAE 评估失败: {e}")
        raise
    return scores
