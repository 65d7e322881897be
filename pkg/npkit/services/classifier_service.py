"""分类器业务服务：上下文大小分类器与数字分类器

两者都是两层隐藏层的前馈网络，在自研引擎上构图，用 Adam 最小化 softmax 交叉熵。
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats
from tqdm import tqdm

from npkit.core.exceptions import DegenerateLabelsError, ShapeError
from npkit.core.logging import logger
from npkit.engine import functional as F
from npkit.engine.graph import Graph, Tensor
from npkit.engine.random import make_rng
from npkit.models.domain import ClassifierModel, ClassifierReport, ImageDataset, ModelParams, OptimizerState
from npkit.services.training_service import adam_step

# 上下文大小分桶（闭区间）
SIZE_BUCKETS: Tuple[Tuple[int, int], ...] = (
    (1, 10), (11, 25), (26, 50), (51, 100), (101, 200), (201, 400), (401, 784),
)

CLASSIFIER_LAYERS = 3


def bucket_labels(buckets: Sequence[Tuple[int, int]] = SIZE_BUCKETS) -> List[str]:
    return [f"{lo}-{hi}" for lo, hi in buckets]


def bucketize(sizes, buckets: Sequence[Tuple[int, int]] = SIZE_BUCKETS) -> np.ndarray:
    """把上下文大小映射到桶编号"""
    sizes = np.asarray(sizes, dtype=np.int64)
    uppers = np.array([hi for _, hi in buckets])
    labels = np.searchsorted(uppers, sizes, side="left")
    if np.any(sizes < buckets[0][0]) or np.any(labels >= len(buckets)):
        raise ShapeError(f"上下文大小超出分桶范围 [{buckets[0][0]}, {buckets[-1][1]}]")
    return labels


def init_classifier(
    input_dim: int,
    num_classes: int,
    hidden: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ModelParams:
    widths = [input_dim, hidden, hidden, num_classes]
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"fc.{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        tensors[f"fc.{i}.b"] = np.zeros(fan_out, dtype=dtype)
    return ModelParams(tensors)


def classifier_logits(graph: Graph, model: ClassifierModel, features: np.ndarray) -> Tensor:
    """未归一化的类别对数几率 [B, C]"""
    x = graph.constant((np.asarray(features, dtype=np.float64) - model.shift) / model.scale)
    for i in range(CLASSIFIER_LAYERS):
        x = F.affine(x, graph.param(f"fc.{i}.W", model.params[f"fc.{i}.W"]),
                     graph.param(f"fc.{i}.b", model.params[f"fc.{i}.b"]))
        if i < CLASSIFIER_LAYERS - 1:
            x = F.relu(x)
    return x


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """平均 softmax 交叉熵：mean(logsumexp(l) − l[y])"""
    onehot = np.eye(logits.shape[-1])[labels]
    picked = F.sum(F.mul(logits, onehot), axis=-1)
    return F.mean(F.sub(F.logsumexp(logits, axis=-1), picked))


def predict_proba(model: ClassifierModel, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """类别后验 p(y|x)，每行和为 1"""
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[None, :]
    out = []
    for start in range(0, len(features), batch_size):
        graph = Graph(requires_grad=False)
        logits = classifier_logits(graph, model, features[start:start + batch_size]).value
        out.append(special.softmax(logits.astype(np.float64), axis=-1))
    return np.concatenate(out, axis=0)


def predict(model: ClassifierModel, features: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(model, features), axis=-1)


def fit_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    input_kind: str,
    seed: int,
    hidden: int = 128,
    epochs: int = 20,
    batch_size: int = 64,
    lr: float = 1e-3,
    class_names: Optional[List[str]] = None,
    progress: bool = True,
) -> ClassifierModel:
    """训练前馈分类器

    Args:
        features: 输入 [N, D]
        labels: 类别编号 [N]
        num_classes: 类别数
        input_kind: "embedding" 或 "image"
        seed: 随机种子（初始化与小批量顺序）
        hidden: 隐藏层宽度
        epochs: 训练轮数
        batch_size: 小批量大小
        lr: Adam 学习率

    Returns:
        ClassifierModel: 训练好的分类器

    Raises:
        DegenerateLabelsError: 训练标签只有一个类别
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DegenerateLabelsError("训练标签只包含一个类别")

    if input_kind == "image":
        shift, scale = np.zeros(features.shape[1]), np.ones(features.shape[1])
    else:
        shift = features.mean(axis=0)
        scale = np.maximum(features.std(axis=0), 1e-6)

    rng = make_rng(seed, 0)
    params = init_classifier(features.shape[1], num_classes, hidden, rng)
    model = ClassifierModel(params, num_classes, input_kind, shift, scale, class_names or [])
    state = OptimizerState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )
    try:
        for epoch in tqdm(range(epochs), desc=f"训练{input_kind}分类器", disable=not progress):
            order = make_rng(seed, 1, epoch).permutation(len(features))
            for start in range(0, len(order), batch_size):
                batch = order[start:start + batch_size]
                graph = Graph()
                loss = cross_entropy(classifier_logits(graph, model, features[batch]), labels[batch])
                params, state = adam_step(state, model.params, graph.backward(loss), lr)
                model.params = params
    except Exception as e:
        logger.error(f"训练分类器失败: {e}")
        raise
    return model


def evaluate_classifier(
    model: ClassifierModel,
    features: np.ndarray,
    labels: np.ndarray,
    chance: Optional[float] = None,
) -> ClassifierReport:
    """留出集准确率、混淆矩阵，以及相对随机猜测的单侧二项检验 p 值"""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = predict(model, features)
    correct = int(np.sum(predictions == labels))
    confusion = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    chance = 1.0 / model.num_classes if chance is None else chance
    p_value = stats.binomtest(correct, len(labels), chance, alternative="greater").pvalue
    return ClassifierReport(
        accuracy=correct / len(labels),
        chance=chance,
        p_value=float(p_value),
        confusion=confusion,
        labels=list(model.labels),
    )


def _split(count: int, holdout: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(count)
    n_test = max(1, int(round(count * holdout)))
    return order[n_test:], order[:n_test]


def train_size_classifier(
    embeddings: np.ndarray,
    sizes: np.ndarray,
    seed: int,
    buckets: Sequence[Tuple[int, int]] = SIZE_BUCKETS,
    holdout: float = 0.2,
    **fit_kwargs,
) -> Tuple[ClassifierModel, ClassifierReport]:
    """只根据池化嵌入 s_C 推断上下文大小所在的桶

    随机猜测基线取 1/桶数 与训练集多数类频率中的较大者。

    Raises:
        DegenerateLabelsError: 少于两个桶出现在数据中
    """
    labels = bucketize(sizes, buckets)
    if len(buckets) < 2 or len(np.unique(labels)) < 2:
        raise DegenerateLabelsError("上下文大小只落在一个桶中")
    train_idx, test_idx = _split(len(labels), holdout, make_rng(seed, 2))
    model = fit_classifier(
        embeddings[train_idx], labels[train_idx], len(buckets), "embedding", seed,
        class_names=bucket_labels(buckets), **fit_kwargs,
    )
    counts = np.bincount(labels[train_idx], minlength=len(buckets))
    majority = float(np.mean(labels[test_idx] == np.argmax(counts)))
    report = evaluate_classifier(model, embeddings[test_idx], labels[test_idx], max(1.0 / len(buckets), majority))
    logger.info(f"上下文大小分类器: accuracy={report.accuracy:.3f}, chance={report.chance:.3f}, p={report.p_value:.2e}")
    return model, report


def train_digit_classifier(
    train: ImageDataset,
    seed: int,
    test: Optional[ImageDataset] = None,
    **fit_kwargs,
) -> Tuple[ClassifierModel, Optional[ClassifierReport]]:
    """在 MNIST 训练集上训练 10 类数字分类器，给出测试集上的表现"""
    if train.labels is None:
        raise DegenerateLabelsError("数字分类器需要带标签的数据")
    fit_kwargs.setdefault("hidden", 256)
    fit_kwargs.setdefault("epochs", 10)
    fit_kwargs.setdefault("batch_size", 128)
    model = fit_classifier(
        train.images.reshape(len(train), -1), train.labels, 10, "image", seed,
        class_names=[str(d) for d in range(10)], **fit_kwargs,
    )
    report = None
    if test is not None and test.labels is not None:
        report = evaluate_classifier(model, test.images.reshape(len(test), -1), test.labels)
        logger.info(f"数字分类器测试集准确率: {report.accuracy:.4f}")
    return model, report
