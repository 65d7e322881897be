"""领域模型定义"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from npkit.core.exceptions import EmptyContextError, ShapeError
from npkit.models.schemas import ModelConfig, TrainConfig


def pixel_coords(height: int, width: int, indices: np.ndarray) -> np.ndarray:
    """把展平的像素下标转换为 [0,1]² 归一化坐标 (row/(H−1), col/(W−1))"""
    indices = np.asarray(indices, dtype=np.int64)
    rows, cols = np.divmod(indices, width)
    return np.stack(
        [rows / max(height - 1, 1), cols / max(width - 1, 1)], axis=-1
    ).astype(np.float64)


@dataclass(frozen=True)
class PointSet:
    """一组 (坐标, 取值) 点，对应上下文集合或目标集合"""
    coords: np.ndarray            # [n, d_x]
    values: np.ndarray            # [n, d_y]
    indices: Optional[np.ndarray] = None  # 在原图中的展平像素下标

    def __post_init__(self):
        if self.coords.ndim != 2 or self.values.ndim != 2 or len(self.coords) != len(self.values):
            raise ShapeError(f"坐标 {self.coords.shape} 与取值 {self.values.shape} 不一致")
        if self.indices is not None and len(self.indices) != len(self.coords):
            raise ShapeError("像素下标数量与点数不一致")

    def __len__(self) -> int:
        return len(self.coords)

    @classmethod
    def from_image(cls, image: np.ndarray, indices) -> "PointSet":
        """从单通道图像 [H, W] 取出指定像素"""
        height, width = image.shape
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        return cls(
            coords=pixel_coords(height, width, indices),
            values=image.reshape(-1)[indices].reshape(-1, 1).astype(np.float64),
            indices=indices,
        )

    def require_nonempty(self) -> "PointSet":
        if len(self) == 0:
            raise EmptyContextError("上下文集合为空")
        return self

    def permuted(self, order) -> "PointSet":
        order = np.asarray(order)
        return PointSet(
            self.coords[order], self.values[order],
            None if self.indices is None else self.indices[order],
        )


# 上下文集合与目标集合共用同一表示
ContextSet = PointSet
TargetSet = PointSet


@dataclass(frozen=True)
class TaskInstance:
    """一个元学习任务：图像编号、上下文下标（前 n 个）、目标下标（全部 n+m' 个）"""
    image_id: int
    context_indices: np.ndarray
    target_indices: np.ndarray

    def __post_init__(self):
        n = len(self.context_indices)
        if n < 1:
            raise EmptyContextError("任务的上下文集合为空")
        if len(np.unique(self.target_indices)) != len(self.target_indices):
            raise ShapeError("目标下标必须互不相同")
        if not np.array_equal(self.target_indices[:n], self.context_indices):
            raise ShapeError("上下文必须是目标的前 n 个点")

    @property
    def n_context(self) -> int:
        return len(self.context_indices)

    def materialize(self, image: np.ndarray) -> Tuple[PointSet, PointSet]:
        """从图像取出 (上下文, 目标) 点集"""
        return (
            PointSet.from_image(image, self.context_indices),
            PointSet.from_image(image, self.target_indices),
        )


@dataclass
class ModelParams:
    """命名参数张量"""
    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams({name: value.copy() for name, value in self.tensors.items()})

    def validate(self, shapes: Dict[str, Tuple[int, ...]]) -> None:
        """检查参数名、形状与数值有限性"""
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ShapeError(f"参数集合不一致: 缺少 {missing}，多余 {extra}")
        for name, shape in shapes.items():
            value = self.tensors[name]
            if value.shape != tuple(shape):
                raise ShapeError(f"参数 {name} 形状 {value.shape} 应为 {tuple(shape)}")
            if not np.all(np.isfinite(value)):
                raise ShapeError(f"参数 {name} 包含非有限值")


@dataclass
class ImageDataset:
    """单通道图像数据集，灰度值已归一化到 [0,1]"""
    images: np.ndarray                 # [N, H, W]
    labels: Optional[np.ndarray] = None
    channels: int = 1

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ShapeError(f"图像数组应为 [N, H, W]，当前 {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ShapeError("图像灰度必须位于 [0,1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ShapeError("标签数量与图像数量不一致")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(
            self.images[indices],
            None if self.labels is None else self.labels[indices],
            self.channels,
        )

    def head(self, count: int) -> "ImageDataset":
        return self.subset(np.arange(min(count, len(self))))


@dataclass
class OptimizerState:
    """Adam 一阶 / 二阶矩与步数"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Checkpoint:
    """模型配置、参数与训练状态"""
    model_config: ModelConfig
    params: ModelParams
    train_config: Optional[TrainConfig] = None
    seed: int = 0
    epoch: int = 0
    optimizer: Optional[OptimizerState] = None


@dataclass(frozen=True)
class EpochMetrics:
    """每个 epoch 一行的训练指标"""
    epoch: int
    objective: float
    lr: float
    seconds: float

    def to_row(self) -> List[str]:
        return [str(self.epoch), f"{self.objective:.6f}", f"{self.lr:.3e}", f"{self.seconds:.2f}"]


@dataclass
class Completion:
    """条件补全结果：k 张均值图与逐像素标准差图"""
    means: np.ndarray   # [k, H, W]
    std: np.ndarray     # [H, W]


@dataclass
class EntropyCurve:
    """后验熵随上下文大小的变化"""
    sizes: List[int]
    means: List[float]
    stds: List[float]
    outside_training: List[bool]

    def rows(self) -> List[List[str]]:
        return [
            [str(n), f"{m:.6f}", f"{s:.6f}", "1" if flag else "0"]
            for n, m, s, flag in zip(self.sizes, self.means, self.stds, self.outside_training)
        ]


@dataclass
class GreedySelection:
    """贪心选点结果"""
    criterion: str
    order: List[int]
    trace: List[float]          # 各前缀的最优准则值（非增）
    raw_trace: List[float]      # 每一步所选前缀的准则值
    entropies: List[float]      # 每一步所选前缀的后验熵
    full_entropy: float         # 整幅图像作为上下文时的后验熵


@dataclass
class EmbeddingTrace:
    """某种上下文生成方式下的池化嵌入范数与后验熵"""
    mode: str
    sizes: List[int]
    norms: List[float]
    entropies: List[float]
    rank_correlation: float = float("nan")   # 熵与范数的 Spearman 秩相关


@dataclass
class ClassifierReport:
    """分类器在留出集上的表现"""
    accuracy: float
    chance: float
    p_value: float
    confusion: np.ndarray
    labels: List[str] = field(default_factory=list)


@dataclass
class ClassifierModel:
    """两层隐藏层的前馈分类器（输入为池化嵌入或展平图像）"""
    params: ModelParams
    num_classes: int
    input_kind: str                 # "embedding" 或 "image"
    shift: np.ndarray               # 输入标准化：(x − shift) / scale
    scale: np.ndarray
    labels: List[str] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.params["fc.0.W"].shape[0]
