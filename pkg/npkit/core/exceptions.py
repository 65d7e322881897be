"""异常定义

所有模块抛出的业务异常都继承自 NPKitError，CLI 层统一捕获并转换为非零退出码。
"""


class NPKitError(Exception):
    """npkit 异常基类"""


# ---- 张量计算 / 自动微分 ----

class ShapeError(NPKitError):
    """张量形状不匹配"""


class EmptySetError(ShapeError):
    """对空集合做池化或归约"""


class DomainError(NPKitError):
    """输入超出运算定义域（如 log 的非正输入、非正标准差）"""


class NonFiniteError(NPKitError):
    """前向计算产生 NaN / Inf"""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"运算 {op} 产生了非有限值")


class GraphError(NPKitError):
    """计算图使用错误（损失不是标量、节点不属于该图等）"""


# ---- 分布 ----

class DimensionMismatchError(ShapeError):
    """分布维度与观测维度不一致"""


# ---- 模型 / 目标函数 / 诊断 ----

class EmptyContextError(NPKitError):
    """上下文集合为空"""


class HeadMismatchError(NPKitError):
    """编码器头部类型与调用的操作不匹配"""


class PoolingMismatchError(NPKitError):
    """池化方式与诊断要求不匹配"""


class OverlapError(NPKitError):
    """上下文集合与目标集合存在重叠像素"""


class ContextSizeError(NPKitError):
    """上下文大小超出像素总数"""


class DegenerateLabelsError(NPKitError):
    """分类数据只包含一个类别"""


class MissingClassError(NPKitError):
    """训练集中缺少需要的数字类别"""


# ---- 训练 ----

class EmptyImageError(NPKitError):
    """图像没有任何像素"""


class NonFiniteGradientError(NPKitError):
    """梯度包含 NaN / Inf"""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"参数 {name} 的梯度包含非有限值")


class TrainingDivergedError(NPKitError):
    """训练损失出现非有限值，记录出错的批次"""

    def __init__(self, epoch: int, batch: int, image_ids: list, cause: Exception):
        self.epoch = epoch
        self.batch = batch
        self.image_ids = list(image_ids)
        self.cause = cause
        super().__init__(
            f"训练发散: epoch={epoch}, batch={batch}, images={self.image_ids}: {cause}"
        )


# ---- IDX 数据文件 ----

class IdxFormatError(NPKitError):
    """IDX 文件格式错误"""


class BadMagicError(IdxFormatError):
    """IDX 魔数非法"""


class TruncatedPayloadError(IdxFormatError):
    """IDX 数据长度与声明不符"""


class DimensionOverflowError(IdxFormatError):
    """IDX 维度乘积溢出"""


# ---- 检查点 ----

class CheckpointError(NPKitError):
    """检查点读写错误"""


class CheckpointFormatError(CheckpointError):
    """检查点魔数或结构错误"""


class VersionMismatchError(CheckpointError):
    """检查点格式版本不受支持"""


class MissingTensorError(CheckpointError):
    """检查点缺少参数张量"""


class DuplicateTensorError(CheckpointError):
    """检查点中同名张量出现多次"""


class LengthMismatchError(CheckpointError):
    """声明长度与实际数据长度不符"""


# ---- 配置 ----

class ConfigError(NPKitError):
    """配置文件错误"""


class UnknownConfigKeyError(ConfigError):
    """未知配置项"""

    def __init__(self, key: str, line: int = 0):
        self.key = key
        self.line = line
        where = f" (第 {line} 行)" if line else ""
        super().__init__(f"未知配置项: {key}{where}")


class ConfigValueError(ConfigError):
    """配置值无法解析或超出范围"""
