"""配置管理模块"""

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings

from npkit.core.exceptions import ConfigValueError, UnknownConfigKeyError
from npkit.models.schemas import ModelConfig, TrainConfig


class Settings(BaseSettings):
    """应用配置类"""

    # 数据目录与 MNIST 文件
    data_dir: str = "data"
    train_images_file: str = "train-images-idx3-ubyte"
    train_labels_file: str = "train-labels-idx1-ubyte"
    test_images_file: str = "t10k-images-idx3-ubyte"
    test_labels_file: str = "t10k-labels-idx1-ubyte"

    # 桌面规模子集
    desk_train_size: int = 2000
    desk_test_size: int = 500

    # 输出与日志
    output_dir: str = "runs"
    log_level: str = "INFO"

    # 评估配置
    eval_chunk_size: int = 100
    workers: int = 1

    class Config:
        env_prefix = "NPKIT_"
        env_file = ".env"
        env_file_encoding = "utf-8"


def load_config_from_yaml(config_path: str = "config.yaml") -> Settings:
    """从YAML文件加载配置

    Args:
        config_path: 配置文件路径

    Returns:
        Settings: 配置对象
    """
    if not Path(config_path).exists():
        return Settings()

    with open(config_path, 'r', encoding='utf-8') as f:
        config_data = yaml.safe_load(f) or {}

    data = config_data.get('data', {})
    output = config_data.get('output', {})
    evaluation = config_data.get('evaluation', {})

    values = dict(
        data_dir=data.get('dir'),
        train_images_file=data.get('train_images'),
        train_labels_file=data.get('train_labels'),
        test_images_file=data.get('test_images'),
        test_labels_file=data.get('test_labels'),
        desk_train_size=data.get('desk_train_size'),
        desk_test_size=data.get('desk_test_size'),
        output_dir=output.get('dir'),
        log_level=output.get('log_level'),
        eval_chunk_size=evaluation.get('chunk_size'),
        workers=evaluation.get('workers'),
    )
    # 未在 YAML 中出现的项交给环境变量或默认值
    return Settings(**{k: v for k, v in values.items() if v is not None})


# 全局配置实例
settings = load_config_from_yaml()


# ---- 实验配置（key = value 文本） ----

_MODEL_KEYS = frozenset(ModelConfig.model_fields)
_TRAIN_KEYS = frozenset(TrainConfig.model_fields)
_TUPLE_KEYS = frozenset({"lr_milestones", "n_range", "mprime_range"})
_NONE_WORDS = frozenset({"none", "null", "off", ""})


def _coerce(key: str, raw: str):
    """把文本值转换为 pydantic 可以校验的原始值"""
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        return [item.strip() for item in raw.split(",") if item.strip()]
    if key == "grad_clip" and raw.lower() in _NONE_WORDS:
        return None
    return raw


def parse_assignments(lines: Iterable[str]) -> Dict[str, object]:
    """解析 `key = value` 行，忽略空行和 `#` 注释

    Args:
        lines: 文本行

    Returns:
        Dict[str, object]: 键到原始值的映射

    Raises:
        UnknownConfigKeyError: 出现未知配置项
        ConfigValueError: 行格式错误
    """
    values: Dict[str, object] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigValueError(f"第 {lineno} 行缺少 '=': {line.strip()}")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS:
            raise UnknownConfigKeyError(key, lineno)
        values[key] = _coerce(key, raw)
    return values


def build_configs(values: Dict[str, object]) -> Tuple[TrainConfig, ModelConfig]:
    """用解析出的键值构造配置对象，其余项取默认值"""
    model_values = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    train_values = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    try:
        return TrainConfig(**train_values), ModelConfig(**model_values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigValueError(f"配置值非法: {problems}") from e


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[List[str]] = None
) -> Tuple[TrainConfig, ModelConfig]:
    """读取实验配置文件并应用命令行覆盖

    Args:
        path: `key = value` 配置文件路径，None 表示全部使用默认值
        overrides: `--set key=value` 覆盖列表

    Returns:
        Tuple[TrainConfig, ModelConfig]: 训练配置与模型配置
    """
    values: Dict[str, object] = {}
    if path is not None:
        with open(path, 'r', encoding='utf-8') as f:
            values.update(parse_assignments(f))
    if overrides:
        values.update(parse_assignments(overrides))
    return build_configs(values)


def dump_config(train_config: TrainConfig, model_config: ModelConfig) -> str:
    """把配置写回 `key = value` 文本，可被 load_config 读回"""
    lines = ["# 模型结构"]
    for key, value in model_config.model_dump().items():
        lines.append(f"{key} = {_format_value(value)}")
    lines.append("# 训练")
    for key, value in train_config.model_dump().items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)
