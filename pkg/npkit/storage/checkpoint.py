"""检查点容器

布局（数值均为小端）：
    b"NPC1" | u32 版本 | u32 元数据长度 | YAML 元数据 | u32 张量个数 |
    每个张量：u16 名称长度 | 名称 | u8 类型码 | u8 维数 | u32 × 维数 | 数据
Adam 状态以 "adam.m.<参数名>"、"adam.v.<参数名>" 的张量保存。
分类器复用同一容器，元数据中 kind 为 classifier。
"""

import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import yaml

from npkit.core.exceptions import (
    CheckpointFormatError,
    DuplicateTensorError,
    LengthMismatchError,
    MissingTensorError,
    VersionMismatchError,
)
from npkit.core.logging import logger
from npkit.models.domain import Checkpoint, ClassifierModel, ModelParams, OptimizerState
from npkit.models.schemas import ModelConfig, TrainConfig
from npkit.services.neural_process import parameter_shapes

MAGIC = b"NPC1"
FORMAT_VERSION = 1

DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

ADAM_M = "adam.m."
ADAM_V = "adam.v."


def encode_container(metadata: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    """把元数据与命名张量编码为字节串"""
    meta = yaml.safe_dump(metadata, sort_keys=True, allow_unicode=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        dtype = value.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise CheckpointFormatError(f"张量 {name} 的类型 {value.dtype} 不受支持")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_CODES[dtype], value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise LengthMismatchError(f"{what} 需要 {size} 字节，剩余 {len(self.data) - self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    """解码字节串，返回 (元数据, 命名张量)

    Raises:
        CheckpointFormatError: 魔数错误或元数据不可解析
        VersionMismatchError: 版本不受支持
        LengthMismatchError: 声明长度与实际长度不符
        DuplicateTensorError: 同名张量重复出现
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC), "魔数") != MAGIC:
        raise CheckpointFormatError("检查点魔数错误")
    version, meta_len = reader.unpack("<II", "版本与元数据长度")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"检查点版本 {version} 不受支持，当前为 {FORMAT_VERSION}")
    try:
        metadata = yaml.safe_load(reader.take(meta_len, "元数据").decode("utf-8")) or {}
    except (UnicodeDecodeError, yaml.YAMLError) as e:
        raise CheckpointFormatError(f"检查点元数据无法解析: {e}") from e

    (count,) = reader.unpack("<I", "张量个数")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "张量名长度")
        name = reader.take(name_len, "张量名").decode("utf-8")
        code, rank = reader.unpack("<BB", f"张量 {name} 的类型与维数")
        if code not in CODE_DTYPES:
            raise CheckpointFormatError(f"张量 {name} 的类型码 {code} 未知")
        shape = reader.unpack(f"<{rank}I", f"张量 {name} 的形状")
        dtype = CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(size, f"张量 {name} 的数据")
        if name in tensors:
            raise DuplicateTensorError(f"张量 {name} 重复出现")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.offset != len(data):
        raise LengthMismatchError(f"检查点末尾有 {len(data) - reader.offset} 个多余字节")
    return metadata, tensors


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    metadata = {
        "kind": "neural_process",
        "model_config": checkpoint.model_config.model_dump(mode="json"),
        "train_config": None if checkpoint.train_config is None else checkpoint.train_config.model_dump(mode="json"),
        "seed": int(checkpoint.seed),
        "epoch": int(checkpoint.epoch),
    }
    tensors = dict(checkpoint.params.items())
    if checkpoint.optimizer is not None:
        opt = checkpoint.optimizer
        metadata["optimizer"] = {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        tensors.update({ADAM_M + name: value for name, value in opt.m.items()})
        tensors.update({ADAM_V + name: value for name, value in opt.v.items()})
    return encode_container(metadata, tensors)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """解码神经过程检查点，并校验参数齐全

    Raises:
        MissingTensorError: 缺少某个参数或 Adam 矩
    """
    metadata, tensors = decode_container(data)
    if metadata.get("kind") != "neural_process":
        raise CheckpointFormatError(f"检查点类型 {metadata.get('kind')} 不是神经过程模型")
    model_config = ModelConfig(**metadata["model_config"])
    train_config = TrainConfig(**metadata["train_config"]) if metadata.get("train_config") else None

    names = list(parameter_shapes(model_config))
    missing = [name for name in names if name not in tensors]
    if missing:
        raise MissingTensorError(f"检查点缺少参数: {missing}")
    params = ModelParams({name: tensors[name] for name in names})

    optimizer = None
    if metadata.get("optimizer"):
        opt = metadata["optimizer"]
        moments = [prefix + name for prefix in (ADAM_M, ADAM_V) for name in names]
        missing = [name for name in moments if name not in tensors]
        if missing:
            raise MissingTensorError(f"检查点缺少 Adam 状态: {missing[:4]}")
        optimizer = OptimizerState(
            m={name: tensors[ADAM_M + name] for name in names},
            v={name: tensors[ADAM_V + name] for name in names},
            step=int(opt["step"]),
            beta1=float(opt["beta1"]),
            beta2=float(opt["beta2"]),
            eps=float(opt["eps"]),
        )
    return Checkpoint(
        model_config=model_config,
        params=params,
        train_config=train_config,
        seed=int(metadata.get("seed", 0)),
        epoch=int(metadata.get("epoch", 0)),
        optimizer=optimizer,
    )


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """保存检查点"""
    try:
        Path(path).write_bytes(encode_checkpoint(checkpoint))
        logger.info(f"检查点已保存: {path} (epoch={checkpoint.epoch})")
    except Exception as e:
        logger.error(f"保存检查点失败: {e}")
        raise


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """读取检查点"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"检查点不存在: {path}")
    try:
        return decode_checkpoint(path.read_bytes())
    except Exception as e:
        logger.error(f"读取检查点失败: {e}")
        raise


def save_classifier(path: Union[str, Path], model: ClassifierModel) -> None:
    """把分类器写入检查点容器"""
    metadata = {
        "kind": "classifier",
        "num_classes": int(model.num_classes),
        "input_kind": model.input_kind,
        "labels": list(model.labels),
    }
    tensors = dict(model.params.items())
    tensors["norm.shift"] = np.asarray(model.shift, dtype=np.float64)
    tensors["norm.scale"] = np.asarray(model.scale, dtype=np.float64)
    Path(path).write_bytes(encode_container(metadata, tensors))
    logger.info(f"分类器已保存: {path}")


def load_classifier(path: Union[str, Path]) -> ClassifierModel:
    metadata, tensors = decode_container(Path(path).read_bytes())
    if metadata.get("kind") != "classifier":
        raise CheckpointFormatError(f"检查点类型 {metadata.get('kind')} 不是分类器")
    for name in ("norm.shift", "norm.scale", "fc.0.W"):
        if name not in tensors:
            raise MissingTensorError(f"分类器缺少张量 {name}")
    shift = tensors.pop("norm.shift")
    scale = tensors.pop("norm.scale")
    return ClassifierModel(
        params=ModelParams(tensors),
        num_classes=int(metadata["num_classes"]),
        input_kind=metadata["input_kind"],
        shift=shift,
        scale=scale,
        labels=list(metadata.get("labels", [])),
    )
