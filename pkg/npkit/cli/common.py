"""子命令共用的参数与加载逻辑"""

import argparse
from pathlib import Path
from typing import List, Optional, Tuple

from npkit.core.config import load_config, settings
from npkit.core.logging import logger
from npkit.models.domain import Checkpoint
from npkit.models.schemas import Command, ModelConfig, TrainConfig
from npkit.services.classifier_service import train_digit_classifier
from npkit.services.neural_process import NeuralProcess
from npkit.storage.checkpoint import load_checkpoint, load_classifier, save_classifier
from npkit.storage.repositories.mnist_repository import MnistRepository
from npkit.storage.tables import write_manifest

DEFAULT_SIZES = "1,5,10,25,50,100,200,400,784"


def add_common_arguments(parser: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key = value 实验配置文件")
    parser.add_argument("--seed", type=int, required=True, help="随机种子（必填）")
    parser.add_argument("--out", type=Path, default=None, help="输出目录")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="覆盖配置项，可重复")
    if checkpoint:
        parser.add_argument("--checkpoint", type=Path, default=None, help="模型检查点")


def build_command(args: argparse.Namespace) -> Command:
    """把解析结果转换为 Command 并准备输出目录"""
    out = args.out or Path(settings.output_dir) / args.subcommand
    command = Command(
        subcommand=args.subcommand,
        config=args.config,
        overrides=list(args.overrides),
        seed=args.seed,
        out=out,
    )
    command.out.mkdir(parents=True, exist_ok=True)
    return command


def resolve_configs(command: Command) -> Tuple[TrainConfig, ModelConfig]:
    return load_config(command.config, command.overrides)


def parse_sizes(text: str) -> List[int]:
    """"1,5,10" -> [1, 5, 10]"""
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"无法解析大小列表: {text}") from e


def require_checkpoint(args: argparse.Namespace) -> Path:
    if args.checkpoint is None:
        raise FileNotFoundError("需要 --checkpoint")
    return args.checkpoint


def load_model(args: argparse.Namespace) -> Tuple[NeuralProcess, Checkpoint]:
    checkpoint = load_checkpoint(require_checkpoint(args))
    logger.info(f"载入模型: head={checkpoint.model_config.head}, pooling={checkpoint.model_config.pooling}, epoch={checkpoint.epoch}")
    return NeuralProcess(checkpoint.model_config, checkpoint.params), checkpoint


def repository() -> MnistRepository:
    return MnistRepository()


def digit_classifier(args: argparse.Namespace, command: Command):
    """载入 --classifier，或在训练集上训练一个并保存到输出目录"""
    if getattr(args, "classifier", None) is not None:
        return load_classifier(args.classifier)
    repo = repository()
    model, report = train_digit_classifier(repo.load_train(), command.seed, repo.load_test(desk=True))
    save_classifier(command.out / "digit_classifier.npc", model)
    if report is not None:
        logger.info(f"数字分类器: accuracy={report.accuracy:.4f}")
    return model


def manifest(
    command: Command,
    checkpoint: Optional[Checkpoint] = None,
    train_config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
    **extra,
) -> None:
    if checkpoint is not None:
        model_config = model_config or checkpoint.model_config
        train_config = train_config or checkpoint.train_config
    write_manifest(
        command.out,
        command.subcommand,
        command.seed,
        model_config=None if model_config is None else model_config.model_dump(mode="json"),
        train_config=None if train_config is None else train_config.model_dump(mode="json"),
        extra={
            "config_file": None if command.config is None else str(command.config),
            "overrides": command.overrides,
            **{k: (str(v) if isinstance(v, Path) else v) for k, v in extra.items()},
        },
    )
