"""train 子命令：训练神经过程模型"""

import argparse

from npkit.cli.common import add_common_arguments, manifest, repository, resolve_configs
from npkit.core.config import settings
from npkit.core.logging import logger
from npkit.models.schemas import Command
from npkit.services.training_service import TrainingService
from npkit.storage.checkpoint import load_checkpoint


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="训练模型")
    add_common_arguments(parser)
    parser.add_argument("--images", type=int, default=None, help="训练图像数（默认桌面规模子集）")
    parser.add_argument("--workers", type=int, default=None, help="批内并行线程数")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, command: Command) -> int:
    train_config, model_config = resolve_configs(command)
    train_config = train_config.model_copy(update={"seed": command.seed})

    dataset = repository().load_train(desk=True)
    dataset = dataset.head(args.images or settings.desk_train_size)

    resume = None
    if args.checkpoint is not None:
        # --checkpoint 表示从该检查点继续训练
        resume = load_checkpoint(args.checkpoint)
        model_config = resume.model_config
        logger.info(f"从 epoch={resume.epoch} 继续训练")

    manifest(command, train_config=train_config, model_config=model_config, images=len(dataset))
    service = TrainingService(train_config, model_config, workers=args.workers)
    checkpoint, metrics = service.train(dataset, out_dir=command.out, resume=resume)
    if metrics:
        print(f"训练完成: epoch={checkpoint.epoch}, objective={metrics[-1].objective:.4f}")
    return 0
