"""eval 子命令：留出集上的 IWAE 预测对数似然"""

import argparse

import numpy as np

from npkit.cli.common import add_common_arguments, load_model, manifest, repository
from npkit.core.config import settings
from npkit.services.training_service import evaluate_loglik
from npkit.storage.tables import write_tsv


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="计算 IWAE 预测对数似然")
    add_common_arguments(parser)
    parser.add_argument("--k", type=int, default=None, help="重要性样本数（默认取训练配置的 eval_k）")
    parser.add_argument("--images", type=int, default=None, help="评估图像数（默认桌面规模测试集）")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, command) -> int:
    model, checkpoint = load_model(args)
    k = args.k or (checkpoint.train_config.eval_k if checkpoint.train_config else 1000)
    n_range = checkpoint.train_config.n_range if checkpoint.train_config else (1, 200)
    dataset = repository().load_test(desk=True).head(args.images or settings.desk_test_size)

    scores = evaluate_loglik(model, dataset, k, command.seed, n_range=n_range)
    mean, std = float(scores.mean()), float(scores.std())
    se = std / np.sqrt(len(scores))
    write_tsv(command.out / "eval.tsv", ["image", "loglik"], [[i, f"{s:.6f}"] for i, s in enumerate(scores)])
    write_tsv(command.out / "eval_summary.tsv", ["k", "images", "mean", "std", "se"],
              [[k, len(scores), f"{mean:.6f}", f"{std:.6f}", f"{se:.6f}"]])
    manifest(command, checkpoint, checkpoint_path=args.checkpoint, k=k, images=len(scores))
    print(f"IWAE 对数似然 (K={k}): {mean:.4f} ± {std:.4f} (se {se:.4f})")
    return 0
