"""diagnose 子命令：熵曲线、嵌入统计与上下文大小分类器"""

import argparse

from npkit.cli.common import DEFAULT_SIZES, add_common_arguments, load_model, manifest, parse_sizes, repository
from npkit.core.logging import logger
from npkit.services.classifier_service import train_size_classifier
from npkit.services.diagnostics_service import collect_size_embeddings, embedding_stats, entropy_curve
from npkit.storage.tables import write_tsv


def register(subparsers) -> None:
    parser = subparsers.add_parser("diagnose", help="后验收缩诊断")
    add_common_arguments(parser)
    parser.add_argument("--sizes", type=parse_sizes, default=parse_sizes(DEFAULT_SIZES), help="熵曲线的上下文大小")
    parser.add_argument("--reps", type=int, default=100, help="每幅图像每个大小的随机上下文数")
    parser.add_argument("--images", type=int, default=10, help="参与诊断的测试图像数")
    parser.add_argument("--per-image", type=int, default=50, help="大小分类器每幅图像的样本数")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, command) -> int:
    model, checkpoint = load_model(args)
    dataset = repository().load_test(desk=True).head(args.images)
    train_max = checkpoint.train_config.train_max_context if checkpoint.train_config else 199

    curve = entropy_curve(model, dataset.images, args.sizes, args.reps, command.seed, train_max=train_max)
    write_tsv(command.out / "entropy_curve.tsv", ["size", "mean", "std", "outside_training"], curve.rows())

    if model.config.pooling == "max":
        traces = embedding_stats(model, dataset.images[0], seed=command.seed)
        rows = [
            [trace.mode, n, f"{norm:.6f}", f"{ent:.6f}"]
            for trace in traces
            for n, norm, ent in zip(trace.sizes, trace.norms, trace.entropies)
        ]
        write_tsv(command.out / "embedding_stats.tsv", ["mode", "size", "shifted_l1", "entropy"], rows)
        write_tsv(command.out / "embedding_spearman.tsv", ["mode", "spearman"],
                  [[t.mode, f"{t.rank_correlation:.4f}"] for t in traces])
    else:
        logger.info("mean 池化模型跳过嵌入范数统计")

    embeddings, sizes = collect_size_embeddings(model, dataset.images, args.per_image, command.seed)
    _, report = train_size_classifier(embeddings, sizes, command.seed, progress=False)
    write_tsv(command.out / "size_classifier.tsv", ["accuracy", "chance", "p_value", "samples"],
              [[f"{report.accuracy:.4f}", f"{report.chance:.4f}", f"{report.p_value:.3e}", len(sizes)]])
    write_tsv(command.out / "size_confusion.tsv", ["true"] + report.labels,
              [[label] + row.tolist() for label, row in zip(report.labels, report.confusion)])

    manifest(command, checkpoint, checkpoint_path=args.checkpoint, sizes=list(args.sizes), reps=args.reps,
             images=len(dataset))
    print(f"诊断结果已写出到 {command.out}")
    return 0
