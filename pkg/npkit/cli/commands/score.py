"""score 子命令：各上下文大小的 inception score"""

import argparse

from npkit.cli.common import DEFAULT_SIZES, add_common_arguments, digit_classifier, load_model, manifest, parse_sizes, repository
from npkit.services.diagnostics_service import inception_by_size, reference_inception_score
from npkit.storage.tables import write_tsv

CONTEXT_SETS = 10


def register(subparsers) -> None:
    parser = subparsers.add_parser("score", help="计算 inception score")
    add_common_arguments(parser)
    parser.add_argument("--sizes", type=parse_sizes, default=parse_sizes(DEFAULT_SIZES), help="上下文大小")
    parser.add_argument("--k", type=int, default=100, help="每个上下文集合的补全样本数")
    parser.add_argument("--classifier", type=str, default=None, help="数字分类器检查点（缺省时现场训练）")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, command) -> int:
    model, checkpoint = load_model(args)
    classifier = digit_classifier(args, command)
    repo = repository()
    test = repo.load_test(desk=True)

    results = inception_by_size(model, test.images, args.sizes, classifier, args.k, command.seed,
                                context_sets=CONTEXT_SETS)
    reference = reference_inception_score(repo.load_train(desk=True).images, classifier)
    write_tsv(command.out / "inception.tsv", ["size", "mean", "std", "context_sets"],
              [[n, f"{m:.4f}", f"{s:.4f}", CONTEXT_SETS] for n, (m, s) in results.items()])
    write_tsv(command.out / "inception_reference.tsv", ["reference_is"], [[f"{reference:.4f}"]])

    manifest(command, checkpoint, checkpoint_path=args.checkpoint, sizes=list(args.sizes), k=args.k)
    for n, (m, s) in results.items():
        print(f"n={n}\tIS={m:.3f} ± {s:.3f}")
    print(f"训练图像参考 IS={reference:.3f}")
    return 0
