"""select 子命令：贪心选点与逐个排除数字的上下文序列"""

import argparse

import numpy as np

from npkit.cli.common import add_common_arguments, digit_classifier, load_model, manifest, repository
from npkit.core.exceptions import MissingClassError
from npkit.engine.random import make_rng
from npkit.models.domain import PointSet
from npkit.services.diagnostics_service import CRITERIA, elimination_sequence, greedy_select, prediction_histogram
from npkit.storage.render import completion_columns, write_pgm
from npkit.storage.tables import write_tsv

TARGET_DIGIT = 3


def register(subparsers) -> None:
    parser = subparsers.add_parser("select", help="贪心选点与排除序列")
    add_common_arguments(parser)
    parser.add_argument("--budget", type=int, default=50, help="贪心选取的像素数")
    parser.add_argument("--criterion", choices=CRITERIA, default="kl_to_full", help="贪心准则")
    parser.add_argument("--k", type=int, default=1000, help="预测直方图的样本数")
    parser.add_argument("--classifier", type=str, default=None, help="数字分类器检查点（缺省时现场训练）")
    parser.add_argument("--show", type=int, default=3, help="补全网格显示的样本行数")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, command) -> int:
    model, checkpoint = load_model(args)
    repo = repository()
    test = repo.load_test(desk=True)
    image = test.images[0]
    shape = image.shape

    selection = greedy_select(model, image, args.budget, args.criterion, seed=command.seed)
    write_tsv(
        command.out / "greedy_trace.tsv",
        ["step", "pixel", "trace", "raw", "entropy", "full_entropy"],
        [
            [i + 1, p, f"{t:.6f}", f"{r:.6f}", f"{e:.6f}", f"{selection.full_entropy:.6f}"]
            for i, (p, t, r, e) in enumerate(zip(selection.order, selection.trace, selection.raw_trace, selection.entropies))
        ],
    )
    if selection.order:
        context = PointSet.from_image(image, selection.order)
        completion = model.sample_completion(context, shape, max(args.show, 2), make_rng(command.seed, 1))
        write_pgm(command.out / "greedy_context.pgm",
                  completion_columns([context], [completion.means], [completion.std], shape, args.show, image))

    train = repo.load_train(desk=True)
    queries = np.flatnonzero(test.labels == TARGET_DIGIT)
    if len(queries) == 0:
        raise MissingClassError(f"测试集中没有数字 {TARGET_DIGIT}")
    query = test.images[queries[0]]
    contexts = elimination_sequence(train, query, TARGET_DIGIT)
    write_tsv(command.out / "elimination_sequence.tsv", ["step", "size", "pixels"],
              [[i, len(c), ",".join(str(p) for p in c.indices)] for i, c in enumerate(contexts)])

    classifier = digit_classifier(args, command)
    rows = []
    for step, context in enumerate(contexts):
        histogram = prediction_histogram(model, context, shape, classifier, args.k, make_rng(command.seed, 2, step))
        rows.append([step, len(context)] + [f"{p:.4f}" for p in histogram])
    write_tsv(command.out / "elimination_histogram.tsv", ["step", "size"] + [str(d) for d in range(10)], rows)

    manifest(command, checkpoint, checkpoint_path=args.checkpoint, budget=args.budget,
             criterion=args.criterion, k=args.k)
    print(f"选点结果已写出到 {command.out}")
    return 0
