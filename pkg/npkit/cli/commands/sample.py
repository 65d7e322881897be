"""sample 子命令：渲染条件补全网格"""

import argparse

from npkit.cli.common import add_common_arguments, load_model, manifest, parse_sizes, repository
from npkit.core.config import settings
from npkit.core.exceptions import ContextSizeError
from npkit.engine.random import make_rng
from npkit.models.domain import PointSet
from npkit.storage.render import completion_columns, write_pgm


def register(subparsers) -> None:
    parser = subparsers.add_parser("sample", help="渲染条件补全网格")
    add_common_arguments(parser)
    parser.add_argument("--k", type=int, default=100, help="每个上下文的样本数（标准差使用全部样本）")
    parser.add_argument("--show", type=int, default=3, help="网格中显示的样本行数")
    parser.add_argument("--sizes", type=parse_sizes, default=parse_sizes("10,50,100,300,784"), help="每列的上下文大小")
    parser.add_argument("--images", type=int, default=1, help="渲染的测试图像数")
    parser.add_argument("--copy-context", action="store_true", help="把上下文像素直接复制到样本中")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, command) -> int:
    model, checkpoint = load_model(args)
    dataset = repository().load_test(desk=True).head(args.images)
    shape = (dataset.height, dataset.width)
    if any(n < 1 or n > dataset.num_pixels for n in args.sizes):
        raise ContextSizeError(f"上下文大小超出像素数 {dataset.num_pixels}: {args.sizes}")

    for image_id, image in enumerate(dataset.images):
        rng = make_rng(command.seed, image_id)
        # 同一幅图像的各列使用同一像素顺序，上下文逐列嵌套
        order = rng.permutation(dataset.num_pixels)
        contexts, means, stds = [], [], []
        for n in args.sizes:
            context = PointSet.from_image(image, order[:n])
            completion = model.sample_completion(
                context, shape, args.k, rng, copy_context=args.copy_context, chunk_size=settings.eval_chunk_size
            )
            contexts.append(context)
            means.append(completion.means)
            stds.append(completion.std)
        raster = completion_columns(contexts, means, stds, shape, min(args.show, args.k), ground_truth=image)
        write_pgm(command.out / f"sample_{image_id:03d}.pgm", raster)

    manifest(command, checkpoint, checkpoint_path=args.checkpoint, k=args.k, show=args.show,
             sizes=list(args.sizes), copy_context=args.copy_context)
    print(f"已写出 {len(dataset)} 张补全网格到 {command.out}")
    return 0
