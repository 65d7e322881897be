"""命令行路由层"""

import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

from npkit import __version__
from npkit.cli.commands import diagnose, evaluate, sample, score, select, train
from npkit.cli.common import build_command
from npkit.core.config import settings
from npkit.core.exceptions import NPKitError
from npkit.core.logging import logger, setup_logging

COMMANDS = (train, evaluate, sample, diagnose, select, score)


def build_parser() -> argparse.ArgumentParser:
    """组装各子命令的解析器"""
    parser = argparse.ArgumentParser(prog="npkit", description="神经过程后验收缩实验工具")
    parser.add_argument("--version", action="version", version=f"npkit {__version__}")
    subparsers = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    subparsers.required = True
    for module in COMMANDS:
        module.register(subparsers)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令

    Returns:
        int: 退出码，0 表示成功；参数错误为 2，运行失败为 1
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(settings.log_level)
    try:
        command = build_command(args)
        setup_logging(settings.log_level, log_file=command.out / "run.log")
        return args.handler(args, command)
    except (NPKitError, ValidationError, ValueError, FileNotFoundError, argparse.ArgumentTypeError) as e:
        logger.error(f"命令 {args.subcommand} 失败: {e}")
        print(f"错误: {e}", file=sys.stderr)
        return 1
