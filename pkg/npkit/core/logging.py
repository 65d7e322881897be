"""日志配置模块"""

import logging
import sys
from pathlib import Path
from typing import List, Optional, Union

LOGGER_NAME = "npkit"
DEFAULT_FORMAT = "[%(asctime)s] %(levelname)s [%(name)s] %(message)s"


def setup_logging(
    level: Union[int, str] = logging.INFO,
    format_string: Optional[str] = None,
    log_file: Optional[Union[str, Path]] = None,
) -> logging.Logger:
    """配置应用日志

    重复调用会替换之前的处理器，CLI 据此在确定输出目录后把日志同时写入 run.log。

    Args:
        level: 日志级别（整数或 "INFO" 这样的名称）
        format_string: 日志格式字符串
        log_file: 额外写入的日志文件，None 表示只输出到标准输出

    Returns:
        logging.Logger: 配置好的日志记录器
    """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())

    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    logging.basicConfig(
        level=level,
        format=format_string or DEFAULT_FORMAT,
        handlers=handlers,
        force=True,
    )
    return logging.getLogger(LOGGER_NAME)


# 全局日志实例
logger = setup_logging()
