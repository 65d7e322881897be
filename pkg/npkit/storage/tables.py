"""表格与运行清单"""

import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import yaml

import npkit


def write_tsv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """写出以制表符分隔的表格，首行为 `#` 开头的表头"""
    lines = ["#" + "\t".join(header)]
    lines.extend("\t".join(str(cell) for cell in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv(path: Union[str, Path]) -> List[List[str]]:
    """读取 write_tsv 写出的表格（跳过表头）"""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            rows.append(line.split("\t"))
    return rows


def build_id() -> str:
    """软件与数值库版本"""
    return f"npkit-{npkit.__version__} numpy-{np.__version__} python-{platform.python_version()}"


def write_manifest(
    out_dir: Union[str, Path],
    command: str,
    seed: int,
    model_config: Optional[dict] = None,
    train_config: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    """写出可复现本次运行的清单 manifest.yaml"""
    manifest = {
        "command": command,
        "seed": int(seed),
        "build": build_id(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "model_config": model_config,
        "train_config": train_config,
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False, allow_unicode=True), encoding="utf-8")
    return path
