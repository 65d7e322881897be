"""有限差分梯度校验

在 float64 图上比较反向传播梯度与中心差分梯度。若某个坐标的差分模板 θ±h
改变了 ReLU 掩码或 max 池化的 argmax（即跨越了折点），该坐标不参与比较。
"""

from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from npkit.core.exceptions import GraphError, NonFiniteError
from npkit.engine.graph import Graph, Tensor

Theta = Union[np.ndarray, Mapping[str, np.ndarray]]
Objective = Callable[[Graph, object], Tensor]

_SINGLE = "theta"


def _evaluate(f: Objective, values: Dict[str, np.ndarray], single: bool) -> Tuple[float, bytes]:
    graph = Graph(dtype=np.float64, requires_grad=False)
    leaves = {name: graph.leaf(v, name) for name, v in values.items()}
    try:
        out = f(graph, leaves[_SINGLE] if single else leaves)
    except NonFiniteError as e:
        raise NonFiniteError(e.op, f"梯度校验时前向计算出现非有限值: {e}") from e
    value = out.item()
    if not np.isfinite(value):
        raise NonFiniteError("grad_check", "梯度校验时目标值非有限")
    return value, graph.branch_signature()


def grad_check(
    f: Objective,
    theta: Theta,
    h: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """比较自动微分梯度与中心差分梯度

    Args:
        f: 以 (graph, θ) 为输入、返回标量张量的函数；θ 为单个 Tensor 或名称到 Tensor 的字典。
           f 内部若使用随机数，必须每次调用都用同一种子
        theta: 参数数组，或名称到数组的映射
        h: 差分步长
        max_coords: 每个张量最多检查的坐标数（随机抽取），None 表示全部
        seed: 抽取坐标用的种子

    Returns:
        float: max |g_ad − g_fd| / max(1, |g_fd|)

    Raises:
        NonFiniteError: 任一次前向计算非有限
        GraphError: 没有任何坐标可以检查
    """
    single = not isinstance(theta, Mapping)
    values = {_SINGLE: theta} if single else dict(theta)
    values = {name: np.array(v, dtype=np.float64) for name, v in values.items()}

    graph = Graph(dtype=np.float64)
    leaves = {name: graph.leaf(v, name) for name, v in values.items()}
    out = f(graph, leaves[_SINGLE] if single else leaves)
    analytic = graph.backward(out)
    signature = graph.branch_signature()

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for name, base in values.items():
        coords = list(np.ndindex(base.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        for coord in coords:
            original = base[coord]
            base[coord] = original + h
            f_plus, sig_plus = _evaluate(f, values, single)
            base[coord] = original - h
            f_minus, sig_minus = _evaluate(f, values, single)
            base[coord] = original
            if sig_plus != signature or sig_minus != signature:
                # 跨越折点，差分不可信
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            error = abs(float(analytic[name][coord]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
            checked += 1
    if checked == 0:
        raise GraphError("没有可检查的坐标（全部跨越折点）")
    return worst
