"""计算图与张量

按运行定义（define-by-run）：每次前向计算新建一个 Graph，运算按执行顺序追加，
因此记录顺序天然是拓扑序，反向传播只需逆序扫描一次。
一个 Graph 只能在一个线程内使用；不同的 Graph 之间互不共享状态。
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from npkit.core.exceptions import GraphError, NonFiniteError

# 反向传播函数：输入输出梯度，返回每个输入的梯度（None 表示不传播）
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class Node:
    """一次运算的记录"""
    op: str
    inputs: Tuple[int, ...]
    output: int
    vjp: VJP


class Tensor:
    """计算图中的稠密张量"""

    __slots__ = ("graph", "node_id", "value")

    def __init__(self, graph: "Graph", node_id: int, value: np.ndarray):
        self.graph = graph
        self.node_id = node_id
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise GraphError(f"只有单元素张量可以转换为标量，当前形状 {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, node={self.node_id})"

    # 运算符委托给 functional
    def __add__(self, other):
        from npkit.engine import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from npkit.engine import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from npkit.engine import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from npkit.engine import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from npkit.engine import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from npkit.engine import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from npkit.engine import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from npkit.engine import functional as F
        return F.div(other, self)

    def __neg__(self):
        from npkit.engine import functional as F
        return F.neg(self)


class Graph:
    """一次前向计算的运算记录

    Args:
        dtype: 元素类型，训练默认 float32，校验时使用 float64
        requires_grad: False 时只计算数值、不保存反向信息（评估与诊断）
    """

    def __init__(self, dtype=np.float32, requires_grad: bool = True):
        self.dtype = np.dtype(dtype)
        self.requires_grad = requires_grad
        self._values: List[np.ndarray] = []
        self._nodes: List[Node] = []
        self._names: Dict[str, int] = {}
        self._branches: List[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, tensor: Tensor) -> bool:
        return (
            isinstance(tensor, Tensor)
            and tensor.graph is self
            and 0 <= tensor.node_id < len(self._values)
        )

    def _new(self, value: np.ndarray) -> Tensor:
        self._values.append(value)
        return Tensor(self, len(self._values) - 1, value)

    def leaf(self, value, name: str) -> Tensor:
        """登记一个需要梯度的叶子（参数）"""
        if name in self._names:
            raise GraphError(f"叶子 {name} 已经登记")
        tensor = self._new(np.array(value, dtype=self.dtype))
        self._names[name] = tensor.node_id
        return tensor

    def param(self, name: str, value) -> Tensor:
        """按名称取参数叶子，同一张图内只登记一次"""
        if name in self._names:
            node_id = self._names[name]
            return Tensor(self, node_id, self._values[node_id])
        return self.leaf(value, name)

    def constant(self, value) -> Tensor:
        """登记常量（不参与梯度）"""
        return self._new(np.asarray(value, dtype=self.dtype))

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        """记录一次运算并返回输出张量

        Raises:
            NonFiniteError: 输出包含 NaN / Inf
        """
        value = np.asarray(value, dtype=self.dtype)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op)
        out = self._new(value)
        if self.requires_grad:
            self._nodes.append(Node(op, tuple(t.node_id for t in inputs), out.node_id, vjp))
        return out

    def note_branch(self, marker: np.ndarray) -> None:
        """记录分段线性运算的分支（ReLU 掩码、max 池化的 argmax）"""
        self._branches.append(np.asarray(marker))

    def branch_signature(self) -> bytes:
        """所有分支选择的指纹，用于判断有限差分是否跨越了折点"""
        return b"".join(np.ascontiguousarray(b).tobytes() for b in self._branches)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """从标量损失出发做一次反向扫描

        Args:
            loss: 该图中的标量节点

        Returns:
            Dict[str, np.ndarray]: 每个命名叶子的梯度（未被使用的叶子为零）

        Raises:
            GraphError: 图不记录梯度、损失不是标量或不属于该图
        """
        if not self.requires_grad:
            raise GraphError("该图未记录反向信息")
        if loss not in self:
            raise GraphError("损失节点不属于该计算图")
        if loss.value.size != 1:
            raise GraphError(f"损失必须是标量，当前形状 {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        for node in reversed(self._nodes):
            upstream = grads.pop(node.output, None)
            if upstream is None:
                continue
            for input_id, grad in zip(node.inputs, node.vjp(upstream)):
                if grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad

        result = {}
        for name, node_id in self._names.items():
            grad = grads.get(node_id)
            value = self._values[node_id]
            result[name] = np.zeros_like(value) if grad is None else grad.astype(value.dtype).reshape(value.shape)
        return result


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """反向传播的函数形式，等价于 graph.backward(loss)"""
    return graph.backward(loss)
