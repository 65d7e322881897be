"""可微运算

每个运算计算前向值，并把对应的向量-雅可比积（VJP）交给 Graph.record。
广播只支持标量和前导（batch / set）轴。
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from npkit.core.exceptions import DomainError, EmptySetError, GraphError, ShapeError
from npkit.engine.graph import Graph, Tensor

Operand = Union[Tensor, np.ndarray, float, int]

ACTIVATIONS = ("relu", "sigmoid", "softplus", "exp", "log")


def _graph_of(*operands: Operand) -> Graph:
    graph = None
    for x in operands:
        if isinstance(x, Tensor):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise GraphError("不能混用不同计算图中的张量")
    if graph is None:
        raise GraphError("至少需要一个 Tensor 操作数")
    return graph


def _lift(graph: Graph, x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else graph.constant(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度归约回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: 形状 {a.shape} 与 {b.shape} 无法广播") from e


# ---- 逐元素二元运算 ----

def add(a: Operand, b: Operand) -> Tensor:
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    _check_broadcast("add", a.value, b.value)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return graph.record("add", (a, b), a.value + b.value, vjp)


def sub(a: Operand, b: Operand) -> Tensor:
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    _check_broadcast("sub", a.value, b.value)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return graph.record("sub", (a, b), a.value - b.value, vjp)


def mul(a: Operand, b: Operand) -> Tensor:
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    _check_broadcast("mul", a.value, b.value)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return graph.record("mul", (a, b), av * bv, vjp)


def div(a: Operand, b: Operand) -> Tensor:
    graph = _graph_of(a, b)
    a, b = _lift(graph, a), _lift(graph, b)
    _check_broadcast("div", a.value, b.value)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("div: 除数包含 0")
    out = av / bv

    def vjp(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)

    return graph.record("div", (a, b), out, vjp)


def neg(x: Tensor) -> Tensor:
    return x.graph.record("neg", (x,), -x.value, lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    xv = x.value
    return x.graph.record("square", (x,), xv * xv, lambda g: (2.0 * g * xv,))


# ---- 激活函数 ----

def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    x.graph.note_branch(mask)
    return x.graph.record("relu", (x,), np.where(mask, x.value, 0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.value)
    return x.graph.record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """softplus(t) = max(t, 0) + log1p(exp(-|t|))，避免溢出"""
    xv = x.value
    out = np.maximum(xv, 0) + np.log1p(np.exp(-np.abs(xv)))
    return x.graph.record("softplus", (x,), out, lambda g: (g * special.expit(xv),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return x.graph.record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.value
    if np.any(xv <= 0):
        raise DomainError("log: 输入必须全部大于 0")
    return x.graph.record("log", (x,), np.log(xv), lambda g: (g / xv,))


def activation(x: Tensor, kind: str) -> Tensor:
    """按名称应用逐元素激活"""
    if kind not in ACTIVATIONS:
        raise ValueError(f"未知激活函数: {kind}")
    return {"relu": relu, "sigmoid": sigmoid, "softplus": softplus, "exp": exp, "log": log}[kind](x)


# ---- 线性层与归约 ----

def affine(x: Operand, W: Tensor, b: Tensor) -> Tensor:
    """y = xW + b，x 的前导轴视为 batch / set 轴"""
    graph = _graph_of(x, W, b)
    x = _lift(graph, x)
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: 权重 {W.shape} 与偏置 {b.shape} 不一致")
    if x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: 输入 {x.shape} 与权重 {W.shape} 的内维不一致")
    xv, Wv = x.value, W.value
    n_in, n_out = Wv.shape

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        return g @ Wv.T, xv.reshape(-1, n_in).T @ g2, g2.sum(axis=0)

    return graph.record("affine", (x, W, b), xv @ Wv + b.value, vjp)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    xv = x.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return x.graph.record("sum", (x,), xv.sum(axis=axis), vjp)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def pool(x: Tensor, mode: str) -> Tensor:
    """沿集合轴（倒数第二维）做置换不变池化

    max 池化记录 argmax，平局取最小行号；反向时梯度只流向这些位置。
    """
    if x.ndim < 2:
        raise ShapeError(f"pool: 输入至少二维，当前形状 {x.shape}")
    n = x.shape[-2]
    if n == 0:
        raise EmptySetError("pool: 集合为空")
    xv = x.value
    if mode == "mean":
        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, -2) / n, xv.shape).copy(),)

        return x.graph.record("pool_mean", (x,), xv.mean(axis=-2), vjp)
    if mode == "max":
        idx = np.expand_dims(np.argmax(xv, axis=-2), -2)
        x.graph.note_branch(idx)

        def vjp(g):
            grad = np.zeros_like(xv)
            np.put_along_axis(grad, idx, np.expand_dims(g, -2), axis=-2)
            return (grad,)

        return x.graph.record("pool_max", (x,), np.take_along_axis(xv, idx, axis=-2)[..., 0, :], vjp)
    raise ValueError(f"未知池化方式: {mode}")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log Σ exp(x)，先减去最大值再求和，避免溢出"""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise EmptySetError("logsumexp: 输入为空")
    xv = x.value
    out = special.logsumexp(xv, axis=axis, keepdims=keepdims)
    weights = special.softmax(xv, axis=axis)

    def vjp(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * weights,)

    return x.graph.record("logsumexp", (x,), out, vjp)


# ---- 形状运算 ----

def concat(tensors: Sequence[Operand], axis: int = -1) -> Tensor:
    graph = _graph_of(*tensors)
    parts = [_lift(graph, t) for t in tensors]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[p.shape for p in parts]}") from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return graph.record("concat", parts, out, vjp)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """沿前导轴广播"""
    shape = tuple(shape)
    try:
        ok = np.broadcast_shapes(x.shape, shape) == shape
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}")
    return x.graph.record(
        "broadcast_to", (x,), np.broadcast_to(x.value, shape), lambda g: (_unbroadcast(g, x.shape),)
    )


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """取最后一维的 [start, stop) 段"""
    xv = x.value
    if not 0 <= start < stop <= xv.shape[-1]:
        raise ShapeError(f"slice_last: [{start}, {stop}) 超出 {xv.shape[-1]}")

    def vjp(g):
        grad = np.zeros_like(xv)
        grad[..., start:stop] = g
        return (grad,)

    return x.graph.record("slice_last", (x,), xv[..., start:stop], vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """按下标取行（可重复）"""
    indices = np.asarray(indices, dtype=np.int64)
    xv = x.value

    def vjp(g):
        grad = np.zeros_like(xv)
        np.add.at(np.moveaxis(grad, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return x.graph.record("take", (x,), np.take(xv, indices, axis=axis), vjp)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """沿新的第 0 轴堆叠"""
    graph = _graph_of(*tensors)
    if not tensors:
        raise EmptySetError("stack: 输入为空")

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return graph.record("stack", tensors, np.stack([t.value for t in tensors]), vjp)
