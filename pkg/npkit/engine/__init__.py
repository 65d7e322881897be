"""张量计算与自动微分引擎"""

from npkit.engine.graph import Graph, Node, Tensor, backward
from npkit.engine.gradcheck import grad_check

__all__ = ["Graph", "Node", "Tensor", "backward", "grad_check"]
