"""npkit: 神经过程（Neural Process）后验收缩分析工具包"""

__version__ = "1.0.0"
