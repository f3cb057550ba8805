"""Item timeliness curves from impression logs, and fairness-aware reranking.

The library models each item's probability of still being "alive" at a
future age (its residual-value curve) with a proportional-hazards fit over
observation-window feedback, then blends those curves with any backbone
recommender's scores to rebalance exposure between items uploaded at
different times.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
