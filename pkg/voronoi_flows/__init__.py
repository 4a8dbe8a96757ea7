"""Voronoi 半离散归一化流: 胞腔同胚、去量化与不相交混合模型"""

import logging

from .errors import VoronoiFlowError

__version__ = "0.1.0"

logging.getLogger("voronoi-flows").addHandler(logging.NullHandler())

__all__ = ["VoronoiFlowError", "__version__"]
