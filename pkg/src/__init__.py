"""
Efficient Depth Toolkit
Package initialization
"""

__version__ = "0.1.0"

from src.backends import DepthBackend, DepthRequest, parse_backend_spec
from src.bimodal import BimodalField, BimodalParams, decode, decode_field, density
from src.boost import BoostConfig, SimpleBoost, plan_tiles, simple_boost, solve_alignment
from src.grid_core import DepthGrid, ImageGrid, Rect
from src.losses import LossWeights, loss_total
from src.metrics import EvalConfig, MetricsReport, evaluate_dataset
from src.reporter import Reporter

__all__ = [
    "BimodalField",
    "BimodalParams",
    "BoostConfig",
    "DepthBackend",
    "DepthGrid",
    "DepthRequest",
    "EvalConfig",
    "ImageGrid",
    "LossWeights",
    "MetricsReport",
    "Rect",
    "Reporter",
    "SimpleBoost",
    "decode",
    "decode_field",
    "density",
    "evaluate_dataset",
    "loss_total",
    "parse_backend_spec",
    "plan_tiles",
    "simple_boost",
    "solve_alignment",
]
