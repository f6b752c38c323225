"""Adaptive dual-pathway feed-forward transformer with a shared weight set.

The width pathway routes tokens across virtual experts sliced out of one
shared FFN; the depth pathway recurses that same FFN with a learned
per-token loop count; a difficulty-aware gate fuses the two. Includes a
from-scratch tape autodiff engine, an AdamW training harness, and an
analytical parameter/FLOPs budgeting tool.
"""

from dualffn.config import RunConfig, load_config, parse_config
from dualffn.fusion import DualPathModel, build_model, model_forward
from dualffn.rng import Rng
from dualffn.tensor import Tape, Tensor, backward

__all__ = [
    "DualPathModel",
    "Rng",
    "RunConfig",
    "Tape",
    "Tensor",
    "backward",
    "build_model",
    "load_config",
    "model_forward",
    "parse_config",
]
__version__ = "0.1.0"
