"""NumPy-only toolkit for the NEXcepTion model family.

Separable-convolution residual networks with a searchable block design
space, the LAMB/cosine training recipe, exact cost accounting, and a
surrogate-model configuration search. Everything is deterministic under
explicit seeds; no deep-learning framework is involved.
"""

from .models import ArchConfig, VARIANT_NAMES, build_variant
from .nas import lpi_importance, search
from .summary import count_flops
from .training import TrainConfig, evaluate, train_model

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "TrainConfig",
    "VARIANT_NAMES",
    "build_variant",
    "count_flops",
    "evaluate",
    "lpi_importance",
    "search",
    "train_model",
    "__version__",
]
