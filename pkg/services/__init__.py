"""Services layer - quantization algorithms separated from the CLI."""
from .attention_share import SharingPlan, SimilarityMatrix
from .quantizer import QuantConfig, QuantizedTensor
from .rotation import BalancingParams, BlockRotation, RotationBlock, RotationBuildConfig
from .smoothing import SmoothingDiag
from .time_bank import Grouping, TimeParamBank

__all__ = [
    "BalancingParams",
    "BlockRotation",
    "Grouping",
    "QuantConfig",
    "QuantizedTensor",
    "RotationBlock",
    "RotationBuildConfig",
    "SharingPlan",
    "SimilarityMatrix",
    "SmoothingDiag",
    "TimeParamBank",
]
