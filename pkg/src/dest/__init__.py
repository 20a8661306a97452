"""DEST: a simplified transformer for self-supervised monocular depth, on a numpy autodiff engine."""

from .networks import VARIANTS, DepthNet, PoseNet, VariantConfig, count_params_macs, variant
from .tensor import Tensor, default_dtype, no_grad

__all__ = ["Tensor", "default_dtype", "no_grad", "VARIANTS", "VariantConfig", "variant",
           "DepthNet", "PoseNet", "count_params_macs"]
__version__ = "0.1.0"
