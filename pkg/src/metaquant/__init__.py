"""Mixed-precision meta-networks: one set of shared weights runnable at any per-layer bit-width."""

from ._kernels import BACKEND
from .errors import MetaQuantError
from .metanet import ArchConfig, MetaNet, QuantConfig
from .quantizer import FP_BITS, quant_backward, quant_forward

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "BACKEND",
    "FP_BITS",
    "MetaNet",
    "MetaQuantError",
    "QuantConfig",
    "quant_backward",
    "quant_forward",
]
