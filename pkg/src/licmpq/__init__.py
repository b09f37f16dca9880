"""Mixed-precision quantization of learned image compression models."""

from .lic_core import (
    LAMBDAS,
    LayerSpec,
    LicModel,
    RDMetrics,
    build_model,
    forward_compress,
    list_quantizable_layers,
    rd_loss,
)
from .quantizer import QuantParams, QuantizedModel, attach_quantizers, calibrate_params, quantize_affine
from .model_size import compression_ratio, layer_size_bits, model_size_report

from .assign import BitAssignment, ZetaTable, assign_bits
from .search import adaptive_search, exhaustive_search, search_bits

__all__ = [
    "LAMBDAS", "LayerSpec", "LicModel", "RDMetrics", "build_model", "forward_compress",
    "list_quantizable_layers", "rd_loss", "QuantParams", "QuantizedModel", "attach_quantizers",
    "calibrate_params", "quantize_affine", "compression_ratio", "layer_size_bits",
    "model_size_report", "BitAssignment", "ZetaTable", "assign_bits", "adaptive_search",
    "exhaustive_search", "search_bits",
]

__version__ = "0.1.0"
