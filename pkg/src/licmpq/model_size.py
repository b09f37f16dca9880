"""Storage accounting for quantized conv layers.

Per layer: (C_out * C_in * k**2 + C_out) * b bits of weights and bias, plus a
float32 (scale, zero-point) pair per output channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Sequence

BITS_PER_MB = 8 * 2 ** 20
QPARAM_BITS = 32
MAX_BITS = 32


@dataclass
class SizeReport:
    per_layer_bits: list
    total_bits: int
    total_mb: float
    cr_vs_8bit: float
    unquantized_bits: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def layer_size_bits(layer, b: int) -> int:
    if not 2 <= int(b) <= MAX_BITS:
        raise ValueError(f"bit-width {b} outside [2, {MAX_BITS}]")
    c_out, c_in, k = layer.c_out, layer.c_in, layer.k
    return (c_out * c_in * k * k + c_out) * int(b) + c_out * 2 * QPARAM_BITS


def total_bits(layers: Sequence, bits: Sequence[int]) -> int:
    if len(layers) != len(bits):
        raise ValueError(f"{len(bits)} bit-widths for {len(layers)} layers")
    return sum(layer_size_bits(layer, b) for layer, b in zip(layers, bits))


def compression_ratio(assignment, model) -> float:
    """Size of the mixed-precision model over the all-8-bit model (quantizable layers only)."""
    from .lic_core import list_quantizable_layers

    layers = list_quantizable_layers(model)
    bits = list(getattr(assignment, "bits", assignment))
    return total_bits(layers, bits) / total_bits(layers, [8] * len(layers))


def unquantized_bits(model) -> int:
    """Parameters outside the quantizable layers (entropy bottleneck), at 32 bits each."""
    base = getattr(model, "base", model)
    return sum(p.numel() for p in base.entropy_bottleneck.parameters()) * 32


def model_size_report(model, assignment) -> SizeReport:
    from .lic_core import list_quantizable_layers

    layers = list_quantizable_layers(model)
    bits = list(getattr(assignment, "bits", assignment))
    if len(bits) != len(layers):
        raise ValueError(f"{len(bits)} bit-widths for {len(layers)} layers")
    per_layer = [layer_size_bits(layer, b) for layer, b in zip(layers, bits)]
    total = sum(per_layer)
    ref = total_bits(layers, [8] * len(layers))
    cr = total / ref if ref else 1.0
    return SizeReport(per_layer, total, total / BITS_PER_MB, cr, unquantized_bits(model))
