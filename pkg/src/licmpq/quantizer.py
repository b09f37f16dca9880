"""Uniform affine fake quantization with surrogate gradients for QAT.

The quantizer maps x to s * (round(clip(x / s + z, 0, 2**b)) - z). Weights use
static per-output-channel parameters (learnable during QAT); activations use
per-tensor parameters recomputed from every input.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-8
DEFAULT_LEAK = 0.01


@dataclass
class QuantParams:
    scale: torch.Tensor  # shape (C,) per-channel, () per-tensor
    zero_point: torch.Tensor
    bits: int
    mode: str = "static"  # "static" | "dynamic"
    granularity: str = "per-channel"  # "per-channel" | "per-tensor"
    axis: int = 0

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if bool((self.scale <= 0).any()):
            raise ValueError("quantizer scale must be positive")

    def broadcast(self, x: torch.Tensor):
        """Scale and zero-point reshaped to broadcast against ``x``."""
        if self.granularity == "per-tensor":
            return self.scale, self.zero_point
        shape = [1] * x.dim()
        shape[self.axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)


def quantize_affine(x: torch.Tensor, params: QuantParams) -> torch.Tensor:
    s, z = params.broadcast(x)
    q = torch.round(torch.clamp(x / s + z, 0, 2 ** params.bits))
    return s * (q - z)


def calibrate_params(tensor: torch.Tensor, bits: int, granularity: str = "per-channel",
                     axis: int = 0, mode: Optional[str] = None) -> QuantParams:
    """Min-max affine parameters: s = (max - min) / 2**b, z = round(-min / s).

    Channels with zero range get s = EPS, z = 0.
    """
    if tensor.numel() == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    t = tensor.detach()
    if granularity == "per-channel":
        flat = t.movedim(axis, 0).reshape(t.shape[axis], -1)
        lo, hi = flat.min(dim=1).values, flat.max(dim=1).values
    elif granularity == "per-tensor":
        lo, hi = t.min(), t.max()
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    span = hi - lo
    degenerate = span <= 0
    scale = torch.where(degenerate, torch.full_like(span, EPS), span / 2 ** bits)
    scale = scale.clamp_min(EPS)
    zero = torch.where(degenerate, torch.zeros_like(lo), torch.round(-lo / scale))
    if mode is None:
        mode = "static" if granularity == "per-channel" else "dynamic"
    return QuantParams(scale, zero, int(bits), mode, granularity, axis)


class _FakeQuant(torch.autograd.Function):
    """Forward: exact affine quantization. Backward: STE through rounding,
    slope ``leak`` outside the clip range, gradient to the scale through both
    of its occurrences."""

    @staticmethod
    def forward(ctx, x, s, z, bits, leak):
        qmax = 2 ** bits
        u = x / s + z
        r = torch.round(torch.clamp(u, 0, qmax))
        ctx.save_for_backward(x, s, z, u, r)
        ctx.leak = leak
        ctx.qmax = qmax
        return s * (r - z)

    @staticmethod
    def backward(ctx, grad):
        x, s, z, u, r = ctx.saved_tensors
        inside = (u >= 0) & (u <= ctx.qmax)
        slope = torch.where(inside, torch.ones_like(u), torch.full_like(u, ctx.leak))
        gx = grad * slope
        gs = grad * ((r - z) - slope * x / s)
        gz = grad * s * (slope - 1)
        return gx, _reduce_to(gs, s), _reduce_to(gz, z), None, None


def _reduce_to(g: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if g.shape == ref.shape:
        return g
    if ref.dim() == 0:
        return g.sum()
    dims = [i for i, (a, b) in enumerate(zip(g.shape, ref.shape)) if b == 1 and a != 1]
    out = g.sum(dim=dims, keepdim=True) if dims else g
    return out.reshape(ref.shape)


def fake_quant(x: torch.Tensor, scale: torch.Tensor, zero_point: torch.Tensor, bits: int,
               leak: float = DEFAULT_LEAK) -> torch.Tensor:
    """Differentiable quantize_affine; ``scale``/``zero_point`` must broadcast to ``x``."""
    if not 0 < leak < 1:
        raise ValueError("leak must lie in (0, 1)")
    return _FakeQuant.apply(x, scale, zero_point, int(bits), float(leak))


class WeightQuantizer(nn.Module):
    """Static per-channel quantizer with learnable scale (log-parameterized) and zero-point."""

    def __init__(self, params: QuantParams, leak: float = DEFAULT_LEAK):
        super().__init__()
        self.bits = int(params.bits)
        self.axis = params.axis
        self.leak = leak
        self.log_scale = nn.Parameter(torch.log(params.scale.detach().clone()))
        self.zero_point = nn.Parameter(params.zero_point.detach().clone())

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    def params(self) -> QuantParams:
        return QuantParams(self.scale.detach().clamp_min(EPS), self.zero_point.detach(),
                           self.bits, "static", "per-channel", self.axis)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        shape = [1] * w.dim()
        shape[self.axis] = -1
        s = self.scale.clamp_min(EPS).reshape(shape)
        return fake_quant(w, s, self.zero_point.reshape(shape), self.bits, self.leak)


class ActivationQuantizer(nn.Module):
    """Dynamic per-tensor quantizer; parameters are recomputed from each input."""

    def __init__(self, bits: int, leak: float = DEFAULT_LEAK):
        super().__init__()
        if bits < 2:
            raise ValueError(f"activation bits must be >= 2, got {bits}")
        self.bits = int(bits)
        self.leak = leak
        self.last_params: Optional[QuantParams] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = calibrate_params(x, self.bits, "per-tensor", mode="dynamic")
        self.last_params = p
        return fake_quant(x, p.scale, p.zero_point, self.bits, self.leak)


class QuantLayer(nn.Module):
    """Conv or transposed conv with fake-quantized input and weights."""

    def __init__(self, layer: nn.Module, weight_quantizer: WeightQuantizer,
                 act_quantizer: Optional[ActivationQuantizer]):
        super().__init__()
        self.layer = layer
        self.weight_quantizer = weight_quantizer
        self.act_quantizer = act_quantizer

    def forward(self, x):
        if self.act_quantizer is not None:
            x = self.act_quantizer(x)
        w = self.weight_quantizer(self.layer.weight)
        m = self.layer
        if isinstance(m, nn.ConvTranspose2d):
            return F.conv_transpose2d(x, w, m.bias, m.stride, m.padding, m.output_padding,
                                      m.groups, m.dilation)
        return F.conv2d(x, w, m.bias, m.stride, m.padding, m.dilation, m.groups)


def channel_axis(layer: nn.Module) -> int:
    # ConvTranspose2d stores weights as (in, out, k, k)
    return 1 if isinstance(layer, nn.ConvTranspose2d) else 0


class QuantizedModel(nn.Module):
    """A copy of a LicModel whose quantizable layers run with fake quantization."""

    def __init__(self, base: nn.Module, bits: Sequence[int], activation_bits: Optional[int],
                 leak: float = DEFAULT_LEAK, beta_used: Optional[float] = None):
        super().__init__()
        bits = [int(b) for b in bits]
        n_layers = len(base.layers)
        if len(bits) != n_layers:
            raise ValueError(f"assignment has {len(bits)} entries, model has {n_layers} layers")
        self.base = copy.deepcopy(base)
        self.bits = bits
        self.activation_bits = activation_bits
        self.leak = leak
        self.beta_used = beta_used
        for idx, b in enumerate(bits):
            layer = self.base.layer_modules()[idx]
            wq = WeightQuantizer(
                calibrate_params(layer.weight, b, "per-channel", axis=channel_axis(layer)), leak)
            aq = ActivationQuantizer(activation_bits, leak) if activation_bits else None
            self.base.swap_layer(idx, QuantLayer(layer, wq, aq))

    @property
    def layers(self):
        return self.base.layers

    @property
    def lmbda(self):
        return self.base.lmbda

    @property
    def downsampling(self):
        return self.base.downsampling

    @property
    def config(self):
        return self.base.config

    @property
    def bit_assignment(self) -> list:
        return list(self.bits)

    @property
    def weight_quantizers(self) -> dict:
        return {i: m.weight_quantizer for i, m in enumerate(self.base.layer_modules())}

    @property
    def activation_quantizers(self) -> dict:
        return {i: m.act_quantizer for i, m in enumerate(self.base.layer_modules())}

    def quant_parameters(self) -> list:
        return [p for q in self.weight_quantizers.values() for p in q.parameters()]

    def model_parameters(self) -> list:
        ids = {id(p) for p in self.quant_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def forward(self, x, noise=None):
        if noise is None:
            noise = self.training
        return self.base(x, noise=noise)


def attach_quantizers(model: nn.Module, assignment, activation_bits: Optional[int] = 8,
                      calib_batch: Optional[torch.Tensor] = None,
                      leak: float = DEFAULT_LEAK) -> QuantizedModel:
    """Wrap ``model`` with per-channel weight quantizers at the assigned widths.

    Weight parameters are calibrated (min-max) from the current weights.
    Activation quantizers are dynamic, so ``calib_batch`` is only pushed
    through once to record the per-layer activation ranges.
    """
    bits = getattr(assignment, "bits", assignment)
    qmodel = QuantizedModel(model, bits, activation_bits, leak,
                            getattr(assignment, "beta_used", None))
    if calib_batch is not None:
        was_training = qmodel.training
        qmodel.eval()
        with torch.no_grad():
            qmodel(calib_batch, noise=False)
        qmodel.train(was_training)
    return qmodel
