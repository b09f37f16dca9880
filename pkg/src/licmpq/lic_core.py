"""Compact hyperprior compression networks and the rate-distortion loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy import FactorizedPrior, GaussianConditional, SCALE_BOUND

LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)
VARIANTS = ("scale-hyperprior", "mean-scale-hyperprior")
PATHS = ("main-encoder", "main-decoder", "hyper-encoder", "hyper-decoder")

TOY_WIDTHS = {"main": 32, "latent": 32, "hyper": 16}
FULL_WIDTHS = {"main": 128, "latent": 192, "hyper": 128}
DEFAULT_STRIDES = {"main": (2, 2, 2, 2), "hyper": (1, 2, 2)}


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str  # "conv" | "tconv"
    c_out: int
    c_in: int
    k: int
    stride: int
    path: str

    @property
    def weight_shape(self) -> tuple:
        return (self.c_out, self.c_in, self.k, self.k)


@dataclass
class RDMetrics:
    """Rate (bpp), distortion (MSE on the 0-255 scale), lambda and combined loss.

    Fields hold 0-dim tensors while training so the loss stays differentiable;
    call :meth:`floats` for reporting.
    """

    rate_bpp: torch.Tensor
    distortion: torch.Tensor
    lmbda: float
    loss: torch.Tensor

    def floats(self) -> dict:
        return {
            "rate_bpp": float(torch.as_tensor(self.rate_bpp).detach()),
            "distortion": float(torch.as_tensor(self.distortion).detach()),
            "lambda": float(self.lmbda),
            "loss": float(torch.as_tensor(self.loss).detach()),
        }


def conv(c_in, c_out, k, stride):
    return nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2)


def tconv(c_in, c_out, k, stride):
    return nn.ConvTranspose2d(
        c_in, c_out, k, stride=stride, padding=k // 2, output_padding=stride - 1
    )


def _stack(layers):
    mods = []
    for i, layer in enumerate(layers):
        mods.append(layer)
        if i < len(layers) - 1:
            mods.append(nn.LeakyReLU(0.1))
    return nn.Sequential(*mods)


class LicModel(nn.Module):
    """Transform-coding network: analysis/synthesis transforms plus entropy models.

    With ``h_a``/``h_s`` given, the main latent is coded under a Gaussian whose
    parameters come from the hyper decoder. Without them, the main latent is
    coded directly under a factorized prior (used for tiny test models).
    """

    def __init__(
        self,
        g_a: nn.Sequential,
        g_s: nn.Sequential,
        h_a: Optional[nn.Sequential] = None,
        h_s: Optional[nn.Sequential] = None,
        *,
        variant: str = "mean-scale-hyperprior",
        latent_channels: int,
        hyper_channels: Optional[int] = None,
        quality_index: int = 3,
        lmbda: Optional[float] = None,
        config: Optional[dict] = None,
    ):
        super().__init__()
        self.g_a, self.g_s = g_a, g_s
        self.h_a, self.h_s = h_a, h_s
        self.variant = variant
        self.quality_index = quality_index
        self.lmbda = LAMBDAS[quality_index] if lmbda is None else float(lmbda)
        self.config = dict(config or {})
        if h_a is None:
            self.entropy_bottleneck = FactorizedPrior(latent_channels)
            self.gaussian_conditional = None
        else:
            self.entropy_bottleneck = FactorizedPrior(hyper_channels)
            self.gaussian_conditional = GaussianConditional()
        self.layers = self._index_layers()

    def _index_layers(self):
        specs, idx = [], 0
        for seq, path in zip(self._sequences(), PATHS):
            for m in seq:
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                    kind = "tconv" if isinstance(m, nn.ConvTranspose2d) else "conv"
                    specs.append(
                        LayerSpec(idx, kind, m.out_channels, m.in_channels,
                                  m.kernel_size[0], m.stride[0], path)
                    )
                    idx += 1
        return specs

    def _sequences(self):
        return [self.g_a, self.g_s] + ([self.h_a, self.h_s] if self.h_a is not None else [])

    def layer_modules(self) -> list:
        """Quantizable modules (plain or quantizer-wrapped) in layer-index order."""
        return [m for seq in self._sequences() for m in seq if _is_layer(m)]

    def swap_layer(self, index: int, new: nn.Module) -> nn.Module:
        """Replace the module of quantizable layer ``index``; returns the old one."""
        count = 0
        for seq in self._sequences():
            for pos, m in enumerate(seq):
                if _is_layer(m):
                    if count == index:
                        seq[pos] = new
                        return m
                    count += 1
        raise IndexError(index)

    @property
    def downsampling(self) -> int:
        f = 1
        seqs = [self.g_a] + ([self.h_a] if self.h_a is not None else [])
        for seq in seqs:
            for m in seq:
                if _is_layer(m):
                    f *= _layer_stride(m)
        return f

    def forward(self, x: torch.Tensor, noise: Optional[bool] = None):
        if noise is None:
            noise = self.training
        f = self.downsampling
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by downsampling factor {f}"
            )
        y = self.g_a(x)
        if self.h_a is None:
            y_hat, lik_y = self.entropy_bottleneck(y, noise)
            return self.g_s(y_hat), lik_y, None
        # the scale variant sees |y| as in the original hyperprior design
        z = self.h_a(y if self.variant == "mean-scale-hyperprior" else torch.abs(y))
        z_hat, lik_z = self.entropy_bottleneck(z, noise)
        params = self.h_s(z_hat)
        if self.variant == "mean-scale-hyperprior":
            raw_scales, means = params.chunk(2, 1)
        else:
            raw_scales, means = params, None
        scales = SCALE_BOUND + F.softplus(raw_scales)
        y_hat, lik_y = self.gaussian_conditional(y, scales, means, noise=noise)
        return self.g_s(y_hat), lik_y, lik_z

    def hyper_scales(self, x: torch.Tensor) -> torch.Tensor:
        """Positive Gaussian scales produced for input ``x`` (eval rounding)."""
        y = self.g_a(x)
        z = self.h_a(y if self.variant == "mean-scale-hyperprior" else torch.abs(y))
        params = self.h_s(torch.round(z))
        raw = params.chunk(2, 1)[0] if self.variant == "mean-scale-hyperprior" else params
        return SCALE_BOUND + F.softplus(raw)


def _is_layer(m) -> bool:
    # quantizer-wrapped layers expose the wrapped conv as ``.layer``
    return isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) or isinstance(
        getattr(m, "layer", None), (nn.Conv2d, nn.ConvTranspose2d))


def _layer_stride(m) -> int:
    inner = getattr(m, "layer", m)
    return inner.stride[0]


def build_model(
    variant: str = "mean-scale-hyperprior",
    width_config: Optional[dict] = None,
    quality_index: int = 3,
    seed: int = 0,
    strides: Optional[dict] = None,
) -> LicModel:
    """Build a hyperprior model with deterministic initialization.

    Weights are drawn from PyTorch's default initializers under
    ``torch.manual_seed(seed)``; the global RNG state is restored afterwards.
    ``width_config`` takes keys ``main`` (hidden channels of the main
    transforms), ``latent`` (channels of y) and ``hyper`` (channels of z).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not 0 <= quality_index < len(LAMBDAS):
        raise ValueError(f"quality_index must be in [0, {len(LAMBDAS) - 1}]")
    widths = dict(TOY_WIDTHS)
    widths.update(width_config or {})
    for key, val in widths.items():
        if int(val) < 4:
            raise ValueError(f"channel count {key}={val} must be >= 4")
    strides = {**DEFAULT_STRIDES, **(strides or {})}
    s_main, s_hyp = tuple(strides["main"]), tuple(strides["hyper"])
    if len(s_main) != 4 or len(s_hyp) != 3 or min(s_main + s_hyp) < 1:
        raise ValueError("strides need 4 positive main and 3 positive hyper entries")
    n, m, h = int(widths["main"]), int(widths["latent"]), int(widths["hyper"])

    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        g_a = _stack([conv(3, n, 5, s_main[0]), conv(n, n, 5, s_main[1]),
                      conv(n, n, 5, s_main[2]), conv(n, m, 5, s_main[3])])
        g_s = _stack([tconv(m, n, 5, s_main[3]), tconv(n, n, 5, s_main[2]),
                      tconv(n, n, 5, s_main[1]), tconv(n, 3, 5, s_main[0])])
        h_a = _stack([conv(m, h, 3, s_hyp[0]), conv(h, h, 5, s_hyp[1]), conv(h, h, 5, s_hyp[2])])
        if variant == "mean-scale-hyperprior":
            h_s = _stack([tconv(h, m, 5, s_hyp[2]), tconv(m, m * 3 // 2, 5, s_hyp[1]),
                          conv(m * 3 // 2, 2 * m, 3, s_hyp[0])])
        else:
            h_s = _stack([tconv(h, h, 5, s_hyp[2]), tconv(h, h, 5, s_hyp[1]),
                          conv(h, m, 3, s_hyp[0])])
        config = {
            "variant": variant,
            "widths": {"main": n, "latent": m, "hyper": h},
            "strides": {"main": list(s_main), "hyper": list(s_hyp)},
            "quality_index": quality_index,
            "lambda": LAMBDAS[quality_index],
            "seed": seed,
        }
        model = LicModel(g_a, g_s, h_a, h_s, variant=variant, latent_channels=m,
                         hyper_channels=h, quality_index=quality_index, config=config)
    finally:
        torch.random.set_rng_state(state)
    return model


def build_factorized_model(channels: int = 4, k: int = 3, stride: int = 2, seed: int = 0,
                           lmbda: float = LAMBDAS[3]) -> LicModel:
    """Two-layer model (one conv, one tconv) with a factorized prior on y."""
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        g_a = nn.Sequential(conv(3, channels, k, stride))
        g_s = nn.Sequential(tconv(channels, 3, k, stride))
        model = LicModel(g_a, g_s, variant="factorized", latent_channels=channels, lmbda=lmbda,
                         config={"variant": "factorized", "channels": channels, "k": k,
                                 "stride": stride, "lambda": lmbda, "seed": seed})
    finally:
        torch.random.set_rng_state(state)
    return model


def model_from_config(config: dict) -> LicModel:
    if config.get("variant") == "factorized":
        return build_factorized_model(config["channels"], config["k"], config["stride"],
                                      config.get("seed", 0), config["lambda"])
    model = build_model(config["variant"], config["widths"], config["quality_index"],
                        config.get("seed", 0), config.get("strides"))
    if "lambda" in config:
        model.lmbda = float(config["lambda"])
        model.config["lambda"] = model.lmbda
    return model


def forward_compress(model: nn.Module, batch: torch.Tensor, mode: str = "eval"):
    """Run the compression pass; returns (reconstruction, likelihoods_y, likelihoods_z).

    ``mode="eval"`` hard-rounds latents; ``mode="train"`` adds uniform noise.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model(batch, noise=(mode == "train"))


def rd_loss(reconstruction, original, likelihoods_y, likelihoods_z, lmbda) -> RDMetrics:
    """Rate + lambda * distortion, with rate in bits per pixel."""
    if reconstruction.shape != original.shape:
        raise ValueError(f"shape mismatch {tuple(reconstruction.shape)} vs {tuple(original.shape)}")
    n, _, h, w = original.shape
    pixels = n * h * w
    bits = 0.0
    for lik in (likelihoods_y, likelihoods_z):
        if lik is None:
            continue
        if bool((lik <= 0).any()):
            raise ValueError("non-positive likelihood from entropy model")
        bits = bits - torch.log2(lik).sum()
    rate = torch.as_tensor(bits, dtype=original.dtype) / pixels
    distortion = torch.mean((255.0 * original - 255.0 * reconstruction) ** 2)
    return RDMetrics(rate, distortion, lmbda, rate + lmbda * distortion)


def list_quantizable_layers(model) -> list:
    base = getattr(model, "base", model)
    return list(base.layers)
