"""Entropy models used to estimate the rate of quantized latents.

Only likelihoods are produced; no bitstream is ever written.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LIKELIHOOD_BOUND = 1e-9
SCALE_BOUND = 0.11


def _round_or_noise(x: torch.Tensor, noise: bool) -> torch.Tensor:
    if noise:
        return x + torch.empty_like(x).uniform_(-0.5, 0.5)
    return torch.round(x)


class FactorizedPrior(nn.Module):
    """Non-parametric, channel-wise factorized density for the hyper-latent.

    Each channel has its own small monotone network mapping a value to the
    logit of its cumulative distribution. Positivity of the matrices (via
    softplus) and the bounded tanh gating keep the CDF non-decreasing.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = int(channels)
        self.filters = tuple(int(f) for f in filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))

        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(self.filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(self.filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, inputs: torch.Tensor) -> torch.Tensor:
        # inputs: (C, 1, L)
        logits = inputs
        for i in range(len(self.filters) + 1):
            logits = torch.matmul(F.softplus(self.matrices[i]), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, values: torch.Tensor) -> torch.Tensor:
        """CDF of every channel evaluated at ``values`` (1-D); shape (C, L)."""
        v = values.reshape(1, 1, -1).expand(self.channels, 1, -1)
        return torch.sigmoid(self.logits_cumulative(v)).squeeze(1)

    def likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        n, c, h, w = z_hat.shape
        v = z_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        # evaluate in the tail where the sigmoid difference is not cancelled
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        lik = lik.reshape(c, n, h, w).permute(1, 0, 2, 3)
        return lik.clamp_min(LIKELIHOOD_BOUND)

    def forward(self, z: torch.Tensor, noise: bool):
        z_hat = _round_or_noise(z, noise)
        return z_hat, self.likelihood(z_hat)


class GaussianConditional(nn.Module):
    """Discretized Gaussian likelihood with externally supplied scales/means."""

    def __init__(self, scale_bound: float = SCALE_BOUND):
        super().__init__()
        self.scale_bound = scale_bound

    @staticmethod
    def _std_cdf(x: torch.Tensor) -> torch.Tensor:
        return 0.5 * torch.erfc(-x / math.sqrt(2.0))

    def likelihood(self, y_hat: torch.Tensor, scales: torch.Tensor, means=None) -> torch.Tensor:
        values = y_hat - means if means is not None else y_hat
        values = torch.abs(values)
        upper = self._std_cdf((0.5 - values) / scales)
        lower = self._std_cdf((-0.5 - values) / scales)
        return (upper - lower).clamp_min(LIKELIHOOD_BOUND)

    def forward(self, y: torch.Tensor, scales: torch.Tensor, means=None, noise: bool = False):
        y_hat = _round_or_noise(y, noise)
        return y_hat, self.likelihood(y_hat, scales, means)
