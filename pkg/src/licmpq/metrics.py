"""PSNR/bpp evaluation, RD curves, Bjontegaard delta rate and bit-width reports."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

from .lic_core import RDMetrics, forward_compress

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
# layer-index ranges of the four paths in the 14-layer hyperprior models
PATH_RANGES = {"main-encoder": (0, 3), "main-decoder": (4, 7),
               "hyper-encoder": (8, 10), "hyper-decoder": (11, 13)}


def psnr(mse: float, cap: float = PSNR_CAP_DB) -> float:
    """PSNR in dB for an MSE measured on the 0-255 scale."""
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(255.0 ** 2 / mse))


def _pad_reflect(x: torch.Tensor, factor: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if not (ph or pw):
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


@torch.no_grad()
def evaluate_image(model, image: torch.Tensor) -> RDMetrics:
    """Eval-mode RD metrics of one (3,H,W) image; padding is excluded from all metrics."""
    x = image.unsqueeze(0) if image.dim() == 3 else image
    h, w = x.shape[-2:]
    padded = _pad_reflect(x, model.downsampling)
    recon, lik_y, lik_z = forward_compress(model, padded, "eval")
    recon = recon[..., :h, :w].clamp(0, 1)
    bits = -torch.log2(lik_y).sum()
    if lik_z is not None:
        bits = bits - torch.log2(lik_z).sum()
    rate = bits / (x.shape[0] * h * w)
    mse = torch.mean((255.0 * x - 255.0 * recon) ** 2)
    return RDMetrics(rate, mse, model.lmbda, rate + model.lmbda * mse)


def evaluate_model(model, images):
    """Mean bpp, mean PSNR and per-image metrics over ``images``.

    ``images`` is a directory path, an ImageFolder, or a list of (3,H,W) tensors.
    Means are unweighted over images.
    """
    from .data_store import ImageFolder

    if isinstance(images, (str, Path)):
        images = ImageFolder(images)
    if isinstance(images, ImageFolder):
        if images.skipped:
            log.warning("%d unreadable images skipped", len(images.skipped))
        images = images.full_images()
    if len(images) == 0:
        raise ValueError("no images to evaluate")
    was_training = model.training
    model.eval()
    try:
        metrics = [evaluate_image(model, im) for im in images]
    finally:
        model.train(was_training)
    bpp = float(np.mean([float(m.rate_bpp) for m in metrics]))
    db = float(np.mean([psnr(float(m.distortion)) for m in metrics]))
    return bpp, db, metrics


@dataclass
class RDCurve:
    points: list  # [(bpp, psnr_db)], sorted by bpp
    label: str = ""

    def __post_init__(self):
        self.points = sorted((float(b), float(p)) for b, p in self.points)
        if len(self.points) < 2:
            raise ValueError("an RD curve needs at least 2 points")
        rates = [b for b, _ in self.points]
        if any(b2 <= b1 for b1, b2 in zip(rates, rates[1:])):
            raise ValueError("bpp values must be strictly increasing")
        if any(b <= 0 for b in rates):
            raise ValueError("bpp values must be positive")
        if not all(math.isfinite(p) for _, p in self.points):
            raise ValueError("PSNR values must be finite")

    @property
    def rates(self) -> np.ndarray:
        return np.array([b for b, _ in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p for _, p in self.points])


def _log_rate_integral(psnrs, log_rates, lo, hi, method):
    if method == "cubic":
        degree = min(3, len(psnrs) - 1)
        poly = np.polyint(np.polyfit(psnrs, log_rates, degree))
        return np.polyval(poly, hi) - np.polyval(poly, lo)
    if method == "pchip":
        order = np.argsort(psnrs)
        return float(PchipInterpolator(psnrs[order], log_rates[order]).integrate(lo, hi))
    raise ValueError(f"unknown BD-rate method {method!r}")


def bd_rate(reference: RDCurve, test: RDCurve, method: str = "cubic") -> float:
    """Average rate difference (percent) of ``test`` vs ``reference`` at equal PSNR.

    Log10-rate is fitted as a polynomial of PSNR (cubic, or lower when a curve
    has fewer than four points) and integrated over the shared PSNR interval.
    Positive means the test curve needs more rate.
    """
    lo = max(reference.psnrs.min(), test.psnrs.min())
    hi = min(reference.psnrs.max(), test.psnrs.max())
    if not hi > lo:
        raise ValueError("RD curves do not overlap in PSNR")
    int_ref = _log_rate_integral(reference.psnrs, np.log10(reference.rates), lo, hi, method)
    int_test = _log_rate_integral(test.psnrs, np.log10(test.rates), lo, hi, method)
    avg = (int_test - int_ref) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)


def write_rd_csv(path, rows: Sequence[dict]):
    """rows: dicts with quality, lambda, bpp, psnr (extra keys such as label kept)."""
    keys = ["label", "quality", "lambda", "bpp", "psnr"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def plot_rd_curves(curves: Sequence[RDCurve], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for c in curves:
        ax.plot(c.rates, c.psnrs, marker="o", label=c.label)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _layer_path(idx: int, n_layers: int) -> str:
    if n_layers != 14:
        return "unknown"
    for name, (a, b) in PATH_RANGES.items():
        if a <= idx <= b:
            return name
    return "unknown"


def bit_distribution_report(assignments: dict, plot_path=None, csv_path=None) -> dict:
    """Layer x quality matrix of bit-widths with path labels and a main-vs-hyper summary."""
    if not assignments:
        raise ValueError("no assignments given")
    qualities = sorted(assignments)
    columns = [list(getattr(assignments[q], "bits", assignments[q])) for q in qualities]
    lengths = {len(c) for c in columns}
    if len(lengths) != 1:
        raise ValueError(f"assignments have inconsistent layer counts {sorted(lengths)}")
    n = lengths.pop()
    matrix = [[col[i] for col in columns] for i in range(n)]
    paths = [_layer_path(i, n) for i in range(n)]
    main = [v for i, row in enumerate(matrix) if paths[i].startswith("main") for v in row]
    hyper = [v for i, row in enumerate(matrix) if paths[i].startswith("hyper") for v in row]
    report = {
        "qualities": qualities,
        "layers": list(range(n)),
        "paths": paths,
        "matrix": matrix,
        "mean_main_bits": float(np.mean(main)) if main else None,
        "mean_hyper_bits": float(np.mean(hyper)) if hyper else None,
    }
    report["main_ge_hyper"] = (
        report["mean_main_bits"] >= report["mean_hyper_bits"] if main and hyper else None)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "path"] + [f"q{q}" for q in qualities])
            for i, row in enumerate(matrix):
                w.writerow([i, paths[i]] + row)
    if plot_path is not None:
        _plot_bits(matrix, qualities, paths, plot_path)
    return report


def _plot_bits(matrix, qualities, paths, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    arr = np.array(matrix)
    n, q = arr.shape
    fig, ax = plt.subplots(figsize=(max(6, n * 0.5), 3.5))
    width = 0.8 / q
    for j in range(q):
        ax.bar(np.arange(n) + (j - (q - 1) / 2) * width, arr[:, j], width, label=f"q={qualities[j]}")
    bounds = [i + 0.5 for i in range(n - 1) if paths[i] != paths[i + 1]]
    for b in bounds:
        ax.axvline(b, color="gray", lw=0.8, ls="--")
    ax.set_xticks(range(n))
    ax.set_xlabel("layer index")
    ax.set_ylabel("bit-width")
    ax.legend(fontsize="small", ncol=min(q, 4))
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
