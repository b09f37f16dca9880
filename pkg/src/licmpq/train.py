"""Full-precision baseline training and RD-loss quantization-aware fine-tuning."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .lic_core import forward_compress, rd_loss
from .quantizer import QuantizedModel

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "rate_bpp", "distortion", "loss", "lr")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; the model holds the last finite epoch's weights."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 90
    batch_size: int = 16
    lr_weights: float = 1e-4
    lr_quant: float = 1e-4
    lmbda: Optional[float] = None  # defaults to the model's own lambda
    seed: int = 0
    crop_size: int = 64
    schedule: str = "cosine"  # "cosine" | "constant"
    crops_per_image: int = 1
    clip_grad_norm: Optional[float] = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (self.lr_weights > 0 and self.lr_quant > 0):
            raise ValueError("learning rates must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def qat_defaults(cls, **kw) -> "TrainConfig":
        base = dict(epochs=30, lr_weights=1e-5, lr_quant=1e-4, schedule="constant")
        base.update(kw)
        return cls(**base)


def _epoch_batches(dataset, cfg: TrainConfig, rng: np.random.Generator):
    """Yields shuffled crop batches; ``dataset`` is an ImageFolder or an (N,3,H,W) tensor."""
    if isinstance(dataset, torch.Tensor):
        crops = [dataset] * cfg.crops_per_image
    else:
        crops = [dataset.random_crops(cfg.crop_size, rng) for _ in range(cfg.crops_per_image)]
    data = torch.cat(crops)
    order = torch.from_numpy(rng.permutation(len(data)))
    for start in range(0, len(data), cfg.batch_size):
        yield data[order[start:start + cfg.batch_size]]


def _steps_per_epoch(dataset, cfg: TrainConfig) -> int:
    n = len(dataset) * cfg.crops_per_image
    return math.ceil(n / cfg.batch_size)


def _run(model, param_groups, dataset, cfg: TrainConfig, lmbda: float,
         start_epoch: int = 0, on_epoch: Optional[Callable] = None) -> list:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    optimizer = torch.optim.Adam(param_groups, betas=(0.9, 0.999), eps=1e-8)
    total = max(1, cfg.epochs * _steps_per_epoch(dataset, cfg))
    if cfg.schedule == "cosine":
        factor = lambda t: 0.5 * (1 + math.cos(math.pi * min(t, total) / total))
    else:
        factor = lambda t: 1.0
    base_lrs = [g["lr"] for g in optimizer.param_groups]
    params = [p for g in param_groups for p in g["params"]]

    history = []
    step = start_epoch * _steps_per_epoch(dataset, cfg)
    model.train()
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.epochs):
            epoch_rng = np.random.default_rng([cfg.seed, epoch])
            if epoch < start_epoch:
                continue
            snapshot = copy.deepcopy(model.state_dict())
            sums = np.zeros(3)
            count = 0
            for batch in _epoch_batches(dataset, cfg, epoch_rng):
                for g, lr in zip(optimizer.param_groups, base_lrs):
                    g["lr"] = lr * factor(step)
                recon, lik_y, lik_z = forward_compress(model, batch, "train")
                m = rd_loss(recon, batch, lik_y, lik_z, lmbda)
                if not torch.isfinite(m.loss):
                    model.load_state_dict(snapshot)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
                optimizer.zero_grad(set_to_none=True)
                m.loss.backward()
                if cfg.clip_grad_norm:
                    torch.nn.utils.clip_grad_norm_(params, cfg.clip_grad_norm)
                optimizer.step()
                step += 1
                n = batch.shape[0]
                sums += n * np.array([float(v.detach()) for v in (m.rate_bpp, m.distortion, m.loss)])
                count += n
            rec = {"epoch": epoch, "rate_bpp": sums[0] / count, "distortion": sums[1] / count,
                   "loss": sums[2] / count, "lr": optimizer.param_groups[0]["lr"]}
            history.append(rec)
            log.info("epoch %d  bpp %.4f  mse %.2f  loss %.4f", epoch, rec["rate_bpp"],
                     rec["distortion"], rec["loss"])
            if on_epoch is not None:
                on_epoch(epoch, model, rec)
    model.eval()
    return history


def train_baseline(model, dataset, config: TrainConfig, start_epoch: int = 0,
                   on_epoch: Optional[Callable] = None):
    """Full-precision training on the RD loss; trains ``model`` in place.

    Returns (model, per-epoch history). ``config.lr_weights`` is the initial
    learning rate for every parameter.
    """
    lmbda = model.lmbda if config.lmbda is None else config.lmbda
    groups = [{"params": [p for p in model.parameters() if p.requires_grad],
               "lr": config.lr_weights}]
    history = _run(model, groups, dataset, config, lmbda, start_epoch, on_epoch)
    return model, history


def qat_finetune(qmodel: QuantizedModel, dataset, config: TrainConfig,
                 on_epoch: Optional[Callable] = None):
    """Quantization-aware fine-tuning on the RD loss alone.

    Network weights and the weight quantizers' (log-scale, zero-point) are
    trained with separate learning rates; bit-widths never change. The input
    model is left untouched and a trained copy is returned with the history.
    """
    if config.epochs == 0:
        return qmodel, []
    trained = copy.deepcopy(qmodel)
    bits_before = list(trained.bits)
    lmbda = trained.lmbda if config.lmbda is None else config.lmbda
    groups = [
        {"params": trained.model_parameters(), "lr": config.lr_weights},
        {"params": trained.quant_parameters(), "lr": config.lr_quant},
    ]
    history = _run(trained, groups, dataset, config, lmbda, 0, on_epoch)
    assert trained.bits == bits_before
    return trained, history


def history_to_csv(history: list, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)
