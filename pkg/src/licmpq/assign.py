"""Per-layer quantization sensitivity and RD-loss-driven bit assignment."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
from torch.func import functional_call

from .lic_core import forward_compress, rd_loss
from .quantizer import calibrate_params, channel_axis, quantize_affine

DEFAULT_B_MAX = 8
ZETA_FIELDS = ("layer", "bits", "rd_full", "rd_quant", "zeta")


@dataclass(frozen=True)
class SensitivityRecord:
    layer_index: int
    bits: int
    rd_full: float
    rd_quant: float
    zeta: float


@dataclass
class BitAssignment:
    bits: list
    b_max: int = DEFAULT_B_MAX
    beta_used: Optional[float] = None
    b_min: int = 2

    def __post_init__(self):
        self.bits = [int(b) for b in self.bits]
        bad = [b for b in self.bits if not self.b_min <= b <= self.b_max]
        if bad:
            raise ValueError(f"bit-widths {bad} outside [{self.b_min}, {self.b_max}]")

    @property
    def candidates(self) -> list:
        return list(range(self.b_min, self.b_max + 1))

    def __len__(self):
        return len(self.bits)

    def to_dict(self) -> dict:
        return {
            "layers": {str(i): b for i, b in enumerate(self.bits)},
            "beta_used": self.beta_used,
            "L": self.candidates,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "BitAssignment":
        layers = d["layers"]
        bits = [layers[str(i)] for i in range(len(layers))]
        cand = d.get("L") or [2, max(bits)]
        return cls(bits, b_max=max(cand), beta_used=d.get("beta_used"), b_min=min(cand))

    @classmethod
    def load(cls, path) -> "BitAssignment":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def zeta_value(rd_full: float, rd_quant: float) -> float:
    """Fractional RD-loss change in percent."""
    if not rd_full > 0:
        raise ValueError(f"full-precision RD loss must be positive, got {rd_full}")
    return abs((rd_quant - rd_full) / rd_full) * 100.0


def tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().cpu().numpy().tobytes()).hexdigest()


def model_fingerprint(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


def _weight_names(model) -> list:
    """State-dict names of the quantizable layers' weights, in layer order."""
    ids = {id(m): i for i, m in enumerate(model.layer_modules())}
    names = [None] * len(ids)
    for name, mod in model.named_modules():
        if id(mod) in ids:
            names[ids[id(mod)]] = name + ".weight"
    return names


@torch.no_grad()
def _eval_rd(model, calib: torch.Tensor, overrides: Optional[dict] = None,
             batch_size: int = 16) -> float:
    # pixel-weighted mean over equally sized calibration crops
    total, n = 0.0, 0
    for start in range(0, calib.shape[0], batch_size):
        x = calib[start:start + batch_size]
        if overrides:
            out = functional_call(model, overrides, (x,), {"noise": False}, strict=False)
        else:
            out = forward_compress(model, x, "eval")
        total += float(rd_loss(out[0], x, out[1], out[2], model.lmbda).loss) * x.shape[0]
        n += x.shape[0]
    return total / n


def quantized_layer_weight(model, index: int, bits: int) -> torch.Tensor:
    layer = model.layer_modules()[index]
    params = calibrate_params(layer.weight, bits, "per-channel", axis=channel_axis(layer))
    return quantize_affine(layer.weight.detach(), params)


def sensitivity(model, layer_index: int, bits: int, calib: torch.Tensor,
                rd_full: Optional[float] = None) -> SensitivityRecord:
    """RD-loss change when only layer ``layer_index``'s weights are quantized at ``bits``.

    The model is never modified: the quantized weight is substituted through a
    functional call, so concurrent evaluations on one model are safe.
    """
    if calib.shape[0] == 0:
        raise ValueError("empty calibration set")
    n_layers = len(model.layers)
    if not 0 <= layer_index < n_layers:
        raise IndexError(f"layer {layer_index} out of range [0, {n_layers})")
    if rd_full is None:
        rd_full = _eval_rd(model, calib)
    name = _weight_names(model)[layer_index]
    rd_q = _eval_rd(model, calib, {name: quantized_layer_weight(model, layer_index, bits)})
    return SensitivityRecord(layer_index, int(bits), rd_full, rd_q, zeta_value(rd_full, rd_q))


class ZetaTable:
    """Lazily evaluated, thread-safe cache of sensitivity records.

    Entries are keyed by (layer, bits) for one (model fingerprint, calibration
    hash) pair; a table bound to different weights or images is never reused.
    A functional call temporarily swaps parameters on the module it runs, so
    threads other than the creating one evaluate on private model copies.
    """

    def __init__(self, model, calib: torch.Tensor, calib_hash: Optional[str] = None):
        self.model = model
        self.calib = calib
        self.calib_hash = calib_hash or tensor_hash(calib)
        self.fingerprint = model_fingerprint(model)
        self.records: dict = {}
        self._rd_full: Optional[float] = None
        self._lock = threading.Lock()
        self._owner = threading.get_ident()
        self._local = threading.local()
        self.evaluations = 0

    def _thread_model(self):
        if threading.get_ident() == self._owner:
            return self.model
        m = getattr(self._local, "model", None)
        if m is None:
            m = self._local.model = copy.deepcopy(self.model)
        return m

    @property
    def rd_full(self) -> float:
        with self._lock:
            if self._rd_full is None:
                self._rd_full = _eval_rd(self.model, self.calib)
                if not self._rd_full > 0:
                    raise ValueError(f"degenerate model: full-precision RD loss {self._rd_full}")
            return self._rd_full

    def record(self, layer: int, bits: int) -> SensitivityRecord:
        key = (int(layer), int(bits))
        with self._lock:
            rec = self.records.get(key)
        if rec is not None:
            return rec
        rec = sensitivity(self._thread_model(), layer, bits, self.calib, rd_full=self.rd_full)
        with self._lock:
            self.records.setdefault(key, rec)
            self.evaluations += 1
        return rec

    def __call__(self, layer: int, bits: int) -> float:
        return self.record(layer, bits).zeta

    def clear(self):
        with self._lock:
            self.records.clear()
            self._rd_full = None

    def fill(self, b_max: int = DEFAULT_B_MAX, jobs: int = 1):
        pairs = [(n, b) for n in range(len(self.model.layers)) for b in range(b_max, 1, -1)]
        self.rd_full
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                list(pool.map(lambda p: self.record(*p), pairs))
        else:
            for p in pairs:
                self.record(*p)
        return self

    def rows(self) -> list:
        return [self.records[k] for k in sorted(self.records)]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(ZETA_FIELDS)
            for r in self.rows():
                w.writerow([r.layer_index, r.bits, repr(r.rd_full), repr(r.rd_quant), repr(r.zeta)])

    def cache_name(self) -> str:
        return f"zeta_{self.fingerprint[:16]}_{self.calib_hash[:16]}.csv"

    def load_csv(self, path) -> int:
        """Merge records from a CSV written by :meth:`to_csv`; returns rows read."""
        count = 0
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rec = SensitivityRecord(int(row["layer"]), int(row["bits"]), float(row["rd_full"]),
                                        float(row["rd_quant"]), float(row["zeta"]))
                with self._lock:
                    self.records[(rec.layer_index, rec.bits)] = rec
                    self._rd_full = rec.rd_full
                count += 1
        return count


def assign_from_zeta(zeta: Callable[[int, int], float], n_layers: int, beta: float,
                     b_max: int = DEFAULT_B_MAX) -> list:
    """Descending scan per layer; keep the last width whose zeta stayed below beta."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if b_max < 2:
        raise ValueError("b_max must be >= 2")
    bits = []
    for n in range(n_layers):
        chosen = 2
        for b in range(b_max, 1, -1):
            if zeta(n, b) >= beta:
                chosen = min(b + 1, b_max)
                break
        bits.append(chosen)
    return bits


def assign_bits(model, calib: Optional[torch.Tensor], beta: float,
                candidates: Sequence[int] = tuple(range(2, DEFAULT_B_MAX + 1)),
                table: Optional[ZetaTable] = None) -> BitAssignment:
    """Mixed-precision bit assignment under tolerance ``beta`` (percent)."""
    cands = sorted(int(b) for b in candidates)
    if not cands or cands[0] != 2 or cands != list(range(2, cands[-1] + 1)):
        raise ValueError(f"candidate set must be contiguous from 2, got {cands}")
    if table is None:
        table = ZetaTable(model, calib)
    bits = assign_from_zeta(table, len(model.layers), beta, cands[-1])
    return BitAssignment(bits, b_max=cands[-1], beta_used=beta)
