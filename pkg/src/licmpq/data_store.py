"""Image datasets, calibration subsets, checkpoints and experiment config."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".pgm", ".webp"}
DATA_ROOT_ENV = "LICMPQ_DATA_ROOT"

MAGIC = b"LICMPQCK"
SCHEMA_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


class CheckpointError(ValueError):
    pass


def resolve_data_dir(path) -> Path:
    """Relative paths are looked up under $LICMPQ_DATA_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root and not p.exists():
        return Path(root) / p
    return p


def list_images(directory) -> list:
    d = resolve_data_dir(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS and p.is_file())


def read_image(path) -> np.ndarray:
    """Decode to HxWx3 uint8; grayscale is replicated, alpha dropped."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
    return arr


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    arr = _pad_to(arr, size)
    h, w = arr.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return arr[top:top + size, left:left + size]


class ImageFolder:
    """All decodable images of a directory held in memory as uint8 arrays."""

    def __init__(self, directory, paths: Optional[list] = None):
        self.directory = resolve_data_dir(directory) if directory is not None else None
        paths = list_images(self.directory) if paths is None else [Path(p) for p in paths]
        self.paths, self.images, self.skipped = [], [], []
        for p in paths:
            try:
                self.images.append(read_image(p))
                self.paths.append(p)
            except Exception as exc:  # PIL raises a zoo of types for corrupt files
                log.warning("skipping undecodable image %s: %s", p, exc)
                self.skipped.append(p)
        if not self.images:
            raise ValueError(f"no decodable images in {self.directory}")

    def __len__(self):
        return len(self.images)

    def center_crops(self, size: int) -> torch.Tensor:
        return torch.stack([to_tensor(center_crop(a, size)) for a in self.images])

    def random_crops(self, size: int, rng: np.random.Generator) -> torch.Tensor:
        out = []
        for a in self.images:
            a = _pad_to(a, size)
            h, w = a.shape[:2]
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            out.append(to_tensor(a[top:top + size, left:left + size]))
        return torch.stack(out)

    def full_images(self) -> list:
        return [to_tensor(a) for a in self.images]


def load_image_dataset(directory, crop_size: int = 64, split: str = "train", seed: int = 0) -> list:
    """Unit-range 3xSxS crops: random under ``seed`` for train, centered for eval."""
    folder = ImageFolder(directory)
    if split == "train":
        return list(folder.random_crops(crop_size, np.random.default_rng(seed)))
    if split == "eval":
        return list(folder.center_crops(crop_size))
    raise ValueError(f"split must be 'train' or 'eval', got {split!r}")


@dataclass
class CalibSet:
    paths: list
    seed: int
    content_hash: str

    def tensor(self, crop_size: int = 64) -> torch.Tensor:
        return ImageFolder(None, self.paths).center_crops(crop_size) if self.paths else torch.empty(0)

    def to_dict(self) -> dict:
        return {"paths": [str(p) for p in self.paths], "seed": self.seed,
                "content_hash": self.content_hash}


def files_hash(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def select_calibration(directory, count: int = 16, seed: int = 0) -> CalibSet:
    """Seeded choice of ``count`` images from the lexicographically sorted listing."""
    paths = list_images(directory)
    if len(paths) < count:
        raise ValueError(f"need {count} calibration images, found {len(paths)} in {directory}")
    idx = np.sort(np.random.default_rng(seed).choice(len(paths), size=count, replace=False))
    chosen = [paths[i] for i in idx]
    return CalibSet(chosen, seed, files_hash(chosen))


# ---------------------------------------------------------------------------
# checkpoints: MAGIC | u64 header length | JSON header | little-endian payloads
# ---------------------------------------------------------------------------


def _plain_state(model) -> dict:
    """Float weights of the underlying LicModel under their unwrapped names."""
    from .quantizer import QuantizedModel

    if isinstance(model, QuantizedModel):
        out = {}
        for name, t in model.base.state_dict().items():
            if ".weight_quantizer." in name:
                continue
            out[name.replace(".layer.", ".")] = t
        return out
    return dict(model.state_dict())


def _quant_tensors(qmodel) -> dict:
    out = {}
    for i, wq in qmodel.weight_quantizers.items():
        out[f"quant.{i}.log_scale"] = wq.log_scale.detach()
        out[f"quant.{i}.scale"] = wq.scale.detach()
        out[f"quant.{i}.zero_point"] = wq.zero_point.detach()
    return out


def save_checkpoint(path, model, extra: Optional[dict] = None):
    from .quantizer import QuantizedModel

    tensors = _plain_state(model)
    qstate = None
    if isinstance(model, QuantizedModel):
        qstate = {
            "bits": list(model.bits),
            "activation_bits": model.activation_bits,
            "leak": model.leak,
            "beta_used": model.beta_used,
            "granularity": "per-channel",
        }
        tensors.update(_quant_tensors(model))
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        blob = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "schema_version": SCHEMA_VERSION,
        "metadata": dict(model.config),
        "tensors": entries,
        "quantizer_state": qstate,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse a checkpoint into (header, name -> tensor) without building a model."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        expected = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if e["nbytes"] != expected:
            raise CheckpointError(f"{path}: tensor {e['name']} size mismatch")
        start = base + e["offset"]
        if start + expected > len(data):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(data, dtype=dt, count=expected // dt.itemsize, offset=start)
        tensors[e["name"]] = torch.from_numpy(
            arr.astype(np.dtype(e["dtype"])).reshape(e["shape"]).copy())
    return header, tensors


def load_checkpoint(path):
    """Returns (model, quantizer_state); the model is a QuantizedModel when one was saved."""
    from .lic_core import model_from_config
    from .quantizer import attach_quantizers

    header, tensors = read_checkpoint(path)
    model = model_from_config(header["metadata"])
    expected = set(model.state_dict())
    qstate = header.get("quantizer_state")
    quant_names = {n for n in tensors if n.startswith("quant.")}
    unknown = set(tensors) - expected - quant_names
    if unknown:
        raise CheckpointError(f"{path}: unknown tensor names {sorted(unknown)}")
    missing = expected - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict({n: tensors[n] for n in expected})
    if qstate is None:
        if quant_names:
            raise CheckpointError(f"{path}: quantizer tensors without quantizer state")
        return model, None
    qmodel = attach_quantizers(model, qstate["bits"], qstate["activation_bits"],
                               leak=qstate["leak"])
    qmodel.beta_used = qstate.get("beta_used")
    with torch.no_grad():
        for i, wq in qmodel.weight_quantizers.items():
            wq.log_scale.copy_(tensors[f"quant.{i}.log_scale"])
            wq.zero_point.copy_(tensors[f"quant.{i}.zero_point"])
    return qmodel, qstate


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "model": {
        "variant": "mean-scale-hyperprior",
        "widths": {"main": 32, "latent": 32, "hyper": 16},
        "strides": {"main": [2, 2, 2, 2], "hyper": [1, 2, 2]},
        "quality_index": 3,
        "lambdas": [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483],
    },
    "data": {"train_dir": "train", "eval_dir": "eval", "calib_dir": "train",
             "calib_count": 16, "calib_crop": 128},
    "train": {"epochs": 90, "batch_size": 16, "lr": 1e-4, "schedule": "cosine", "seed": 0,
              "crop_size": 64, "crops_per_image": 1},
    "qat": {"epochs": 30, "batch_size": 16, "lr_weights": 1e-5, "lr_quant": 1e-4,
            "schedule": "constant", "activation_bits": 8, "leak": 0.01, "seed": 0,
            "crop_size": 256, "crops_per_image": 1},
    "assign": {"beta": 1.0, "b_max": 8},
    "search": {"cr_target": 1.0, "beta_init": 0.01, "mode": "adaptive",
               "max_iterations": 100, "exhaustive_step": 0.01, "band": 0.01},
    "quantizer": {"eps": 1e-8, "rounding": "half-to-even", "clip_upper": "2**b"},
    "eval": {"psnr_cap_db": 100.0, "bd_rate_fit": "cubic"},
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        with open(path) as f:
            cfg = _merge(cfg, json.load(f))
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def write_config(path, cfg: dict):
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# desk-scale toy image set
# ---------------------------------------------------------------------------


def _synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    img = np.empty((size, size, 3), np.float32)
    for c in range(3):
        a, b, d = rng.uniform(-1, 1, 3)
        img[..., c] = 0.5 + 0.3 * (a * xx + b * yy) + 0.1 * d
    for _ in range(int(rng.integers(3, 9))):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.05, 0.35, 2)
        color = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = color
    freq = rng.uniform(4, 20)
    angle = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img += 0.06 * stripes[..., None] * rng.uniform(0, 1)
    img += rng.normal(0, 0.08, img.shape).astype(np.float32)
    img = gaussian_filter(img, sigma=(rng.uniform(0.4, 1.5), rng.uniform(0.4, 1.5), 0))
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def _photo_sources() -> list:
    import importlib.util

    spec = importlib.util.find_spec("skimage")
    if spec is None or not spec.submodule_search_locations:
        return []
    d = Path(list(spec.submodule_search_locations)[0]) / "data"
    names = ["astronaut.png", "coffee.png", "chelsea.png", "rocket.jpg", "motorcycle_left.png",
             "motorcycle_right.png", "color.png", "hubble_deep_field.jpg", "retina.jpg",
             "brick.png", "grass.png", "gravel.png", "camera.png", "coins.png", "moon.png"]
    return [d / n for n in names if (d / n).exists()]


def make_toy_dataset(out_dir, count: int = 64, size: int = 256, seed: int = 0,
                     kind: str = "mixed") -> list:
    """Write ``count`` PNGs: synthetic scenes, photographic crops, or a mix.

    Photographic crops come from images bundled with scikit-image when it is
    installed; otherwise everything is synthetic.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    photos = [read_image(p) for p in _photo_sources()] if kind in ("mixed", "photo") else []
    paths = []
    for i in range(count):
        use_photo = photos and (kind == "photo" or i % 2 == 1)
        if use_photo:
            src = photos[int(rng.integers(len(photos)))]
            src = _pad_to(src, size)
            h, w = src.shape[:2]
            top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
            arr = src[top:top + size, left:left + size]
        else:
            arr = _synthetic_image(rng, size)
        p = out / f"img_{i:04d}.png"
        Image.fromarray(np.ascontiguousarray(arr)).save(p)
        paths.append(p)
    return paths
