import math

import pytest
import torch

from licmpq.assign import model_fingerprint
from licmpq.lic_core import build_model
from licmpq.quantizer import attach_quantizers
from licmpq.train import TrainConfig, TrainingDiverged, history_to_csv, qat_finetune, train_baseline


@pytest.fixture(scope="module")
def crops():
    return torch.rand(8, 3, 64, 64, generator=torch.Generator().manual_seed(0))


def _quick(**kw):
    base = dict(epochs=2, batch_size=4, lr_weights=1e-3, crop_size=64)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic(crops):
    a, ha = train_baseline(build_model(seed=0), crops, _quick())
    b, hb = train_baseline(build_model(seed=0), crops, _quick())
    assert model_fingerprint(a) == model_fingerprint(b)
    assert ha == hb
    assert [h["epoch"] for h in ha] == [0, 1]


def test_cosine_schedule_decays_to_zero(crops):
    _, hist = train_baseline(build_model(seed=0), crops, _quick(epochs=3))
    lrs = [h["lr"] for h in hist]
    assert lrs == sorted(lrs, reverse=True)
    assert lrs[-1] < 1e-3 * 0.1


def test_loss_decreases_over_a_few_epochs(crops):
    _, hist = train_baseline(build_model(seed=0), crops, _quick(epochs=6))
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_divergence_raises_and_restores(crops):
    m = build_model(seed=0)
    before = model_fingerprint(m)
    with pytest.raises(TrainingDiverged):
        train_baseline(m, crops, _quick(lmbda=math.nan))
    assert model_fingerprint(m) == before


def test_resume_continues_schedule(crops):
    _, full = train_baseline(build_model(seed=0), crops, _quick(epochs=3))
    _, tail = train_baseline(build_model(seed=0), crops, _quick(epochs=3), start_epoch=2)
    assert [r["epoch"] for r in tail] == [2]
    assert tail[0]["lr"] == full[2]["lr"]


def test_qat_keeps_bits_and_input(crops):
    m = build_model(seed=0).eval()
    q = attach_quantizers(m, [6] * 7 + [4] * 7, 8)
    before = model_fingerprint(q)
    trained, hist = qat_finetune(q, crops, TrainConfig.qat_defaults(epochs=1, batch_size=4))
    assert model_fingerprint(q) == before
    assert trained.bits == q.bits and len(hist) == 1
    moved = [not torch.equal(a.log_scale, b.log_scale)
             for a, b in zip(q.weight_quantizers.values(), trained.weight_quantizers.values())]
    assert any(moved)
    same, none = qat_finetune(q, crops, TrainConfig.qat_defaults(epochs=0))
    assert same is q and none == []


def test_config_validation_and_csv(tmp_path, crops):
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr_weights=0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")
    _, hist = train_baseline(build_model(seed=0), crops, _quick(epochs=1))
    history_to_csv(hist, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,rate_bpp,distortion,loss,lr"
