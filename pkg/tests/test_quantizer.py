import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from licmpq.quantizer import (
    EPS,
    ActivationQuantizer,
    QuantParams,
    QuantizedModel,
    WeightQuantizer,
    attach_quantizers,
    calibrate_params,
    fake_quant,
    quantize_affine,
)
from licmpq.lic_core import build_model

from oracles import quantize_scalar


def _params(s, z, b, gran="per-tensor"):
    return QuantParams(torch.tensor(s, dtype=torch.float32), torch.tensor(z, dtype=torch.float32),
                       b, granularity=gran)


def test_zero_maps_to_zero_when_zero_point_integer():
    out = quantize_affine(torch.zeros(5), _params(0.1, 3.0, 4))
    assert torch.equal(out, torch.zeros(5))


def test_clip_saturates_at_upper_level():
    # 2**b levels above -z: with s=1, z=0, b=2 the top is 4
    out = quantize_affine(torch.tensor([100.0, -3.0]), _params(1.0, 0.0, 2))
    assert out.tolist() == [4.0, 0.0]


def test_half_to_even():
    out = quantize_affine(torch.tensor([0.5, 1.5, 2.5]), _params(1.0, 0.0, 4))
    assert out.tolist() == [0.0, 2.0, 2.0]


@settings(max_examples=300, deadline=None)
@given(x=st.floats(-50, 50, width=32), s=st.floats(0.0009765625, 4, width=32),
       z=st.integers(0, 16), b=st.integers(2, 8))
def test_matches_scalar_oracle(x, s, z, b):
    got = quantize_affine(torch.tensor([x]), _params(s, float(z), b))
    assert got.numpy()[0] == quantize_scalar(x, s, z, b)


@settings(max_examples=200, deadline=None)
@given(s=st.floats(0.0009765625, 2, width=32), b=st.integers(2, 8), z=st.integers(0, 4),
       seed=st.integers(0, 10_000))
def test_idempotent_and_monotone(s, b, z, seed):
    p = _params(s, float(z), b)
    x = torch.from_numpy(np.random.default_rng(seed).normal(0, 5 * s, 64).astype(np.float32))
    q = quantize_affine(x, p)
    assert torch.equal(quantize_affine(q, p), q)
    order = torch.argsort(x)
    assert bool((torch.diff(q[order]) >= 0).all())


def test_calibrate_min_max_and_degenerate_channel():
    w = torch.stack([torch.linspace(-1, 3, 10), torch.full((10,), 2.0)])
    p = calibrate_params(w, 4, "per-channel", axis=0)
    assert p.scale[0].item() == pytest.approx(4 / 16)
    assert p.zero_point[0].item() == 4.0
    assert p.scale[1].item() == pytest.approx(EPS)
    assert p.zero_point[1].item() == 0.0
    # min and max are representable after calibration
    q = quantize_affine(w[:1], QuantParams(p.scale[:1], p.zero_point[:1], 4))
    assert q[0, 0].item() == pytest.approx(-1.0, abs=1e-6)
    assert q[0, -1].item() == pytest.approx(3.0, abs=1e-6)


def test_calibrate_rejects_empty_and_bad_bits():
    with pytest.raises(ValueError):
        calibrate_params(torch.empty(0), 4)
    with pytest.raises(ValueError):
        _params(1.0, 0.0, 1)
    with pytest.raises(ValueError):
        _params(0.0, 0.0, 4)


def test_fake_quant_forward_equals_quantize_affine():
    torch.manual_seed(0)
    w = torch.randn(6, 3, 3, 3)
    p = calibrate_params(w, 5)
    s, z = p.broadcast(w)
    assert torch.equal(fake_quant(w, s, z, 5), quantize_affine(w, p))


def test_backward_inside_range_is_identity_for_x():
    x = torch.tensor([0.3, 0.7], requires_grad=True)
    fake_quant(x, torch.tensor(0.1), torch.tensor(0.0), 4).sum().backward()
    assert x.grad.tolist() == [1.0, 1.0]


def test_backward_outside_range_is_leaky():
    x = torch.tensor([-5.0, 50.0], requires_grad=True)
    fake_quant(x, torch.tensor(1.0), torch.tensor(0.0), 2, leak=0.01).sum().backward()
    assert x.grad.tolist() == pytest.approx([0.01, 0.01])


def test_weight_quantizer_bits_immutable_and_trainable_params():
    w = torch.randn(4, 2, 3, 3)
    wq = WeightQuantizer(calibrate_params(w, 6))
    names = {n for n, _ in wq.named_parameters()}
    assert names == {"log_scale", "zero_point"}
    out = wq(w.requires_grad_())
    out.sum().backward()
    assert wq.log_scale.grad is not None and wq.zero_point.grad is not None
    assert wq.bits == 6


def test_activation_quantizer_is_dynamic():
    aq = ActivationQuantizer(8)
    aq(torch.linspace(0, 1, 100))
    first = aq.last_params.scale.item()
    aq(torch.linspace(0, 10, 100))
    assert aq.last_params.scale.item() == pytest.approx(10 * first)


def test_quantized_model_wraps_every_layer_and_keeps_base():
    m = build_model(seed=0)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    qm = attach_quantizers(m, [8] * 14, activation_bits=8, calib_batch=torch.rand(1, 3, 64, 64))
    assert qm.bit_assignment == [8] * 14
    assert len(qm.weight_quantizers) == 14
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())
    recon, lik_y, lik_z = qm(torch.rand(1, 3, 64, 64), noise=False)
    assert recon.shape == (1, 3, 64, 64)
    with pytest.raises(ValueError):
        QuantizedModel(m, [8] * 13, 8)


def test_sixteen_bit_weights_track_float_output():
    m = build_model(seed=0).eval()
    x = torch.rand(2, 3, 64, 64)
    qm = attach_quantizers(m, [16] * 14, activation_bits=None)
    with torch.no_grad():
        a = m(x, noise=False)[0]
        b = qm(x, noise=False)[0]
    assert torch.allclose(a, b, atol=1e-3)
