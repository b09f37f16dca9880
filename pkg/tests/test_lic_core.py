import math

import pytest
import torch

from licmpq.lic_core import (
    LAMBDAS,
    build_factorized_model,
    build_model,
    forward_compress,
    list_quantizable_layers,
    model_from_config,
    rd_loss,
)


def test_toy_model_has_fourteen_layers_in_path_order():
    m = build_model(seed=0)
    layers = list_quantizable_layers(m)
    assert len(layers) == 14
    assert [l.index for l in layers] == list(range(14))
    paths = [l.path for l in layers]
    assert paths == sorted(paths, key=["main-encoder", "main-decoder", "hyper-encoder",
                                       "hyper-decoder"].index)
    assert m.downsampling == 64
    assert m.lmbda == LAMBDAS[3]


def test_build_is_deterministic_and_preserves_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(seed=5)
    b = build_model(seed=5)
    assert torch.rand(1) == expected
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


@pytest.mark.parametrize("variant", ["scale-hyperprior", "mean-scale-hyperprior"])
def test_variants_forward_shapes(variant):
    m = build_model(variant, seed=0).eval()
    x = torch.rand(2, 3, 64, 128)
    recon, lik_y, lik_z = forward_compress(m, x, "eval")
    assert recon.shape == x.shape
    assert bool((lik_y > 0).all() and (lik_y <= 1).all())
    assert lik_z is not None


def test_invalid_inputs():
    with pytest.raises(ValueError):
        build_model("gdn-anchor")
    with pytest.raises(ValueError):
        build_model(quality_index=6)
    m = build_model(seed=0)
    with pytest.raises(ValueError):
        m(torch.rand(1, 3, 60, 64))
    with pytest.raises(ValueError):
        forward_compress(m, torch.rand(1, 3, 64, 64), "test")


def test_eval_latents_are_integers():
    m = build_model(seed=0).eval()
    captured = {}

    def grab(mod, inp, out):
        captured["y_hat"] = out[0]

    hook = m.gaussian_conditional.register_forward_hook(grab)
    forward_compress(m, torch.rand(1, 3, 64, 64), "eval")
    hook.remove()
    y_hat = captured["y_hat"]
    assert torch.equal(y_hat, torch.round(y_hat))


def test_rd_loss_exact_on_hand_values():
    x = torch.zeros(1, 3, 2, 2)
    r = torch.full_like(x, 1 / 255)
    lik = torch.full((1, 1, 1, 4), 0.5)
    m = rd_loss(r, x, lik, None, 0.01)
    assert float(m.rate_bpp) == pytest.approx(4 / 4)
    assert float(m.distortion) == pytest.approx(1.0)
    assert float(m.loss) == pytest.approx(1.0 + 0.01)
    with pytest.raises(ValueError):
        rd_loss(r, x, torch.zeros(1, 4), None, 0.01)
    with pytest.raises(ValueError):
        rd_loss(r[..., :1], x, lik, None, 0.01)


def test_config_round_trip():
    m = build_model("scale-hyperprior", seed=3, quality_index=1)
    again = model_from_config(m.config)
    for (_, a), (_, b) in zip(m.state_dict().items(), again.state_dict().items()):
        assert torch.equal(a, b)
    f = build_factorized_model(seed=1)
    again = model_from_config(f.config)
    assert all(torch.equal(a, b) for a, b in zip(f.state_dict().values(),
                                                 again.state_dict().values()))


def _train_loss(model, x, seed):
    torch.manual_seed(seed)
    recon, lik_y, lik_z = forward_compress(model, x, "train")
    return rd_loss(recon, x, lik_y, lik_z, model.lmbda).loss


def test_train_mode_gradient_matches_finite_differences():
    model = build_factorized_model(channels=4, k=3, seed=0).double()
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    loss = _train_loss(model, x, 7)
    grads = torch.autograd.grad(loss, list(model.parameters()))
    gen = torch.Generator().manual_seed(1)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(model.parameters(), grads):
            for _ in range(3):
                i = int(torch.randint(p.numel(), (1,), generator=gen))
                flat = p.view(-1)
                orig = flat[i].item()
                h = 1e-6 * max(1.0, abs(orig))
                flat[i] = orig + h
                up = _train_loss(model, x, 7).item()
                flat[i] = orig - h
                down = _train_loss(model, x, 7).item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                an = g.view(-1)[i].item()
                err = abs(an - fd) / max(abs(fd), abs(an), 1e-6)
                worst = max(worst, err)
    assert worst < 1e-3, worst


def test_loss_is_finite_for_black_and_white_images():
    m = build_model(seed=0).eval()
    for value in (0.0, 1.0):
        x = torch.full((1, 3, 64, 64), value)
        with torch.no_grad():
            recon, lik_y, lik_z = forward_compress(m, x, "eval")
        assert math.isfinite(float(rd_loss(recon, x, lik_y, lik_z, m.lmbda).loss))
