import json

import pytest

from licmpq.lic_core import LayerSpec, build_factorized_model, build_model, list_quantizable_layers
from licmpq.model_size import (
    BITS_PER_MB,
    compression_ratio,
    layer_size_bits,
    model_size_report,
    total_bits,
)

from oracles import layer_bits


def spec(c_out, c_in, k):
    return LayerSpec(0, "conv", c_out, c_in, k, 1, "main-encoder")


def test_worked_examples():
    assert layer_size_bits(spec(2, 3, 1), 4) == 160
    assert layer_size_bits(spec(192, 128, 5), 8) == 4_929_024


def test_rejects_out_of_range_bits():
    with pytest.raises(ValueError):
        layer_size_bits(spec(2, 2, 1), 1)
    with pytest.raises(ValueError):
        layer_size_bits(spec(2, 2, 1), 33)


def test_all_eight_is_unit_ratio_and_all_two_above_quarter():
    m = build_model(seed=0)
    assert compression_ratio([8] * 14, m) == 1.0
    assert compression_ratio([2] * 14, m) > 0.25


def test_two_layer_ratio_by_hand():
    m = build_factorized_model(channels=4, k=3)
    layers = list_quantizable_layers(m)
    num = layer_bits(layers[0].c_out, layers[0].c_in, layers[0].k, 4) + \
        layer_bits(layers[1].c_out, layers[1].c_in, layers[1].k, 8)
    den = sum(layer_bits(l.c_out, l.c_in, l.k, 8) for l in layers)
    assert compression_ratio([4, 8], m) == pytest.approx(num / den, rel=0, abs=1e-15)


def test_report_totals_and_json():
    m = build_model(seed=0)
    bits = [8, 7, 6, 5, 4, 3, 2, 8, 7, 6, 5, 4, 3, 2]
    rep = model_size_report(m, bits)
    layers = list_quantizable_layers(m)
    assert rep.total_bits == total_bits(layers, bits) == sum(rep.per_layer_bits)
    assert rep.total_mb == rep.total_bits / BITS_PER_MB
    assert rep.cr_vs_8bit == pytest.approx(compression_ratio(bits, m))
    assert rep.unquantized_bits > 0
    assert json.loads(rep.to_json())["total_bits"] == rep.total_bits
    with pytest.raises(ValueError):
        model_size_report(m, bits[:-1])
