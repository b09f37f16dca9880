import numpy as np
import pytest
import torch

from licmpq.assign import (
    BitAssignment,
    ZetaTable,
    assign_bits,
    assign_from_zeta,
    model_fingerprint,
    sensitivity,
    zeta_value,
)
from licmpq.lic_core import build_model

from oracles import brute_force_bits


@pytest.fixture(scope="module")
def model_and_calib():
    m = build_model(seed=0).eval()
    # an untrained encoder rounds every latent to zero; widen it so weights matter
    with torch.no_grad():
        for layer in m.layer_modules()[:4]:
            layer.weight.mul_(4.0)
    calib = torch.rand(3, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    return m, calib


def test_zeta_value_examples():
    assert zeta_value(2.0, 2.0) == 0.0
    assert zeta_value(2.0, 2.1) == pytest.approx(5.0)
    assert zeta_value(2.0, 1.9) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        zeta_value(0.0, 1.0)


def table_fn(rows):
    return lambda n, b: rows[n][b]


def test_mock_table_picks_last_acceptable_width():
    row = {8: 1, 7: 2, 6: 3, 5: 4, 4: 4.5, 3: 6, 2: 9}
    assert assign_from_zeta(table_fn([row]), 1, 5.0, 8) == [4]


def test_b_max_fallback_and_everything_passes():
    assert assign_from_zeta(table_fn([{b: 50.0 for b in range(2, 9)}]), 1, 5.0, 8) == [8]
    assert assign_from_zeta(table_fn([{b: 0.0 for b in range(2, 9)}]), 1, 5.0, 8) == [2]


def test_matches_brute_force_on_monotone_tables():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows = []
        for _ in range(5):
            vals = np.sort(rng.exponential(3.0, 7))[::-1]  # zeta(2) largest
            rows.append(dict(zip(range(2, 9), vals)))
        beta = float(rng.uniform(0.1, 8))
        got = assign_from_zeta(table_fn(rows), 5, beta, 8)
        assert got == [brute_force_bits(r, beta, 8) for r in rows]


def test_rejects_bad_beta_and_candidates(model_and_calib):
    m, calib = model_and_calib
    with pytest.raises(ValueError):
        assign_from_zeta(lambda n, b: 0.0, 1, 0.0)
    with pytest.raises(ValueError):
        assign_bits(m, calib, 1.0, candidates=[3, 4, 8])


def test_sensitivity_leaves_model_unchanged(model_and_calib):
    m, calib = model_and_calib
    fp = model_fingerprint(m)
    rec = sensitivity(m, 3, 2, calib)
    assert rec.zeta > 0
    assert model_fingerprint(m) == fp
    with pytest.raises(IndexError):
        sensitivity(m, 14, 4, calib)


def test_zero_weight_layer_has_zero_zeta():
    m = build_model(seed=0).eval()
    with torch.no_grad():
        m.layer_modules()[5].weight.zero_()
    calib = torch.rand(2, 3, 64, 64)
    for b in (2, 5, 8):
        assert sensitivity(m, 5, b, calib).zeta == 0.0


def test_table_parallel_fill_matches_serial_and_caches(model_and_calib, tmp_path):
    m, calib = model_and_calib
    serial = ZetaTable(m, calib).fill(4)
    parallel = ZetaTable(m, calib).fill(4, jobs=3)
    assert [r.zeta for r in serial.rows()] == [r.zeta for r in parallel.rows()]
    n = serial.evaluations
    serial(0, 3)
    assert serial.evaluations == n
    path = tmp_path / serial.cache_name()
    serial.to_csv(path)
    fresh = ZetaTable(m, calib)
    assert fresh.load_csv(path) == len(serial.rows())
    assert fresh(2, 3) == serial(2, 3)
    assert fresh.evaluations == 0


def test_beta_monotone_on_shared_table(model_and_calib):
    m, calib = model_and_calib
    table = ZetaTable(m, calib)
    prev = None
    for beta in (1e9, 100.0, 10.0, 1.0, 0.1):
        bits = assign_bits(m, calib, beta, table=table).bits
        if prev is not None:
            assert all(a >= b for a, b in zip(bits, prev))
        prev = bits
    assert assign_bits(m, calib, 1e9, table=table).bits == [2] * 14


def test_assignment_json_round_trip(tmp_path):
    a = BitAssignment([8, 4, 2], beta_used=0.5)
    a.to_json(tmp_path / "a.json")
    b = BitAssignment.load(tmp_path / "a.json")
    assert b.bits == a.bits and b.beta_used == 0.5 and b.candidates == list(range(2, 9))
    with pytest.raises(ValueError):
        BitAssignment([9])
