import csv

import pytest
import torch

from licmpq.assign import ZetaTable, assign_bits
from licmpq.lic_core import build_model
from licmpq.model_size import compression_ratio
from licmpq.search import (
    BETA_FLOOR,
    AssignmentEvaluator,
    adaptive_search,
    exhaustive_search,
    search_bits,
)

from oracles import simulate_adaptive


def oracle(f):
    return lambda beta: (f(beta), None)


def linear(beta):
    return max(0.3, 1.02 - 0.05 * beta)


def test_trace_matches_reference_simulation():
    res = adaptive_search(oracle(linear), 0.75, beta_init=0.01)
    ref = simulate_adaptive(linear, 0.75, 0.01)
    assert [(s.beta, s.alpha_beta, s.cr) for s in res.state.history] == ref
    assert res.converged and abs(res.state.cr - 0.75) <= 0.01


def test_immediate_termination():
    res = adaptive_search(oracle(lambda b: 0.755), 0.75)
    assert res.converged and res.iterations == 1


def test_step_discontinuity_never_converges():
    res = adaptive_search(oracle(lambda b: 0.9 if b < 3.0 else 0.6), 0.75, max_iterations=40)
    assert not res.converged and res.iterations == 40
    assert all(s.beta >= BETA_FLOOR for s in res.state.history)


def test_exhaustive_counts_steps():
    # first in-band beta is beta_init + 6 * step
    f = lambda b: 0.75 if b >= 0.01 + 6 * 0.01 - 1e-9 else 0.95
    res = exhaustive_search(oracle(f), 0.75, 0.01, 0.01)
    assert res.converged and res.iterations == 7
    assert exhaustive_search(oracle(lambda b: 0.75), 0.75).iterations == 1


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        adaptive_search(oracle(linear), 1.5)
    with pytest.raises(ValueError):
        adaptive_search(oracle(linear), 0.5, beta_init=0)
    with pytest.raises(ValueError):
        exhaustive_search(oracle(linear), 0.5, step=0)
    with pytest.raises(ValueError):
        search_bits(None, None, 0.5, mode="bisect", table=object())


@pytest.mark.parametrize("target", [0.9, 0.75, 0.6, 0.5])
def test_adaptive_not_slower_on_linear_oracle(target):
    a = adaptive_search(oracle(linear), target, 0.01)
    e = exhaustive_search(oracle(linear), target, 0.01, 0.01)
    assert a.converged and e.converged
    assert a.iterations <= e.iterations


@pytest.fixture(scope="module")
def small_problem():
    m = build_model(seed=0).eval()
    with torch.no_grad():
        for layer in m.layer_modules()[:4]:
            layer.weight.mul_(4.0)
    calib = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(2))
    return m, calib


def test_trace_entries_recompute_from_scratch(small_problem):
    m, calib = small_problem
    table = ZetaTable(m, calib)
    res = search_bits(m, calib, 0.6, "adaptive", table=table, max_iterations=8)
    for step in res.state.history:
        fresh = assign_bits(m, calib, step.beta, table=ZetaTable(m, calib))
        assert fresh.bits == step.bits
        assert compression_ratio(fresh, m) == step.cr


def test_fresh_flag_clears_cache(small_problem):
    m, calib = small_problem
    ev = AssignmentEvaluator(m, calib, b_max=4, fresh=True)
    ev(1.0)
    first = ev.table.evaluations
    ev(2.0)
    assert ev.table.evaluations == 2 * first


def test_trace_csv_columns(tmp_path):
    res = adaptive_search(oracle(linear), 0.6)
    res.trace_to_csv(tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iteration", "beta", "alpha_beta", "cr"]
    assert len(rows) == res.iterations + 1
    assert float(rows[-1][3]) == res.state.cr
