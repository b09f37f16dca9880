"""Search over the tolerance beta for a bit assignment hitting a target size ratio."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

from .assign import DEFAULT_B_MAX, BitAssignment, ZetaTable, assign_bits
from .model_size import compression_ratio

CR_BAND = 0.01
BETA_FLOOR = 1e-3
TRACE_FIELDS = ("iteration", "beta", "alpha_beta", "cr")

# evaluate(beta) -> (cr, assignment or None)
Evaluator = Callable[[float], tuple]


@dataclass
class SearchStep:
    iteration: int
    beta: float
    alpha_beta: float
    cr: float
    bits: Optional[list] = None


@dataclass
class SearchState:
    beta: float
    alpha_beta: float
    cr: float = float("nan")
    iteration: int = 0
    history: list = field(default_factory=list)


@dataclass
class SearchResult:
    assignment: Optional[BitAssignment]
    state: SearchState
    converged: bool
    cr_target: float
    mode: str

    @property
    def iterations(self) -> int:
        return self.state.iteration

    def trace_rows(self) -> list:
        return [(s.iteration, s.beta, s.alpha_beta, s.cr) for s in self.state.history]

    def trace_to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(TRACE_FIELDS)
            for row in self.trace_rows():
                w.writerow([row[0]] + [repr(v) for v in row[1:]])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "cr_target": self.cr_target,
            "converged": self.converged,
            "iterations": self.iterations,
            "beta": self.state.beta,
            "cr": self.state.cr,
            "assignment": self.assignment.to_dict() if self.assignment else None,
            "history": [asdict(s) for s in self.state.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class AssignmentEvaluator:
    """Maps beta to (CR, assignment) for a model, reusing a shared zeta table.

    With ``fresh=True`` the table is cleared before each call, so every step
    pays the full sensitivity cost (for wall-clock comparisons).
    """

    def __init__(self, model, calib=None, b_max: int = DEFAULT_B_MAX,
                 table: Optional[ZetaTable] = None, fresh: bool = False):
        self.model = model
        self.table = table if table is not None else ZetaTable(model, calib)
        self.b_max = b_max
        self.fresh = fresh
        self.calls = 0

    def __call__(self, beta: float):
        if self.fresh:
            self.table.clear()
        self.calls += 1
        a = assign_bits(self.model, None, beta, range(2, self.b_max + 1), table=self.table)
        return compression_ratio(a, self.model), a


def _check_target(cr_target):
    if not 0 < cr_target <= 1:
        raise ValueError(f"cr_target must lie in (0, 1], got {cr_target}")


def adaptive_search(evaluate: Evaluator, cr_target: float, beta_init: float = 0.01,
                    max_iterations: int = 100, band: float = CR_BAND) -> SearchResult:
    """Variable-step search: the increment grows while far above the target,
    and an overshoot below the target undoes the last step and shrinks it."""
    _check_target(cr_target)
    if not beta_init > 0:
        raise ValueError("beta_init must be positive")
    state = SearchState(beta=beta_init, alpha_beta=1.0)
    assignment, converged = None, False
    while state.iteration < max_iterations:
        cr, assignment = evaluate(state.beta)
        state.iteration += 1
        state.cr = cr
        state.history.append(SearchStep(state.iteration, state.beta, state.alpha_beta, cr,
                                        list(assignment.bits) if assignment else None))
        gap = abs(cr - cr_target)
        if gap <= band:
            converged = True
            break
        if cr <= cr_target:
            state.beta = max(state.beta - state.alpha_beta, BETA_FLOOR)
            state.alpha_beta = state.alpha_beta * 0.1
            state.beta = state.beta + state.alpha_beta
        else:
            if gap >= 0.25:
                state.alpha_beta = state.alpha_beta * 5
            elif gap >= 0.10:
                state.alpha_beta = state.alpha_beta * 2
            state.beta = state.beta + state.alpha_beta
    return SearchResult(assignment, state, converged, cr_target, "adaptive")


def exhaustive_search(evaluate: Evaluator, cr_target: float, beta_init: float = 0.01,
                      step: float = 0.01, max_iterations: int = 100_000,
                      band: float = CR_BAND) -> SearchResult:
    """Fixed-step sweep beta_init, beta_init + step, ... until CR is within the band."""
    _check_target(cr_target)
    if not step > 0:
        raise ValueError("step must be positive")
    state = SearchState(beta=beta_init, alpha_beta=step)
    assignment, converged = None, False
    while state.iteration < max_iterations:
        # computed from the index, not accumulated, to avoid drift over long sweeps
        state.beta = beta_init + state.iteration * step
        cr, assignment = evaluate(state.beta)
        state.iteration += 1
        state.cr = cr
        state.history.append(SearchStep(state.iteration, state.beta, step, cr,
                                        list(assignment.bits) if assignment else None))
        if abs(cr - cr_target) <= band:
            converged = True
            break
    return SearchResult(assignment, state, converged, cr_target, "exhaustive")


def search_bits(model, calib, cr_target: float, mode: str = "adaptive", beta_init: float = 0.01,
                b_max: int = DEFAULT_B_MAX, max_iterations: Optional[int] = None,
                step: float = 0.01, table: Optional[ZetaTable] = None,
                fresh: bool = False) -> SearchResult:
    """Run the chosen search against a real model and calibration batch."""
    evaluator = AssignmentEvaluator(model, calib, b_max, table, fresh)
    if mode == "adaptive":
        return adaptive_search(evaluator, cr_target, beta_init, max_iterations or 100)
    if mode == "exhaustive":
        return exhaustive_search(evaluator, cr_target, beta_init, step, max_iterations or 100_000)
    raise ValueError(f"unknown search mode {mode!r}")
