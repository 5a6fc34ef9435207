"""Acceptance suite: every criterion at its stated tolerance.

Each test prints its one-line verdict (run pytest with -s to stream them);
the same checks back the ``minjump accept`` command.  Monte Carlo sizes are
the full ones, so this module dominates the suite's runtime.
"""

import json

import pytest

from minjump import acceptance


def _run(fn):
    result = fn(fast=False)
    print("\n" + result.line())
    print("   ", json.dumps(result.details, default=str))
    assert result.passed, f"criterion {result.cid} failed: {result.details}"
    return result


def test_criterion_01_oscillator_closed_form():
    r = _run(acceptance.criterion_1)
    assert r.details["worst_abs_err"] <= 1e-5
    assert r.details["runtime_s"] < 30.0


def test_criterion_02_oracle_equivalence():
    r = _run(acceptance.criterion_2)
    assert r.details["worst_entry_diff"] <= 1e-6


def test_criterion_03_chapman_kolmogorov():
    r = _run(acceptance.criterion_3)
    assert r.details["worst_residual"] <= 1e-6


def test_criterion_04_equation_suite():
    r = _run(acceptance.criterion_4)
    assert r.details["worst_differential"] <= 1e-4
    assert r.details["worst_integral"] <= 1e-6
    assert r.details["guard_refused_full_set"]
    assert r.details["neg_control"]["backward"] >= 0.01
    assert r.details["neg_control"]["forward"] >= 0.01


def test_criterion_05_explosion_defect_vs_monte_carlo():
    r = _run(acceptance.criterion_5)
    assert r.details["z"] <= 4.0
    assert r.details["defect"] >= 10 * r.details["se"]


def test_criterion_06_simulated_law_matches_minimal_solution():
    r = _run(acceptance.criterion_6)
    assert r.details["entries_failing"] == 0


def test_criterion_07_markov_reduction_bounded():
    r = _run(acceptance.criterion_7)
    assert r.details["delta=0.05"]["verdict"] == "equality"
    assert r.details["delta=0.025"]["verdict"] == "equality"


def test_criterion_08_dominance_explosive():
    r = _run(acceptance.criterion_8)
    assert r.details["verdict"] == "dominance"
    assert r.details["phi_real_mass_defect_at_1"] > 1e-3


def test_criterion_09_cost_criteria():
    r = _run(acceptance.criterion_9)
    assert all(r.details["checks"].values())


def test_criterion_10_expansion_construction():
    r = _run(acceptance.criterion_10)
    assert r.details["stay_z"] <= 3.0
    assert r.details["shift_scale_worst_z"] <= 3.0


def test_criterion_11_determinism():
    r = _run(acceptance.criterion_11)
    assert all(v["identical"] for v in r.details.values())
