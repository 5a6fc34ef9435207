import math

import numpy as np
import pytest
from scipy.integrate import quad

from minjump.benchmarks import (
    oscillator_kernel,
    pure_birth_kernel,
    random_kernel,
    two_state_kernel,
    zero_kernel,
)
from minjump.qkernel import PiecewiseRateKernel, StateSpace, TimeWindow
from minjump.transition import (
    PropertyViolation,
    TermSumNotConverged,
    TimeGrid,
    TransitionTable,
    backward_start_family,
    chapman_kolmogorov_residual,
    jump_count_terms,
    minimal_transition,
    ode_oracle,
    survival,
    truncation_sweep,
)

E1 = math.exp(-1.0)


class TestTimeGrid:
    def test_basic(self):
        g = TimeGrid.build(0.0, 1.0, 0.25)
        assert np.allclose(g.nodes, [0, 0.25, 0.5, 0.75, 1.0])
        assert g.index_of(0.5) == 2

    def test_refines_to_breakpoints(self):
        sp = StateSpace(labels=("a", "b"))
        k = PiecewiseRateKernel(
            sp, [0.3], [[[-1, 1], [0, 0]], [[-2, 2], [0, 0]]], TimeWindow(0, 2)
        )
        g = TimeGrid.build(0.0, 1.0, 0.25, k)
        assert 0.3 in g.nodes

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimeGrid.build(0.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            TimeGrid.build(1.0, 1.0, 0.1)


class TestSurvival:
    def test_zero_kernel(self, zero3):
        assert survival(zero3, 0.0, 0, 5.0) == 1.0

    def test_oscillator_values(self, osc20):
        assert survival(osc20, 0.0, 0, 1.0) == pytest.approx(E1, abs=1e-15)
        x3 = osc20.space.index("3")
        assert survival(osc20, 0.0, x3, 0.25) == pytest.approx(
            math.exp(-2.0), abs=1e-15
        )

    def test_piecewise_exact(self):
        sp = StateSpace(labels=("a", "b"))
        k = PiecewiseRateKernel(
            sp, [1.0], [[[0, 0], [0, 0]], [[-2, 2], [0, 0]]], TimeWindow(0, 3)
        )
        assert survival(k, 0.0, 0, 1.5) == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_domain_errors(self, two_state):
        with pytest.raises(ValueError):
            survival(two_state, 1.0, 0, 0.5)


class TestTermStack:
    def test_term0_is_survival_on_diagonal(self, two_state):
        grid = TimeGrid.build(0.0, 1.0, 0.01, two_state)
        stack = jump_count_terms(two_state, 0.0, 0, grid, 0)
        t0 = stack.terms[0]
        assert np.allclose(t0[:, 0], np.exp(-grid.nodes))
        assert np.all(t0[:, 1] == 0.0)

    def test_two_state_first_term_against_quadrature(self, two_state):
        # one-jump mass 0 -> 1 at t: int_0^t e^-s * 1 * e^-2(t-s) ds
        grid = TimeGrid.build(0.0, 1.0, 1e-3, two_state)
        stack = jump_count_terms(two_state, 0.0, 0, grid, 1)
        got = stack.terms[1][grid.index_of(1.0), 1]
        want, _ = quad(lambda s: math.exp(-s) * math.exp(-2 * (1 - s)), 0.0, 1.0)
        assert got == pytest.approx(want, abs=1e-7)
        assert want == pytest.approx(math.exp(-1) - math.exp(-2), abs=1e-12)

    def test_oscillator_first_term_against_quadrature(self):
        kernel = oscillator_kernel(6)
        grid = TimeGrid.build(0.0, 1.0, 1e-3, kernel)
        stack = jump_count_terms(kernel, 0.0, 0, grid, 1)
        for j in (1, -2, 4):
            y = kernel.space.index(str(j))
            rate = 2.0 ** abs(j)
            w = 2.0 ** -(abs(j) + 1)
            want, _ = quad(
                lambda s: math.exp(-s) * w * math.exp(-rate * (1 - s)), 0.0, 1.0
            )
            assert stack.terms[1][grid.index_of(1.0), y] == pytest.approx(
                want, abs=1e-7
            )

    def test_partial_sums_monotone_substochastic(self, two_state):
        grid = TimeGrid.build(0.0, 1.0, 0.01, two_state)
        stack = jump_count_terms(two_state, 0.0, 0, grid, 8)
        prev = np.zeros_like(stack.terms[0])
        for ps in stack.partial_sums:
            assert np.all(ps >= prev - 1e-15)
            assert np.all(ps.sum(axis=1) <= 1.0 + 1e-9)
            prev = ps


class TestMinimalTransition:
    def test_oscillator_closed_form(self, osc20):
        grid = TimeGrid.build(0.0, 1.0, 1e-3, osc20)
        tab = minimal_transition(osc20, 0.0, 0, grid, tol=1e-7)
        assert tab.at(0, 1.0, 0) == pytest.approx(E1, abs=1e-5)
        for j in range(-8, 9):
            if j == 0:
                continue
            y = osc20.space.index(str(j))
            assert tab.at(0, 1.0, y) == pytest.approx(
                (1 - E1) / 2 ** (abs(j) + 1), abs=1e-5
            )

    def test_identity_at_start(self, two_state):
        grid = TimeGrid.build(0.0, 1.0, 1e-2, two_state)
        tab = minimal_transition(two_state, 0.0, 0, grid, tol=1e-9)
        assert tab.values[0, 0].tolist() == [1.0, 0.0]

    def test_boundary_shrinks_with_step(self, two_state):
        # first-node deviation from the indicator is O(h)
        devs = []
        for h in (1e-2, 5e-3):
            grid = TimeGrid.build(0.0, 0.5, h, two_state)
            tab = minimal_transition(two_state, 0.0, 0, grid, tol=1e-10)
            devs.append(abs(tab.values[0, 1, 0] - 1.0))
        assert devs[1] < devs[0]
        assert devs[0] == pytest.approx(1e-2, rel=0.2)

    def test_explosion_defect_positive(self, birth40):
        grid = TimeGrid.build(0.0, 1.0, 1e-3, birth40)
        tab = minimal_transition(birth40, 0.0, 0, grid, tol=1e-7)
        assert tab.term_tail_max == 0.0  # terms vanish exactly past the chain
        assert tab.mass_defect[0, -1] > 0.1
        # bounded-rate kernels keep full mass up to the term tail
        k2 = two_state_kernel(1.0, 2.0)
        g2 = TimeGrid.build(0.0, 1.0, 1e-3, k2)
        t2 = minimal_transition(k2, 0.0, 0, g2, tol=1e-9)
        assert np.all(t2.mass_defect[0] <= t2.term_tail_max + 1e-7)

    def test_strict_mode_raises_with_partial_table(self, osc20):
        grid = TimeGrid.build(0.0, 1.0, 1e-2, osc20)
        with pytest.raises(TermSumNotConverged) as ei:
            minimal_transition(osc20, 0.0, 0, grid, tol=1e-7, n_max=50, strict=True)
        assert isinstance(ei.value.table, TransitionTable)
        assert ei.value.table.term_tail_max > 1e-7


class TestOdeOracle:
    def test_two_state_closed_form(self, two_state):
        grid = TimeGrid.build(0.0, 1.0, 1e-3, two_state)
        tab = ode_oracle(two_state, 0.0, (0, 1), grid)
        lam, mu = 1.0, 2.0
        for t in (0.1, 0.5, 1.0):
            p00 = mu / 3 + lam / 3 * math.exp(-3 * t)
            assert tab.at(0, t, 0) == pytest.approx(p00, abs=1e-12)
        assert tab.at(0, 1.0, 0) == pytest.approx(2 / 3 + math.exp(-3) / 3, abs=1e-12)

    def test_zero_kernel_identity(self, zero3):
        grid = TimeGrid.build(0.0, 2.0, 0.25, zero3)
        tab = ode_oracle(zero3, 0.0, (0, 1, 2), grid)
        for k in range(len(grid.nodes)):
            assert np.allclose(tab.values[:, k, :], np.eye(3))

    def test_oracle_agrees_with_terms(self, osc20):
        grid = TimeGrid.build(0.0, 1.0, 1e-3, osc20)
        term = minimal_transition(osc20, 0.0, 0, grid, tol=1e-7)
        orc = ode_oracle(osc20, 0.0, 0, grid)
        diff = np.abs(term.values[0] - orc.values[0]).max()
        assert diff <= term.term_tail_max + 1e-6

    def test_quadrature_second_order(self):
        # halving h shrinks the term-vs-oracle gap by at least 3x
        kernel = two_state_kernel(1.0, 2.0)
        errs = []
        for h in (2e-2, 1e-2):
            grid = TimeGrid.build(0.0, 1.0, h, kernel)
            term = minimal_transition(kernel, 0.0, 0, grid, tol=1e-12)
            orc = ode_oracle(kernel, 0.0, 0, grid)
            errs.append(np.abs(term.values[0] - orc.values[0]).max())
        assert errs[0] / errs[1] >= 3.0


class TestChapmanKolmogorov:
    def test_zero_kernel(self, zero3):
        g_u = TimeGrid.build(0.0, 1.0, 0.25, zero3)
        g_s = TimeGrid.build(0.5, 1.0, 0.25, zero3)
        tab = ode_oracle(zero3, 0.0, (0, 1, 2), g_u)
        fam = ode_oracle(zero3, 0.5, (0, 1, 2), g_s)
        res, _ = chapman_kolmogorov_residual(tab, fam, 1.0)
        assert res == 0.0

    def test_two_state_semigroup(self, two_state):
        g_u = TimeGrid.build(0.0, 1.0, 1e-3, two_state)
        g_s = TimeGrid.build(0.5, 1.0, 1e-3, two_state)
        tab = ode_oracle(two_state, 0.0, (0, 1), g_u)
        fam = ode_oracle(two_state, 0.5, (0, 1), g_s)
        res, _ = chapman_kolmogorov_residual(tab, fam, 1.0)
        assert res <= 1e-8

    def test_term_table_cross_check(self):
        # term-sum tables from every start state on a small model
        kernel = oscillator_kernel(4)
        S = kernel.space.n_states
        g_u = TimeGrid.build(0.0, 1.0, 2e-3, kernel)
        g_s = TimeGrid.build(0.5, 1.0, 2e-3, kernel)
        tabs = [minimal_transition(kernel, 0.0, x, g_u, tol=1e-9) for x in range(S)]
        fams = [minimal_transition(kernel, 0.5, x, g_s, tol=1e-9) for x in range(S)]
        tab = tabs[0]
        tab_all = TransitionTable(
            space=kernel.space, grid=g_u, start_states=tuple(range(S)),
            values=np.concatenate([t.values for t in tabs]), method="term_sum",
        )
        fam_all = TransitionTable(
            space=kernel.space, grid=g_s, start_states=tuple(range(S)),
            values=np.concatenate([f.values for f in fams]), method="term_sum",
        )
        res, _ = chapman_kolmogorov_residual(tab_all, fam_all, 1.0)
        quad_tol = max(t.term_tail_max for t in tabs + fams) + 1e-6
        assert res <= 5 * quad_tol

    def test_missing_starts_error(self, two_state):
        g_u = TimeGrid.build(0.0, 1.0, 1e-2, two_state)
        g_s = TimeGrid.build(0.5, 1.0, 1e-2, two_state)
        tab = ode_oracle(two_state, 0.0, (0, 1), g_u)
        fam = ode_oracle(two_state, 0.5, 0, g_s)
        with pytest.raises(ValueError, match="lacks start states"):
            chapman_kolmogorov_residual(tab, fam, 1.0)


class TestTruncationSweep:
    def test_oscillator_monotone(self):
        tabs = truncation_sweep(
            oscillator_kernel, [4, 8, 16], 0.0, "0", 1.0, h=2e-3, tol=1e-7
        )
        vals = []
        for t in tabs:
            y = [i for i, lab in enumerate(t.space.labels) if lab == "1"][0]
            vals.append(t.at(0, 1.0, y))
        assert vals == sorted(vals)
        assert vals[-1] == pytest.approx((1 - E1) / 4, abs=1e-4)

    def test_pure_birth_monotone(self):
        tabs = truncation_sweep(
            lambda N: pure_birth_kernel(2.0, N), [10, 20, 40], 0.0, "1", 1.0,
            h=1e-3, tol=1e-7,
        )
        kept_mass = []
        for t in tabs:
            real = t.space.real_indices
            kept_mass.append(float(t.values[0, -1, real].sum()))
        assert kept_mass == sorted(kept_mass)

    def test_zero_kernel_levels_identical(self):
        tabs = truncation_sweep(
            lambda n: zero_kernel(3), [3, 3, 3], 0.0, "s0", 1.0, h=0.1
        )
        for t in tabs:
            assert np.allclose(t.values, tabs[0].values)

    def test_rejects_decreasing_levels(self):
        with pytest.raises(ValueError):
            truncation_sweep(oscillator_kernel, [8, 4], 0.0, "0", 1.0)


def test_backward_family_matches_forward(two_state):
    grid = TimeGrid.build(0.0, 1.0, 1e-2, two_state)
    fam = backward_start_family(two_state, grid)
    # homogeneous kernel: P(u, .; 1, .) = P(0, .; 1-u, .)
    tab = ode_oracle(two_state, 0.0, (0, 1), grid)
    for k, u in enumerate(grid.nodes):
        want = tab.values[:, grid.index_of(round(1.0 - u, 12)), :]
        assert np.allclose(fam[k], want, atol=1e-12)


def test_table_validation_rejects_bad_rows(two_state):
    grid = TimeGrid.build(0.0, 1.0, 0.25, two_state)
    good = ode_oracle(two_state, 0.0, 0, grid)
    bad_vals = good.values.copy()
    bad_vals[0, 2] = [0.9, 0.9]
    with pytest.raises(PropertyViolation):
        TransitionTable(
            space=two_state.space, grid=grid, start_states=(0,),
            values=bad_vals, method="matrix_exponential",
        )
