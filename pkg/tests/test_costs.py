import math

import numpy as np
import pytest

from minjump.benchmarks import bench3_model, controlled_birth_model
from minjump.costs import (
    CostModel,
    Discount,
    UnsupportedCombinationError,
    evaluate_cost,
    evaluate_cost_exact,
    evaluate_cost_mc,
)
from minjump.ctjmdp import (
    JumpParityPolicy,
    MarkovPolicy,
    derive_markov_policy,
    estimate_marginals,
    markov_forward_marginals,
    simulate_controlled,
    single_action_policy,
)
from minjump.simulate import SimConfig


def _pm(model, idx=0):
    g = np.zeros(model.space.n_states)
    g[idx] = 1.0
    return g


@pytest.fixture(scope="module")
def bench3_batch():
    model = bench3_model()
    pi = JumpParityPolicy(model, 0, 1)
    cfg = SimConfig(seed=314, horizon=16.0, max_jumps=10**6, replications=20000)
    return model, pi, simulate_controlled(model, pi, _pm(model), cfg)


class TestDiscount:
    def test_constant(self):
        d = Discount.constant(2.0)
        assert d.cumulative(1.5) == 3.0
        assert d.segment_integral(0.0, 1.0) == pytest.approx(
            (1 - math.exp(-2.0)) / 2.0
        )

    def test_piecewise(self):
        d = Discount(breaks=np.array([1.0]), values=np.array([0.0, 2.0]))
        assert d.cumulative(0.5) == 0.0
        assert d.cumulative(2.0) == 2.0
        # integral of e^{-A(t)}: flat weight 1 on [0,1), then decaying
        assert d.segment_integral(0.0, 2.0) == pytest.approx(
            1.0 + (1 - math.exp(-2.0)) / 2.0
        )
        assert d.segment_integral(0.5, 1.5) == pytest.approx(
            0.5 + (1 - math.exp(-1.0)) / 2.0
        )

    def test_negative_rate_allowed_finite_horizon(self):
        d = Discount(breaks=np.array([]), values=np.array([-0.5]))
        assert d.segment_integral(0.0, 1.0) == pytest.approx(
            (math.exp(0.5) - 1) / 0.5
        )


class TestMcRoute:
    def test_unit_cost_unit_discount(self, bench3_batch):
        model, pi, batch = bench3_batch
        cost = CostModel.build(model, running=1.0, discount=1.0)
        res = evaluate_cost_mc(batch, pi, cost, "infinite_discounted")
        # full-mass model: every path contributes 1 - e^{-horizon} exactly
        assert res.value + res.tail_bound == pytest.approx(1.0, abs=1e-6)
        assert res.tail_bound <= 2e-7

    def test_terminal_cost_reduction(self, bench3_batch):
        model, pi, batch = bench3_batch
        g = 2.5
        cost = CostModel.build(model, running=0.0, discount=0.0, instant=[(2.0, g)])
        res = evaluate_cost_mc(batch, pi, cost, "finite_horizon", horizon=2.0)
        assert res.value == pytest.approx(g, abs=1e-12)
        assert res.se == 0.0

    def test_state_dependent_instant_cost(self, bench3_batch):
        model, pi, batch = bench3_batch
        G = np.zeros((3, 2))
        G[0, :] = 1.0  # pay only when sitting at state A
        cost = CostModel.build(model, running=0.0, discount=0.0, instant=[(1.0, G)])
        res = evaluate_cost_mc(batch, pi, cost, "finite_horizon", horizon=2.0)
        m = estimate_marginals(batch, model, pi, [1.0])
        assert res.value == pytest.approx(float(m.state_mass[0, 0]), abs=1e-12)

    def test_jump_costs_match_counting(self, bench3_batch):
        model, pi, batch = bench3_batch
        cost = CostModel.build(model, running=0.0, discount=1.0, jump=1.0)
        res = evaluate_cost_mc(batch, pi, cost, "infinite_with_jump_costs")
        # E sum of e^{-t_n} over jumps, checked against a direct pass
        want = 0.0
        for i in range(min(len(batch), 2000)):
            rec = batch[i]
            want += float(np.exp(-rec.jump_times).sum())
        want /= min(len(batch), 2000)
        assert res.value == pytest.approx(want, rel=0.1)

    def test_variable_discount_finite_horizon(self, bench3_batch):
        model, pi, batch = bench3_batch
        disc = Discount(breaks=np.array([1.0]), values=np.array([0.0, 1.0]))
        cost = CostModel.build(model, running=1.0, discount=disc)
        res = evaluate_cost_mc(batch, pi, cost, "finite_horizon", horizon=3.0)
        want = 1.0 + (1 - math.exp(-2.0))  # int_0^1 1 + int_1^3 e^{-(t-1)}
        assert res.value == pytest.approx(want, abs=1e-9)

    def test_guardrails(self, bench3_batch):
        model, pi, batch = bench3_batch
        disc = Discount(breaks=np.array([1.0]), values=np.array([0.0, 1.0]))
        cost = CostModel.build(model, running=1.0, discount=disc)
        with pytest.raises(UnsupportedCombinationError, match="constant"):
            evaluate_cost_mc(batch, pi, cost, "infinite_discounted")
        cost2 = CostModel.build(model, running=0.0, discount=1.0, jump=1.0)
        with pytest.raises(UnsupportedCombinationError, match="jump"):
            evaluate_cost_mc(batch, pi, cost2, "finite_horizon")

    def test_explosive_model_tail_reported(self):
        model = controlled_birth_model(2.0, 12, choice_levels=12)
        pol = single_action_policy(model, 1)  # always fast: explodes
        cfg = SimConfig(seed=9, horizon=4.0, max_jumps=10**4, replications=2000)
        batch = simulate_controlled(model, pol, _pm(model), cfg)
        cost = CostModel.build(model, running=1.0, discount=1.0)
        res = evaluate_cost_mc(batch, pol, cost, "infinite_discounted")
        # mass reaches the sink quickly, so the value sits well below 1/alpha
        assert res.value < 0.7
        assert res.se is not None


class TestExactRoute:
    def test_matches_closed_form(self, bench3_batch):
        model, pi, batch = bench3_batch
        mids = (np.arange(50) + 0.5) * 0.05
        phi = derive_markov_policy(estimate_marginals(batch, model, pi, mids), model)
        times = np.linspace(0.0, 16.0, 2049)
        marg = markov_forward_marginals(model, phi, _pm(model), times)
        cost = CostModel.build(model, running=1.0, discount=1.0)
        res = evaluate_cost_exact(marg, cost, "infinite_discounted")
        assert abs(res.value - 1.0) <= 1e-4 + res.tail_bound

    def test_instant_cost_needs_grid_time(self, bench3_batch):
        model, pi, batch = bench3_batch
        pol = single_action_policy(model, 0)
        times = np.linspace(0.0, 2.0, 41)
        marg = markov_forward_marginals(model, pol, _pm(model), times)
        cost = CostModel.build(model, running=0.0, discount=0.0, instant=[(0.333, 1.0)])
        with pytest.raises(ValueError, match="grid time"):
            evaluate_cost_exact(marg, cost, "finite_horizon")

    def test_jump_costs_refused(self, bench3_batch):
        model, pi, batch = bench3_batch
        pol = single_action_policy(model, 0)
        times = np.linspace(0.0, 2.0, 41)
        marg = markov_forward_marginals(model, pol, _pm(model), times)
        cost = CostModel.build(model, running=0.0, discount=1.0, jump=1.0)
        with pytest.raises(UnsupportedCombinationError):
            evaluate_cost_exact(marg, cost, "infinite_with_jump_costs")

    def test_mc_marginals_refused(self, bench3_batch):
        model, pi, batch = bench3_batch
        m = estimate_marginals(batch, model, pi, [0.5, 1.0])
        cost = CostModel.build(model, running=1.0, discount=1.0)
        with pytest.raises(UnsupportedCombinationError, match="forward_ode"):
            evaluate_cost_exact(m, cost, "infinite_discounted")


class TestDispatch:
    def test_routes(self, bench3_batch):
        model, pi, batch = bench3_batch
        cost = CostModel.build(model, running=1.0, discount=1.0)
        r1 = evaluate_cost(batch, pi, cost, "infinite_discounted")
        assert r1.route == "monte_carlo"
        pol = single_action_policy(model, 0)
        marg = markov_forward_marginals(model, pol, _pm(model), np.linspace(0, 12, 961))
        r2 = evaluate_cost(marg, cost, "infinite_discounted")
        assert r2.route == "exact"
        with pytest.raises(TypeError):
            evaluate_cost("nope", pi, cost, "infinite_discounted")

    def test_cost_model_validation(self, bench3_batch):
        model = bench3_batch[0]
        with pytest.raises(ValueError, match="nonnegative"):
            CostModel.build(model, running=-1.0)
        with pytest.raises(ValueError):
            CostModel.build(model, jump=np.zeros((2, 2)))


def test_cost_monotonicity_derived_vs_general(bench3_batch):
    # nonnegative costs: the derived policy never costs more than the
    # original beyond noise (here both equal 1 - e^{-H} exactly)
    model, pi, batch = bench3_batch
    cost = CostModel.build(model, running=1.0, discount=1.0)
    r_pi = evaluate_cost_mc(batch, pi, cost, "infinite_discounted")
    mids = (np.arange(50) + 0.5) * 0.05
    phi = derive_markov_policy(estimate_marginals(batch, model, pi, mids), model)
    cfg = SimConfig(seed=315, horizon=16.0, max_jumps=10**6, replications=20000)
    b_phi = simulate_controlled(model, phi, _pm(model), cfg)
    r_phi = evaluate_cost_mc(b_phi, phi, cost, "infinite_discounted")
    se = math.sqrt((r_pi.se or 0) ** 2 + (r_phi.se or 0) ** 2)
    assert r_phi.value <= r_pi.value + 3 * se + r_pi.tail_bound + r_phi.tail_bound + 1e-9
