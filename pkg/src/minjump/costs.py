"""Discounted cost criteria for controlled jump processes.

Three criteria are supported:

* ``infinite_discounted``      -- integral of e^{-alpha t} c(X_t, pi_t) up to
                                  explosion, constant alpha > 0;
* ``finite_horizon``           -- running costs with a (possibly
                                  piecewise-constant, possibly negative)
                                  discount rate alpha(.) plus instant costs
                                  G_i collected at fixed times u_i <= T;
* ``infinite_with_jump_costs`` -- the constant-alpha criterion plus costs
                                  C(previous, next) collected at jump epochs
                                  (jump costs deliberately cannot depend on
                                  the action).

Monte Carlo evaluation integrates segment by segment in closed form (the
cost rate and the discount rate are both piecewise-constant along a path);
the exact route integrates the state-action marginals of a Markov policy
over time and refuses the jump-cost criterion, whose epochs the marginals
cannot see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ctjmdp import (
    GeneralPolicy,
    MarginalTable,
    MarkovPolicy,
    MdpModel,
    path_history_at,
    policy_segments,
)
from .simulate import STATUS_EXPLODED, PathBatch

CRITERIA = ("infinite_discounted", "finite_horizon", "infinite_with_jump_costs")


class UnsupportedCombinationError(ValueError):
    """The requested criterion cannot be evaluated on this route."""


@dataclass(frozen=True)
class Discount:
    """Piecewise-constant discount rate with its exact cumulative integral."""

    breaks: np.ndarray
    values: np.ndarray

    @classmethod
    def constant(cls, alpha: float) -> "Discount":
        return cls(breaks=np.array([]), values=np.array([float(alpha)]))

    @property
    def is_constant(self) -> bool:
        return len(self.values) == 1

    def rate_at(self, t: float) -> float:
        return float(self.values[np.searchsorted(self.breaks, t, side="right")])

    def cumulative(self, t: float) -> float:
        """int_0^t alpha(s) ds."""
        edges = np.concatenate([[0.0], self.breaks, [max(t, 0.0)]])
        total = 0.0
        for k, v in enumerate(self.values):
            lo, hi = edges[k], min(edges[k + 1], t) if k + 1 < len(edges) else t
            hi = min(edges[k + 1], t)
            if hi > lo:
                total += v * (hi - lo)
            if edges[k + 1] >= t:
                break
        return total

    def segment_integral(self, a: float, b: float) -> float:
        """int_a^b e^{-cumulative(t)} dt, exact."""
        if b <= a:
            return 0.0
        cuts = [a] + [float(x) for x in self.breaks if a < x < b] + [b]
        total = 0.0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            alpha = self.rate_at(lo)
            w = math.exp(-self.cumulative(lo))
            if alpha == 0.0:
                total += w * (hi - lo)
            else:
                total += w * -math.expm1(-alpha * (hi - lo)) / alpha
        return total


def _as_sa_array(value, model: MdpModel, name: str) -> np.ndarray:
    S, A = model.space.n_states, model.n_actions
    arr = np.full((S, A), float(value)) if np.isscalar(value) else np.array(value, float)
    if arr.shape != (S, A):
        raise ValueError(f"{name} must be a scalar or an (S, A) array")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be nonnegative and finite")
    # sink states stand for mass outside the real space; costs stop there
    arr[list(model.space.sink_indices), :] = 0.0
    return arr


@dataclass
class CostModel:
    """Nonnegative running, instant, and jump costs with a discount rule."""

    model: MdpModel
    running: np.ndarray
    discount: Discount
    instant: list[tuple[float, np.ndarray]] = field(default_factory=list)
    jump: np.ndarray | None = None

    @classmethod
    def build(cls, model: MdpModel, running=0.0, discount=1.0, instant=(), jump=None):
        disc = discount if isinstance(discount, Discount) else Discount.constant(discount)
        inst = [(float(u), _as_sa_array(g, model, f"instant cost at {u}")) for u, g in instant]
        if jump is not None:
            S = model.space.n_states
            jump = np.full((S, S), float(jump)) if np.isscalar(jump) else np.array(jump, float)
            if jump.shape != (S, S) or np.any(jump < 0):
                raise ValueError("jump costs must be a nonnegative (S, S) array")
            jump[list(model.space.sink_indices), :] = 0.0
        return cls(
            model=model,
            running=_as_sa_array(running, model, "running cost"),
            discount=disc,
            instant=inst,
            jump=jump,
        )


@dataclass
class CostResult:
    value: float
    se: float | None
    tail_bound: float
    route: str
    criterion: str
    params: dict = field(default_factory=dict)


def _mc_tail_bound(cost: CostModel, horizon: float) -> float:
    """Discounted running cost that a truncated path could still collect."""
    alpha_min = float(np.min(cost.discount.values))
    c_max = float(cost.running.max())
    if alpha_min <= 0:
        return math.inf if c_max > 0 else 0.0
    return c_max * math.exp(-cost.discount.cumulative(horizon)) / alpha_min


def evaluate_cost_mc(
    batch: PathBatch,
    policy: GeneralPolicy,
    cost: CostModel,
    criterion: str,
    horizon: float | None = None,
) -> CostResult:
    """Per-path closed-form cost accumulation, averaged over the batch.

    Paths are integrated to ``horizon`` (default: the simulation horizon);
    the unobserved remainder of an infinite-horizon criterion is bounded by
    ``tail_bound`` in the result.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    model = cost.model
    if criterion != "finite_horizon" and not cost.discount.is_constant:
        raise UnsupportedCombinationError(
            "infinite-horizon criteria use a constant discount rate"
        )
    if criterion != "infinite_with_jump_costs" and cost.jump is not None:
        raise UnsupportedCombinationError(
            "jump costs belong to the infinite_with_jump_costs criterion"
        )
    T = float(horizon if horizon is not None else batch.horizon)
    n = len(batch)
    disc = cost.discount
    c_of = cost.running
    instants = [] if criterion == "infinite_discounted" else cost.instant
    totals = np.zeros(n)
    for i in range(n):
        rec = batch[i]
        hist_events = list(zip(rec.jump_times, rec.jump_states))
        # truncated record: integrate what was observed
        end_i = min(T, rec.last_time) if rec.status == STATUS_EXPLODED else T
        v = 0.0
        from .ctjmdp import History

        hist = History(rec.initial_state)
        t_entry, state = 0.0, rec.initial_state
        for jt, js in hist_events + [(math.inf, -1)]:
            seg_end = min(jt, end_i)
            if seg_end > t_entry:
                for a, b, probs in policy_segments(policy, hist, t_entry, seg_end):
                    rate = float(probs @ c_of[state])
                    if rate:
                        v += rate * disc.segment_integral(a, b)
            if criterion == "infinite_with_jump_costs" and cost.jump is not None:
                if math.isfinite(jt) and jt <= end_i:
                    v += math.exp(-disc.cumulative(jt)) * cost.jump[state, js]
            if not math.isfinite(jt) or jt >= end_i:
                break
            hist = hist.append(float(jt), int(js))
            state, t_entry = int(js), float(jt)
        for u_i, G in instants:
            if u_i > end_i:
                continue
            s = rec.state_at(u_i)
            if s is None or s in model.space.sink_indices:
                continue
            h = path_history_at(batch, i, u_i)
            p = policy.action_probs(h, u_i - h.last_jump_time)
            v += math.exp(-disc.cumulative(u_i)) * float(p @ G[s])
        totals[i] = v
    value = float(totals.mean())
    se = float(totals.std(ddof=1) / math.sqrt(n)) if n > 1 else None
    tail = 0.0 if criterion == "finite_horizon" else _mc_tail_bound(cost, T)
    return CostResult(
        value=value,
        se=se,
        tail_bound=tail,
        route="monte_carlo",
        criterion=criterion,
        params={"horizon": T, "n_paths": n},
    )


def evaluate_cost_exact(
    marginals: MarginalTable,
    cost: CostModel,
    criterion: str,
) -> CostResult:
    """Quadrature of the discounted running cost against exact marginals.

    Requires forward-route marginals (Markov policies only); jump costs are
    invisible to marginals and are refused.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    if criterion == "infinite_with_jump_costs":
        raise UnsupportedCombinationError(
            "jump-epoch costs need path samples; marginals cannot see epochs"
        )
    if marginals.source != "forward_ode":
        raise UnsupportedCombinationError("exact route needs forward_ode marginals")
    times = marginals.times
    disc = cost.discount
    weights = np.array([math.exp(-disc.cumulative(t)) for t in times])
    dens = np.einsum("kxa,xa->k", marginals.action_mass, cost.running)
    value = float(np.trapezoid(weights * dens, times))
    for u_i, G in ([] if criterion == "infinite_discounted" else cost.instant):
        k = int(np.argmin(np.abs(times - u_i)))
        if abs(times[k] - u_i) > 1e-9:
            raise ValueError(f"instant-cost time {u_i} must be a marginal grid time")
        value += math.exp(-disc.cumulative(u_i)) * float(
            np.einsum("xa,xa->", marginals.action_mass[k], G)
        )
    tail = 0.0 if criterion == "finite_horizon" else _mc_tail_bound(cost, float(times.max()))
    h = float(np.max(np.diff(times))) if len(times) > 1 else 0.0
    return CostResult(
        value=value,
        se=None,
        tail_bound=tail,
        route="exact",
        criterion=criterion,
        params={"grid_step": h, "t_end": float(times.max())},
    )


def evaluate_cost(source, policy_or_cost, *args, **kwargs) -> CostResult:
    """Dispatch on the source: path batches go to the Monte Carlo route,
    marginal tables to the exact route."""
    if isinstance(source, PathBatch):
        return evaluate_cost_mc(source, policy_or_cost, *args, **kwargs)
    if isinstance(source, MarginalTable):
        return evaluate_cost_exact(source, policy_or_cost, *args, **kwargs)
    raise TypeError("source must be a PathBatch or a MarginalTable")
