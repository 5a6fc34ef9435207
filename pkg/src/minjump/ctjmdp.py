"""Controlled jump processes: models, policies, marginals, and the
marginal-matching Markov policy.

A model assigns to every feasible (state, action) pair a conservative rate
row.  General policies may look at the whole past trajectory and the time
elapsed since the last jump; between jumps they must be piecewise-constant
in elapsed time with declared breakpoints, so sampling can invert the exact
piecewise-constant mixture hazard (no thinning bias).  Markov policies
depend only on (current state, time), binned on a uniform time grid.

From any policy's state and state-action marginals, the ratio

    phi(a | x, t) = P(t, {x}, {a}) / P(t, {x})

defines a Markov policy whose marginals never exceed the original ones,
with equality from the start through any time where the Markov-policy
process keeps full mass.  The derivation, the dominance/equality verdict,
and the generalized forward-identity residual live here, together with the
state-expansion construction that reduces an arbitrary initial distribution
to a point mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import defaults
from .qkernel import (
    ConstantRateKernel,
    ModelValidationError,
    PiecewiseRateKernel,
    RateKernel,
    StateSpace,
)
from .simulate import (
    STATUS_ABSORBED,
    STATUS_CENSORED,
    STATUS_EXPLODED,
    PathBatch,
    SimConfig,
    check_distribution,
    jumps_before,
    path_rng,
    states_at,
)
from .transition import TimeGrid, ode_oracle


# ---------------------------------------------------------------------------
# model


class MdpModel:
    """Controlled transition rates on a finite (possibly truncated) space.

    ``rates[x, a, y]`` holds the destination rates of action a at state x,
    with the diagonal carrying minus the exit rate (conservative rows);
    rows of unavailable actions are zero.  Sink states are absorbing under
    every action.  ``default_action[x]`` is the measurable selector used
    when a derived policy has no marginal mass to divide at (x, t).
    """

    def __init__(self, space: StateSpace, actions, available, rates, default_action):
        self.space = space
        self.actions = tuple(actions)
        self.available = tuple(tuple(av) for av in available)
        self.rates = np.array(rates, dtype=float)
        self.default_action = tuple(default_action)
        S, A = space.n_states, len(self.actions)
        if self.rates.shape != (S, A, S):
            raise ModelValidationError(f"rates array must have shape ({S},{A},{S})")
        if len(self.available) != S or len(self.default_action) != S:
            raise ModelValidationError("available/default_action must cover all states")
        sinks = set(space.sink_indices)
        for x in range(S):
            if not self.available[x]:
                raise ModelValidationError(f"state {space.labels[x]!r} has no actions")
            if self.default_action[x] not in self.available[x]:
                raise ModelValidationError("default action must be available")
            for a in range(A):
                row = self.rates[x, a]
                if a not in self.available[x]:
                    if np.any(row != 0):
                        raise ModelValidationError("rates on an unavailable action")
                    continue
                off = row.copy()
                off[x] = 0.0
                if np.any(off < 0) or not np.all(np.isfinite(off)):
                    raise ModelValidationError(
                        f"bad rate row at ({space.labels[x]}, {self.actions[a]})"
                    )
                if abs(row.sum()) > defaults.ROW_SUM_REPAIR:
                    raise ModelValidationError(
                        f"non-conservative row at ({space.labels[x]}, {self.actions[a]})"
                    )
                if x in sinks and np.any(row != 0):
                    raise ModelValidationError("sink states must be absorbing")
        if not np.all(np.isfinite(self.qbar())):
            raise ModelValidationError("per-state rate supremum must be finite")
        self.exit_rates = np.zeros((S, A))
        self.plus_rates = self.rates.copy()
        for x in range(S):
            self.exit_rates[x] = -self.rates[x, :, x]
            self.plus_rates[x, :, x] = 0.0
        self.unavailable_mask = np.ones((S, A))
        for x in range(S):
            self.unavailable_mask[x, list(self.available[x])] = 0.0
        self.rates.setflags(write=False)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def qbar(self) -> np.ndarray:
        """Per-state sup of the exit rate over available actions."""
        S = self.space.n_states
        return np.array(
            [max(-self.rates[x, a, x] for a in self.available[x]) for x in range(S)]
        )

    def action_index(self, label: str) -> int:
        return self.actions.index(label)


# ---------------------------------------------------------------------------
# histories and policies


@dataclass(frozen=True)
class History:
    """Strict pre-t information: start state plus the jumps so far."""

    initial_state: int
    jump_times: tuple[float, ...] = ()
    jump_states: tuple[int, ...] = ()

    @property
    def current_state(self) -> int:
        return self.jump_states[-1] if self.jump_states else self.initial_state

    @property
    def last_jump_time(self) -> float:
        return self.jump_times[-1] if self.jump_times else 0.0

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def append(self, t: float, x: int) -> "History":
        return History(
            self.initial_state, self.jump_times + (t,), self.jump_states + (x,)
        )


class GeneralPolicy:
    """History-dependent decision rule, piecewise-constant in elapsed time.

    Subclasses implement ``action_probs(history, s)`` -- the probability
    vector over the global action set in force s time units after the last
    jump -- and ``s_breakpoints(history)``, the finitely many elapsed times
    at which that vector may change during the current sojourn.  The rule
    must be deterministic in (history, s): randomness enters only through
    the sampler, which keeps marks reconstructible from the path skeleton.
    """

    def action_probs(self, history: History, s: float) -> np.ndarray:
        raise NotImplementedError

    def s_breakpoints(self, history: History):
        return ()

    def support(self, model: MdpModel, x: int) -> tuple[int, ...]:
        """Actions this policy might ever select at state x (guard data)."""
        return tuple(model.available[x])


class MarkovPolicy(GeneralPolicy):
    """(state, time-bin) probability table; bin k covers [k*d, (k+1)*d)."""

    def __init__(self, model: MdpModel, bin_width: float, table: np.ndarray):
        if bin_width <= 0:
            raise ModelValidationError("bin width must be positive")
        table = np.asarray(table, dtype=float)
        if table.ndim != 3 or table.shape[1:] != (model.space.n_states, model.n_actions):
            raise ModelValidationError("policy table must be (bins, states, actions)")
        if np.any(table < 0):
            raise ModelValidationError("negative action probability")
        if np.any(np.einsum("ksa,sa->ks", table, model.unavailable_mask) > 1e-12):
            raise ModelValidationError("policy mass outside available actions")
        if np.any(np.abs(table.sum(axis=2) - 1.0) > 1e-9):
            raise ModelValidationError("policy rows must sum to 1")
        self.model = model
        self.bin_width = float(bin_width)
        self.table = table
        self.renorm_log = 0.0

    @property
    def n_bins(self) -> int:
        return len(self.table)

    def bin_of(self, t: float) -> int:
        if not math.isfinite(self.bin_width):
            return 0
        return min(int(t / self.bin_width), self.n_bins - 1)

    def probs(self, x: int, t: float) -> np.ndarray:
        return self.table[self.bin_of(t), x]

    def action_probs(self, history: History, s: float) -> np.ndarray:
        return self.probs(history.current_state, history.last_jump_time + s)

    def s_breakpoints(self, history: History):
        if not math.isfinite(self.bin_width):
            return ()
        t0 = history.last_jump_time
        edges = self.bin_width * np.arange(1, self.n_bins)
        return tuple(float(e - t0) for e in edges if e > t0)

    def support(self, model: MdpModel, x: int) -> tuple[int, ...]:
        return tuple(
            a for a in range(model.n_actions) if np.any(self.table[:, x, a] > 0)
        )


def single_action_policy(model: MdpModel, action=None) -> MarkovPolicy:
    """Deterministic stationary policy; defaults to the model's selector."""
    S, A = model.space.n_states, model.n_actions
    table = np.zeros((1, S, A))
    for x in range(S):
        a = model.default_action[x] if action is None else action
        if np.isscalar(a):
            a = int(a)
        else:
            a = int(a[x])
        if a not in model.available[x]:
            a = model.default_action[x]
        table[0, x, a] = 1.0
    return MarkovPolicy(model, bin_width=math.inf, table=table)


class UniformRandomPolicy(GeneralPolicy):
    """Mixes all available actions uniformly at every state and time."""

    def __init__(self, model: MdpModel):
        self.model = model

    def action_probs(self, history: History, s: float) -> np.ndarray:
        x = history.current_state
        p = np.zeros(self.model.n_actions)
        acts = list(self.model.available[x])
        p[acts] = 1.0 / len(acts)
        return p


class JumpParityPolicy(GeneralPolicy):
    """One action after an even number of jumps, another after odd.

    Genuinely history-dependent (the jump count is not a function of state
    and time), constant within each sojourn.
    """

    fast_sojourn = True

    def __init__(self, model: MdpModel, even_action: int, odd_action: int):
        self.model = model
        self.even_action = int(even_action)
        self.odd_action = int(odd_action)

    def sojourn_action(self, n_jumps: int, x: int) -> int:
        return self._action_for(n_jumps, x)

    def _action_for(self, n_jumps: int, x: int) -> int:
        a = self.even_action if n_jumps % 2 == 0 else self.odd_action
        if a not in self.model.available[x]:
            a = self.model.default_action[x]
        return a

    def action_probs(self, history: History, s: float) -> np.ndarray:
        p = np.zeros(self.model.n_actions)
        p[self._action_for(history.n_jumps, history.current_state)] = 1.0
        return p

    def batch_action_probs(self, batch: PathBatch, t: float, at: np.ndarray) -> np.ndarray:
        """Vectorized in-force probability vectors at time t, (n, A)."""
        counts = jumps_before(batch, t)
        A = self.model.n_actions
        out = np.zeros((len(batch), A))
        even = counts % 2 == 0
        for x in np.unique(at[at >= 0]):
            sel = at == x
            ae = self._action_for(0, int(x))
            ao = self._action_for(1, int(x))
            out[sel & even, ae] = 1.0
            out[sel & ~even, ao] = 1.0
        return out


class FirstJumpTimePolicy(GeneralPolicy):
    """Commits to one action forever based on when the first jump happened.

    Before the first jump the start action is played; afterwards the early
    action if t_1 <= threshold, the late action otherwise.  The decision
    depends on the realized first jump time, which no (state, time) rule
    can reproduce, so the derived Markov policy genuinely mixes.
    """

    def __init__(self, model: MdpModel, threshold: float, start_action: int,
                 early_action: int, late_action: int):
        self.model = model
        self.threshold = float(threshold)
        self.start_action = int(start_action)
        self.early_action = int(early_action)
        self.late_action = int(late_action)

    def _action_for(self, history: History) -> int:
        if history.n_jumps == 0:
            a = self.start_action
        elif history.jump_times[0] <= self.threshold:
            a = self.early_action
        else:
            a = self.late_action
        x = history.current_state
        if a not in self.model.available[x]:
            a = self.model.default_action[x]
        return a

    def action_probs(self, history: History, s: float) -> np.ndarray:
        p = np.zeros(self.model.n_actions)
        p[self._action_for(history)] = 1.0
        return p

    def batch_action_probs(self, batch: PathBatch, t: float, at: np.ndarray) -> np.ndarray:
        counts = jumps_before(batch, t)
        first = np.full(len(batch), np.inf)
        has = batch.offsets[:-1] < batch.offsets[1:]
        first[has] = batch.jump_times[batch.offsets[:-1][has]]
        A = self.model.n_actions
        out = np.zeros((len(batch), A))
        for x in np.unique(at[at >= 0]):
            sel = at == x
            a0 = self._action_for(History(int(x)))
            ae = self.early_action if self.early_action in self.model.available[x] \
                else self.model.default_action[x]
            al = self.late_action if self.late_action in self.model.available[x] \
                else self.model.default_action[x]
            out[sel & (counts == 0), a0] = 1.0
            out[sel & (counts > 0) & (first <= self.threshold), ae] = 1.0
            out[sel & (counts > 0) & (first > self.threshold), al] = 1.0
        return out


def policy_segments(policy: GeneralPolicy, history: History, t_entry: float, t_end: float):
    """(a, b, probs) pieces covering the sojourn [t_entry, t_end).

    The declared breakpoints make the mixture constant per piece; vectors
    are evaluated at the piece's left edge (right-continuous convention).
    """
    rel = sorted(s for s in policy.s_breakpoints(history) if 0.0 < s < t_end - t_entry)
    edges = [t_entry] + [t_entry + s for s in rel] + [t_end]
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            yield a, b, policy.action_probs(history, a - t_entry)


# ---------------------------------------------------------------------------
# controlled sampling


def _run_controlled_fast(model, policy, x0, config, rng, cum_plus):
    """Sojourn loop for deterministic policies constant between jumps."""
    sinks = model.space.sink_indices
    horizon = config.horizon
    exit_rates = model.exit_rates
    times: list[float] = []
    states: list[int] = []
    x, t, n = x0, 0.0, 0
    while True:
        if x in sinks:
            return times, states, STATUS_ABSORBED
        a = policy.sojourn_action(n, x)
        r = exit_rates[x, a]
        if r <= 0.0:
            return times, states, STATUS_CENSORED
        t_next = t + rng.exponential(1.0 / r)
        if t_next <= t:
            t_next = math.nextafter(t, math.inf)
        t = t_next
        if t >= horizon:
            return times, states, STATUS_CENSORED
        row = cum_plus[x, a]
        x = int(np.searchsorted(row, rng.uniform() * row[-1], side="right"))
        times.append(t)
        states.append(x)
        n += 1
        if n >= config.max_jumps:
            return times, states, STATUS_EXPLODED


def _run_controlled(model: MdpModel, policy: GeneralPolicy, x0: int, config: SimConfig, rng):
    sinks = set(model.space.sink_indices)
    horizon = config.horizon
    exit_rates = model.exit_rates
    plus = model.plus_rates
    unavail = model.unavailable_mask
    hist = History(x0)
    times: list[float] = []
    states: list[int] = []
    x, t = x0, 0.0
    status = STATUS_CENSORED
    while True:
        if x in sinks:
            status = STATUS_ABSORBED
            break
        E = rng.exponential()
        t_jump, seg_probs = None, None
        for a, b, probs in policy_segments(policy, hist, t, horizon):
            if float(probs @ unavail[x]) > 1e-12:
                raise ModelValidationError(
                    f"policy mass outside available actions at state "
                    f"{model.space.labels[x]!r}"
                )
            r = float(probs @ exit_rates[x])
            if r > 0:
                dt = E / r
                if a + dt <= b:
                    t_jump, seg_probs = a + dt, probs
                    break
                E -= r * (b - a)
        if t_jump is None:
            status = STATUS_CENSORED
            break
        if t_jump <= t:
            t_jump = math.nextafter(t, math.inf)
        mix = seg_probs @ plus[x]
        c = np.cumsum(mix)
        y = int(np.searchsorted(c, rng.uniform() * c[-1], side="right"))
        times.append(t_jump)
        states.append(y)
        hist = hist.append(t_jump, y)
        x, t = y, t_jump
        if len(times) >= config.max_jumps:
            status = STATUS_EXPLODED
            break
    return times, states, status


def simulate_controlled(
    model: MdpModel, policy: GeneralPolicy, gamma, config: SimConfig
) -> PathBatch:
    """Paths of the controlled process, one counter-split stream per path.

    Action marks are not materialized: policies are deterministic functions
    of (history, elapsed time), so the in-force probability vector at any
    time is reconstructed exactly from the path skeleton when marginals or
    costs need it.
    """
    gamma = check_distribution(gamma, model.space)
    n = config.replications
    initial = np.empty(n, dtype=np.int32)
    status = np.empty(n, dtype=np.int8)
    offsets = np.zeros(n + 1, dtype=np.int64)
    all_times, all_states = [], []
    cg = np.cumsum(gamma)
    fast = getattr(policy, "fast_sojourn", False)
    cum_plus = np.cumsum(model.plus_rates, axis=2) if fast else None
    for i in range(n):
        rng = path_rng(config.seed, i)
        x0 = int(np.searchsorted(cg, rng.uniform() * cg[-1], side="right"))
        if fast:
            times, states, st = _run_controlled_fast(
                model, policy, x0, config, rng, cum_plus
            )
        else:
            times, states, st = _run_controlled(model, policy, x0, config, rng)
        initial[i] = x0
        status[i] = st
        offsets[i + 1] = offsets[i] + len(times)
        all_times.append(times)
        all_states.append(states)
    return PathBatch(
        initial=initial,
        status=status,
        offsets=offsets,
        jump_times=np.concatenate([np.asarray(t) for t in all_times])
        if offsets[-1]
        else np.array([]),
        jump_states=np.concatenate([np.asarray(s, dtype=np.int32) for s in all_states])
        if offsets[-1]
        else np.array([], dtype=np.int32),
        t0=0.0,
        horizon=config.horizon,
        seed=config.seed,
    )


def path_history_at(batch: PathBatch, i: int, t: float) -> History:
    """History of path i strictly up to (and including) the last jump <= t."""
    a, b = batch.offsets[i], batch.offsets[i + 1]
    jt = batch.jump_times[a:b]
    k = int(np.searchsorted(jt, t, side="right"))
    return History(
        int(batch.initial[i]),
        tuple(float(v) for v in jt[:k]),
        tuple(int(s) for s in batch.jump_states[a : a + k]),
    )


# ---------------------------------------------------------------------------
# marginals


@dataclass
class MarginalTable:
    """State and state-action occupancy estimates on a time grid.

    ``state_mass[k, x]`` estimates the chance of being at x at t_k, and
    ``action_mass[k, x, a]`` the joint chance of being at x with action a
    in force.  Sources: ``monte_carlo`` (path frequencies, with standard
    errors) or ``forward_ode`` (transition tables mixed over the initial
    distribution; zero standard errors).  Mass missing from explosion or
    truncation shows up as ``real_mass`` below 1 (sink-state occupancy is
    tracked but lies outside the controlled state space proper).
    """

    times: np.ndarray
    state_mass: np.ndarray
    action_mass: np.ndarray
    state_se: np.ndarray
    action_se: np.ndarray
    source: str
    space: StateSpace | None = None
    n_paths: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        tol = 1e-12 if self.source == "monte_carlo" else 1e-9
        cons = np.abs(self.action_mass.sum(axis=2) - self.state_mass)
        if cons.size and cons.max() > tol:
            raise ModelValidationError(
                f"action masses inconsistent with state masses ({cons.max():.2e})"
            )
        if np.any(self.state_mass < -1e-12) or np.any(self.state_mass > 1 + 1e-9):
            raise ModelValidationError("state masses outside [0, 1]")
        if np.any(self.total_mass > 1 + 1e-9):
            raise ModelValidationError("total mass exceeds 1")

    @property
    def total_mass(self) -> np.ndarray:
        return self.state_mass.sum(axis=1)

    @property
    def real_mass(self) -> np.ndarray:
        """Mass on non-sink states (1 minus explosion/truncation defect)."""
        if self.space is None:
            return self.total_mass
        return self.state_mass[:, self.space.real_indices].sum(axis=1)


def estimate_marginals(
    batch: PathBatch, model: MdpModel, policy: GeneralPolicy, times
) -> MarginalTable:
    """Frequency marginals at the given times.

    The action share of each path is the probability vector the policy had
    in force at that instant (its exact conditional law given the path), so
    action masses sum to the state mass identically and the estimator's
    variance is no larger than sampling realized actions would give.
    Exploded paths contribute to the mass defect.
    """
    times = np.asarray(times, dtype=float)
    S, A = model.space.n_states, model.n_actions
    n = len(batch)
    state_mass = np.zeros((len(times), S))
    action_mass = np.zeros((len(times), S, A))
    action_sq = np.zeros((len(times), S, A))
    for k, t in enumerate(times):
        at = states_at(batch, t)
        alive = at >= 0
        freq = np.bincount(at[alive], minlength=S) / n
        if isinstance(policy, MarkovPolicy):
            probs_t = policy.table[policy.bin_of(t)]
            action_mass[k] = freq[:, None] * probs_t
            action_sq[k] = freq[:, None] * probs_t**2
        elif hasattr(policy, "batch_action_probs"):
            P = policy.batch_action_probs(batch, t, at)
            np.add.at(action_mass[k], at[alive], P[alive])
            np.add.at(action_sq[k], at[alive], P[alive] ** 2)
            action_mass[k] /= n
            action_sq[k] /= n
        else:
            for i in np.nonzero(alive)[0]:
                h = path_history_at(batch, i, t)
                p = policy.action_probs(h, t - h.last_jump_time)
                action_mass[k, at[i]] += p
                action_sq[k, at[i]] += p**2
            action_mass[k] /= n
            action_sq[k] /= n
        # single source of truth keeps the action/state consistency exact
        state_mass[k] = action_mass[k].sum(axis=1)
    state_se = np.sqrt(np.clip(state_mass * (1 - state_mass), 0, None) / n)
    action_se = np.sqrt(np.clip(action_sq - action_mass**2, 0, None) / n)
    return MarginalTable(
        times=times,
        state_mass=state_mass,
        action_mass=action_mass,
        state_se=state_se,
        action_se=action_se,
        source="monte_carlo",
        space=model.space,
        n_paths=n,
    )


def induced_kernel(model: MdpModel, policy: MarkovPolicy, horizon: float) -> RateKernel:
    """The rate kernel a Markov policy drives: rows mixed with its table."""
    if not math.isfinite(policy.bin_width) or policy.n_bins == 1:
        mat = np.einsum("xa,xay->xy", policy.table[0], model.rates)
        return ConstantRateKernel(model.space, mat)
    n_bins = min(policy.n_bins, int(math.ceil(horizon / policy.bin_width)) + 1)
    mats = [
        np.einsum("xa,xay->xy", policy.table[min(k, policy.n_bins - 1)], model.rates)
        for k in range(n_bins)
    ]
    breaks = policy.bin_width * np.arange(1, len(mats))
    return PiecewiseRateKernel(model.space, breaks, mats)


def markov_forward_marginals(
    model: MdpModel,
    policy: MarkovPolicy,
    gamma,
    times,
    grid_step: float | None = None,
) -> MarginalTable:
    """Exact marginals of a Markov policy through its induced kernel.

    The evaluation grid contains every requested time and every policy bin
    edge, so the matrix-exponential chain is exact piece by piece; the only
    error is expm roundoff.  Explosion/truncation defect carries through
    as total mass below 1.
    """
    gamma = check_distribution(gamma, model.space)
    times = np.asarray(times, dtype=float)
    t_end = float(times.max())
    if grid_step is None:
        grid_step = policy.bin_width / 2 if math.isfinite(policy.bin_width) else None
        grid_step = grid_step or max(t_end / 64, 1e-3)
    kernel = induced_kernel(model, policy, t_end)
    grid = TimeGrid.build(0.0, t_end, grid_step, kernel)
    grid = TimeGrid(
        u=grid.u,
        t_end=grid.t_end,
        h=grid.h,
        nodes=np.union1d(grid.nodes, times[times > 0]),
    )
    starts = tuple(int(x) for x in np.nonzero(gamma)[0])
    table = ode_oracle(kernel, 0.0, starts, grid)
    S, A = model.space.n_states, model.n_actions
    state_mass = np.zeros((len(times), S))
    action_mass = np.zeros((len(times), S, A))
    for k, t in enumerate(times):
        if t == 0.0:
            row = gamma.copy()
        else:
            idx = grid.index_of(t)
            row = np.zeros(S)
            for i, x in enumerate(starts):
                row += gamma[x] * table.values[i, idx]
        state_mass[k] = row
        action_mass[k] = row[:, None] * policy.table[policy.bin_of(t)]
    return MarginalTable(
        times=times,
        state_mass=state_mass,
        action_mass=action_mass,
        state_se=np.zeros_like(state_mass),
        action_se=np.zeros_like(action_mass),
        source="forward_ode",
        space=model.space,
        params={"grid_step": grid_step},
    )


# ---------------------------------------------------------------------------
# the marginal-matching Markov policy


def derive_markov_policy(marginals: MarginalTable, model: MdpModel) -> MarkovPolicy:
    """Ratio of state-action to state marginals, binned on the marginal grid.

    Marginal times are read as midpoints of uniform bins.  The division is
    only pinned down where the state has mass; elsewhere any measurable
    selector is admissible, and the choice matters for the derived
    process's own dynamics wherever it outruns the original one.  Cells
    with zero state mass therefore copy the mixture from the nearest
    populated bin of the same state (the empirical frontier has nearly the
    conditional law those cells would show) and only states never seen at
    all fall back to the model's default selector.  Rows are renormalized;
    the worst deviation is kept in ``renorm_log``.
    """
    times = marginals.times
    if len(times) < 1:
        raise ValueError("need at least one marginal time")
    if len(times) == 1:
        delta = 2.0 * float(times[0])
    else:
        steps = np.diff(times)
        if np.max(np.abs(steps - steps[0])) > 1e-9:
            raise ValueError("marginal grid must be uniform to define bins")
        delta = float(steps[0])
    if abs(times[0] - delta / 2) > 1e-9:
        raise ValueError("marginal times must be bin midpoints (k + 1/2) * delta")
    S, A = model.space.n_states, model.n_actions
    avail_mask = 1.0 - model.unavailable_mask
    K = len(times)
    table = np.full((K, S, A), np.nan)
    worst = 0.0
    for k in range(K):
        for x in range(S):
            px = marginals.state_mass[k, x]
            if px <= 0:
                continue
            row = marginals.action_mass[k, x] * avail_mask[x]
            ssum = row.sum()
            if ssum <= 0:
                continue
            worst = max(worst, abs(ssum / px - 1.0))
            table[k, x] = row / ssum
    for x in range(S):
        filled = np.nonzero(~np.isnan(table[:, x, 0]))[0]
        if len(filled) == 0:
            table[:, x, :] = 0.0
            table[:, x, model.default_action[x]] = 1.0
            continue
        for k in range(K):
            if np.isnan(table[k, x, 0]):
                nearest = filled[np.argmin(np.abs(filled - k))]
                table[k, x] = table[nearest, x]
    pol = MarkovPolicy(model, delta, table)
    pol.renorm_log = worst
    return pol


# ---------------------------------------------------------------------------
# dominance verdict


@dataclass
class DominanceReport:
    """Comparison of derived-policy marginals against the original policy's.

    ``equality_through`` is the largest grid time at which the derived side
    still has full mass; two-sided agreement is asserted for all earlier
    times (and never under a mass defect, where only the one-sided bound is
    claimed and the measured gap is data).
    """

    verdict: str
    max_excess_z: float
    max_equality_z: float | None
    equality_through: float | None
    n_checked: int
    violations: list[dict]
    params: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict in ("equality", "dominance")


def _combined_se(pi_m: MarginalTable, phi_m: MarginalTable, kind: str) -> np.ndarray:
    se = np.sqrt(getattr(pi_m, kind + "_se") ** 2 + getattr(phi_m, kind + "_se") ** 2)
    # a zero-count cell has zero sample variance; use the other table's
    # value as the null probability for a floor
    vals = np.maximum(getattr(pi_m, kind + "_mass"), getattr(phi_m, kind + "_mass"))
    n = pi_m.n_paths or phi_m.n_paths
    if n:
        se = np.maximum(se, np.sqrt(np.clip(vals * (1 - vals), 0, None) / n))
    return se


def verify_dominance(
    pi_marginals: MarginalTable,
    phi_marginals: MarginalTable,
    se_factor: float = defaults.SE_FACTOR,
    full_mass_tol: float = defaults.FULL_MASS_TOL,
    extra_tol: float = 0.0,
    state_allowance: np.ndarray | None = None,
    action_allowance: np.ndarray | None = None,
) -> DominanceReport:
    """Check phi-masses <= pi-masses up to noise, and equality under full
    mass.

    The bound is a statement about subsets of the controlled state space
    proper, so sink columns (overflow/cemetery) are excluded: the derived
    policy may legitimately push more mass into a truncation sink.  The
    equality regime likewise triggers on the real (non-sink) mass.

    A binned Markov policy is an L1 approximation of the exact ratio rule;
    ``state_allowance``/``action_allowance`` accept per-entry bias bounds
    for that discretization (measured, e.g., by differencing runs at bin
    widths delta and delta/2) which are added to the noise tolerance.
    """
    if pi_marginals.times.shape != phi_marginals.times.shape or np.any(
        np.abs(pi_marginals.times - phi_marginals.times) > 1e-12
    ):
        raise ValueError("marginal tables must share their time grid")
    space = phi_marginals.space or pi_marginals.space
    real = space.real_indices if space is not None else slice(None)
    se_state = _combined_se(pi_marginals, phi_marginals, "state")[:, real]
    se_action = _combined_se(pi_marginals, phi_marginals, "action")[:, real, :]
    allow_state = 0.0 if state_allowance is None else state_allowance[:, real]
    allow_action = 0.0 if action_allowance is None else action_allowance[:, real, :]

    violations: list[dict] = []
    max_excess_z = 0.0
    for arr_phi, arr_pi, se, allow, kind in (
        (phi_marginals.state_mass[:, real], pi_marginals.state_mass[:, real],
         se_state, allow_state, "state"),
        (phi_marginals.action_mass[:, real, :], pi_marginals.action_mass[:, real, :],
         se_action, allow_action, "action"),
    ):
        excess = arr_phi - arr_pi - allow
        tol = se_factor * se + extra_tol
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, excess / np.where(se > 0, se, 1.0), 0.0)
        max_excess_z = max(max_excess_z, float(z.max()) if z.size else 0.0)
        for idx in np.argwhere(excess > np.maximum(tol, 1e-12))[:20]:
            violations.append(
                {
                    "kind": kind,
                    "index": [int(i) for i in idx],
                    "excess": float(excess[tuple(idx)]),
                    "tol": float(tol[tuple(idx)]),
                }
            )

    full = phi_marginals.real_mass >= 1.0 - full_mass_tol
    equality_through = None
    max_eq_z = None
    if np.any(full):
        s_idx = int(np.nonzero(full)[0].max())
        equality_through = float(phi_marginals.times[s_idx])
        mask = phi_marginals.times <= equality_through
        diffs = (
            np.abs(
                phi_marginals.action_mass[:, real, :]
                - pi_marginals.action_mass[:, real, :]
            )
            - allow_action
        )[mask]
        tols = (se_factor * se_action + extra_tol)[mask]
        ses = se_action[mask]
        with np.errstate(divide="ignore", invalid="ignore"):
            zz = np.where(ses > 0, diffs / np.where(ses > 0, ses, 1.0), 0.0)
        max_eq_z = float(zz.max()) if zz.size else 0.0
        for idx in np.argwhere(diffs > np.maximum(tols, 1e-12))[:20]:
            violations.append(
                {"kind": "equality", "index": [int(i) for i in idx],
                 "diff": float(diffs[tuple(idx)]), "tol": float(tols[tuple(idx)])}
            )

    all_full = equality_through is not None and equality_through >= float(
        phi_marginals.times.max()
    )
    verdict = "violation" if violations else ("equality" if all_full else "dominance")
    return DominanceReport(
        verdict=verdict,
        max_excess_z=max_excess_z,
        max_equality_z=max_eq_z,
        equality_through=equality_through,
        n_checked=int(pi_marginals.state_mass.size + pi_marginals.action_mass.size),
        violations=violations,
        params={
            "se_factor": se_factor,
            "full_mass_tol": full_mass_tol,
            "extra_tol": extra_tol,
        },
    )


# ---------------------------------------------------------------------------
# generalized forward identity along controlled paths


class GkeGuardError(ValueError):
    """The policy-averaged exit rate is unbounded on B."""

    def __init__(self, witness: str, sup: float):
        self.witness = witness
        self.sup = sup
        super().__init__(
            f"generalized forward identity undefined on B: policy-supported "
            f"exit rate unbounded (witness {witness!r}, sup={sup})"
        )


@dataclass
class GkeReport:
    times: np.ndarray
    residual: np.ndarray
    se: np.ndarray
    sup_rate: float

    @property
    def max_z(self) -> float:
        with np.errstate(invalid="ignore", divide="ignore"):
            z = np.abs(self.residual) / np.where(self.se > 0, self.se, np.inf)
        return float(np.nanmax(z)) if z.size else 0.0


def gke_residual(
    model: MdpModel,
    policy: GeneralPolicy,
    batch: PathBatch,
    x: int,
    B,
    times,
) -> GkeReport:
    """Monte Carlo residual of the integrated forward identity

        P(t, B) = delta_x(B) + E int_0^t [inflow(B) - outflow(B)] ds

    with rates averaged over the policy's in-force mixture.  The identity
    needs the policy-supported exit rate bounded on B; unbounded sets are
    refused with the witness named.  Paired per-path differences give the
    standard errors.
    """
    B = sorted(set(int(b) for b in B))
    sup, witness = 0.0, None
    for z in B:
        if z == model.space.overflow_index and model.space.overflow_rate_sup is not None:
            r = float(model.space.overflow_rate_sup)
            lab = model.space.labels[z] + " (truncated remainder)"
        else:
            r = max(model.exit_rates[z, a] for a in policy.support(model, z))
            lab = model.space.labels[z]
        if r > sup:
            sup, witness = r, lab
    if math.isinf(sup):
        raise GkeGuardError(witness, sup)

    times = np.asarray(times, dtype=float)
    t_max = float(times.max())
    n = len(batch)
    in_B = np.zeros(model.space.n_states, dtype=bool)
    in_B[B] = True
    delta0 = 1.0 if in_B[x] else 0.0
    plusB = model.plus_rates[:, :, B].sum(axis=2)  # (S, A): rates into B\{z}

    D = np.zeros((len(times), n))
    for i in range(n):
        rec = batch[i]
        hist = History(rec.initial_state)
        t_entry, state = 0.0, rec.initial_state
        contrib = np.zeros(len(times))
        events = list(zip(rec.jump_times, rec.jump_states))
        events.append((math.inf, -1))
        for jt, js in events:
            seg_end = min(jt, t_max)
            if seg_end > t_entry:
                for a, b, probs in policy_segments(policy, hist, t_entry, seg_end):
                    net = float(probs @ plusB[state])
                    if in_B[state]:
                        net -= float(probs @ model.exit_rates[state])
                    if net != 0.0:
                        overlap = np.clip(np.minimum(times, b) - a, 0.0, None)
                        contrib += net * overlap
            if not math.isfinite(jt) or jt > t_max:
                break
            hist = hist.append(float(jt), int(js))
            state, t_entry = int(js), float(jt)
        occ_i = np.array(
            [
                1.0 if (s is not None and in_B[s]) else 0.0
                for s in (rec.state_at(t) for t in times)
            ]
        )
        D[:, i] = occ_i - delta0 - contrib

    resid = D.mean(axis=1)
    se = D.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else np.full(len(times), np.inf)
    return GkeReport(times=times, residual=resid, se=se, sup_rate=sup)


# ---------------------------------------------------------------------------
# state expansion: reduce an initial distribution to a point mass


class LiftedPolicy(GeneralPolicy):
    """Policy on the expanded model that replays a base policy after time u.

    At the added start state the launch action runs until u and the freeze
    action afterwards; at real states the freeze action holds until u, then
    the base policy is replayed with the clock and history shifted so the
    landing state acts as the initial state at time 0.
    """

    def __init__(self, base: GeneralPolicy, expansion: "Expansion"):
        self.base = base
        self.exp = expansion

    def _shifted(self, history: History) -> History:
        u = self.exp.u
        x1 = history.jump_states[0]
        later = [
            (t - u, s)
            for t, s in zip(history.jump_times[1:], history.jump_states[1:])
        ]
        return History(
            x1,
            tuple(t for t, _ in later),
            tuple(s for _, s in later),
        )

    def action_probs(self, history: History, s: float) -> np.ndarray:
        A2 = self.exp.model.n_actions
        p = np.zeros(A2)
        t = history.last_jump_time + s
        if history.n_jumps == 0:
            p[self.exp.a_launch if t < self.exp.u else self.exp.a_freeze] = 1.0
            return p
        if t < self.exp.u:
            p[self.exp.a_freeze] = 1.0
            return p
        sh = self._shifted(history)
        base_p = self.base.action_probs(sh, t - self.exp.u - sh.last_jump_time)
        p[: len(base_p)] = base_p
        return p

    def s_breakpoints(self, history: History):
        u = self.exp.u
        t_n = history.last_jump_time
        if history.n_jumps == 0:
            return (u,) if u > 0 else ()
        breaks = set()
        if t_n < u:
            breaks.add(u - t_n)
            base_breaks = self.base.s_breakpoints(self._shifted(history))
            # base sojourn starts at shifted time 0 = absolute time u
            breaks.update(u - t_n + s for s in base_breaks)
        else:
            breaks.update(self.base.s_breakpoints(self._shifted(history)))
        return tuple(sorted(b for b in breaks if b > 0))

    def support(self, model: MdpModel, x: int) -> tuple[int, ...]:
        return tuple(model.available[x])


@dataclass
class Expansion:
    """Expanded model with an extra start state and two control actions.

    From the added state the launch action jumps at rate 1 into the
    original space with the given initial distribution; the freeze action
    is absorbing everywhere.  ``lift`` maps any base policy to the expanded
    model so that the process started at the added state reproduces, after
    the time shift u and conditionally on having launched, the original
    process: the stay-forever probability is exp(-u) and marginals obey
    P_expanded(t + u, B, U) = (1 - exp(-u)) P_original(t, B, U).
    """

    model: MdpModel
    u: float
    x_start: int
    a_launch: int
    a_freeze: int
    gamma: np.ndarray

    @property
    def stay_prob(self) -> float:
        return math.exp(-self.u)

    def lift(self, policy: GeneralPolicy) -> LiftedPolicy:
        return LiftedPolicy(policy, self)

    def point_mass(self) -> np.ndarray:
        g = np.zeros(self.model.space.n_states)
        g[self.x_start] = 1.0
        return g


def expand_with_initial_state(model: MdpModel, gamma, u: float) -> Expansion:
    """Add a start state that launches into gamma at rate 1, plus a freeze
    action; the lifting construction reduces distribution-start claims to
    point-start claims."""
    if u <= 0:
        raise ValueError("the shift u must be positive")
    gamma = check_distribution(gamma, model.space)
    S, A = model.space.n_states, model.n_actions
    label = "x_start"
    while label in model.space.labels:
        label += "'"
    space2 = StateSpace(
        labels=model.space.labels + (label,),
        cemetery_index=model.space.cemetery_index,
        overflow_index=model.space.overflow_index,
        overflow_rate_sup=model.space.overflow_rate_sup,
    )
    actions2 = model.actions + ("a_launch", "a_freeze")
    a_launch, a_freeze = A, A + 1
    rates2 = np.zeros((S + 1, A + 2, S + 1))
    rates2[:S, :A, :S] = model.rates
    rates2[S, a_launch, :S] = gamma
    rates2[S, a_launch, S] = -1.0
    available2 = tuple(tuple(av) + (a_freeze,) for av in model.available) + (
        (a_launch, a_freeze),
    )
    default2 = model.default_action + (a_launch,)
    model2 = MdpModel(
        space=space2,
        actions=actions2,
        available=available2,
        rates=rates2,
        default_action=default2,
    )
    return Expansion(
        model=model2,
        u=float(u),
        x_start=S,
        a_launch=a_launch,
        a_freeze=a_freeze,
        gamma=gamma,
    )
