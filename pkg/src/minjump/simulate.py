"""Path sampling for the jump process of a rate kernel.

Holding times are drawn by exact inversion of the piecewise-linear
cumulative hazard (constant and piecewise kernels) or by thinning against a
declared majorant (closed-form kernels); destinations are drawn from the
rate row in force at the jump instant.  A path ends censored at the
horizon, absorbed in a sink state, or flagged exploded when it accumulates
``max_jumps`` jumps -- the last jump time is reported so the gap to the true
explosion time stays visible.

Replication streams are split counter-based (one Philox counter per path
index under a single root key), so results are independent of scheduling
and bit-reproducible from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from .qkernel import (
    ConstantRateKernel,
    FunctionRateKernel,
    PiecewiseRateKernel,
    RateKernel,
)

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


STATUS_CENSORED = 0
STATUS_ABSORBED = 1
STATUS_EXPLODED = 2
_STATUS_NAMES = {0: "censored_at_horizon", 1: "absorbed", 2: "exploded"}


@dataclass(frozen=True)
class SimConfig:
    seed: int
    horizon: float
    max_jumps: int = 10_000
    replications: int = 1

    def __post_init__(self):
        if self.horizon <= 0 or self.max_jumps <= 0 or self.replications <= 0:
            raise ValueError("horizon, max_jumps and replications must be positive")


def path_rng(seed: int, index: int) -> Generator:
    """Independent stream for one replication; counter-based, order-free."""
    return Generator(Philox(key=np.uint64(seed & (2**64 - 1)), counter=[0, 0, 0, index]))


@dataclass
class PathRecord:
    """One realised trajectory: start state, jump sequence, terminal status."""

    initial_state: int
    t0: float
    jump_times: np.ndarray
    jump_states: np.ndarray
    status: int
    horizon: float

    @property
    def status_name(self) -> str:
        return _STATUS_NAMES[self.status]

    @property
    def last_time(self) -> float:
        return float(self.jump_times[-1]) if len(self.jump_times) else self.t0

    def states_with_times(self):
        return list(zip(self.jump_times, self.jump_states))

    def state_at(self, t: float) -> int | None:
        """State occupied at time t; None beyond an exploded path's record."""
        if self.status == STATUS_EXPLODED and t >= self.last_time:
            return None
        k = int(np.searchsorted(self.jump_times, t, side="right"))
        return int(self.jump_states[k - 1]) if k else self.initial_state

    def validate(self, space=None):
        if len(self.jump_times):
            dt = np.diff(np.concatenate([[self.t0], self.jump_times]))
            if np.any(dt <= 0):
                raise ValueError("jump times must strictly increase")
            seq = np.concatenate([[self.initial_state], self.jump_states])
            if np.any(seq[1:] == seq[:-1]):
                raise ValueError("consecutive states must differ")
        if space is not None and self.status == STATUS_ABSORBED:
            if int(self.jump_states[-1]) not in space.sink_indices:
                raise ValueError("absorbed status requires a sink terminal state")


class PathBatch:
    """Columnar storage for many paths (ragged arrays with offsets)."""

    def __init__(self, initial, status, offsets, jump_times, jump_states, t0, horizon, seed):
        self.initial = np.asarray(initial, dtype=np.int32)
        self.status = np.asarray(status, dtype=np.int8)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.jump_times = np.asarray(jump_times, dtype=np.float64)
        self.jump_states = np.asarray(jump_states, dtype=np.int32)
        self.t0 = float(t0)
        self.horizon = float(horizon)
        self.seed = seed

    def __len__(self):
        return len(self.initial)

    def __getitem__(self, i: int) -> PathRecord:
        a, b = self.offsets[i], self.offsets[i + 1]
        return PathRecord(
            initial_state=int(self.initial[i]),
            t0=self.t0,
            jump_times=self.jump_times[a:b],
            jump_states=self.jump_states[a:b],
            status=int(self.status[i]),
            horizon=self.horizon,
        )

    def n_jumps(self) -> np.ndarray:
        return np.diff(self.offsets)

    def summary(self) -> dict:
        n = len(self)
        return {
            "n_paths": n,
            "seed": self.seed,
            "horizon": self.horizon,
            "explosion_fraction": float(np.mean(self.status == STATUS_EXPLODED)),
            "censored_fraction": float(np.mean(self.status == STATUS_CENSORED)),
            "absorbed_fraction": float(np.mean(self.status == STATUS_ABSORBED)),
            "mean_jumps": float(np.mean(self.n_jumps())),
            "mean_last_jump_time_exploded": float(
                np.mean(
                    [self[i].last_time for i in np.nonzero(self.status == STATUS_EXPLODED)[0]]
                )
            )
            if np.any(self.status == STATUS_EXPLODED)
            else None,
        }


class _SamplerTables:
    """Flat per-piece arrays for the inner sampling loop."""

    def __init__(self, kernel: RateKernel):
        self.kernel = kernel
        self.space = kernel.space
        if isinstance(kernel, ConstantRateKernel):
            mats = [kernel.matrix]
            self.breaks = np.array([])
        elif isinstance(kernel, PiecewiseRateKernel):
            mats = kernel.matrices
            self.breaks = kernel.breakpoints
        else:
            mats = None
            self.breaks = None
        if mats is not None:
            self.rates = np.stack([-np.diag(m) for m in mats])  # (P, S)
            plus = []
            for m in mats:
                p = m.copy()
                np.fill_diagonal(p, 0.0)
                plus.append(np.cumsum(p, axis=1))
            self.cum_plus = np.stack(plus)  # (P, S, S) cumulative rows
        else:
            self.rates = None
        self.t1 = kernel.window.t1

    def piece_at(self, t: float) -> int:
        return int(np.searchsorted(self.breaks, t, side="right")) if len(self.breaks) else 0

    def draw_holding(self, x: int, u: float, t_max: float, rng: Generator):
        """(jump_time, piece_index) or (None, None) when censored at t_max."""
        if self.rates is not None:
            E = rng.exponential()
            t = u
            p = self.piece_at(u)
            n_pieces = len(self.rates)
            while True:
                seg_end = self.breaks[p] if p < n_pieces - 1 else math.inf
                seg_end = min(seg_end, t_max)
                r = self.rates[p, x]
                if r > 0:
                    dt = E / r
                    if t + dt <= seg_end:
                        return t + dt, p
                    E -= r * (seg_end - t)
                if seg_end >= t_max:
                    return None, None
                t = seg_end
                p += 1
        # closed-form kernel: thinning against the declared majorant
        kern = self.kernel
        if kern.majorant_row is None:
            raise ValueError(
                "closed-form kernels need majorant_row for thinning simulation"
            )
        M = float(kern.majorant_row[x])
        if M <= 0:
            return None, None
        t = u
        while True:
            t += rng.exponential(1.0 / M)
            if t >= t_max:
                return None, None
            q = kern.total_rate(x, t)
            if q > M * (1 + 1e-12):
                raise ValueError(
                    f"majorant violated at state {x}, t={t}: q={q} > M={M}"
                )
            if rng.uniform() * M < q:
                return t, None

    def draw_destination(self, x: int, t: float, piece: int | None, rng: Generator) -> int:
        if self.rates is not None:
            row = self.cum_plus[piece, x]
            total = row[-1]
            return int(np.searchsorted(row, rng.uniform() * total, side="right"))
        Q = self.kernel.rate_matrix(t)
        row = Q[x].copy()
        row[x] = 0.0
        c = np.cumsum(row)
        return int(np.searchsorted(c, rng.uniform() * c[-1], side="right"))


def sample_holding_time(
    kernel: RateKernel, x: int, u: float, rng: Generator, t_max: float | None = None
) -> tuple[float, bool]:
    """One holding-time draw from state x entered at time u.

    Returns (tau, censored); tau is the holding duration, or the distance
    to ``t_max`` (window end by default) when the exponential draw exceeds
    the remaining cumulative hazard.
    """
    kernel._check_state(x)
    kernel.window.check(u)
    if t_max is None:
        t_max = kernel.window.t1
    tables = _SamplerTables(kernel)
    t_jump, _ = tables.draw_holding(x, u, t_max, rng)
    if t_jump is None:
        return (t_max - u if math.isfinite(t_max) else math.inf), True
    return t_jump - u, False


def _draw_initial(gamma: np.ndarray, rng: Generator) -> int:
    c = np.cumsum(gamma)
    return int(np.searchsorted(c, rng.uniform() * c[-1], side="right"))


def check_distribution(gamma, space) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (space.n_states,):
        raise ValueError(f"initial distribution needs shape ({space.n_states},)")
    if np.any(gamma < 0) or abs(gamma.sum() - 1.0) > 1e-9:
        raise ValueError("initial distribution must be a probability vector")
    for s in space.sink_indices:
        if gamma[s] != 0.0:
            raise ValueError("initial mass on a sink state")
    return gamma


def _run_path(tables: _SamplerTables, x0: int, t0: float, config: SimConfig, rng: Generator):
    times, states = [], []
    x = x0
    t = t0
    horizon = t0 + config.horizon
    t_max = min(horizon, tables.t1)
    status = STATUS_CENSORED
    sinks = tables.space.sink_indices
    while True:
        if x in sinks:
            status = STATUS_ABSORBED
            break
        t_jump, piece = tables.draw_holding(x, t, t_max, rng)
        if t_jump is None:
            status = STATUS_CENSORED
            break
        if t_jump <= t:  # holding shorter than one ulp of t (rate >> 1/eps)
            t_jump = math.nextafter(t, math.inf)
        y = tables.draw_destination(x, t_jump, piece, rng)
        times.append(t_jump)
        states.append(y)
        x, t = y, t_jump
        if len(times) >= config.max_jumps:
            status = STATUS_EXPLODED
            break
    return times, states, status


def sample_path(
    kernel: RateKernel, gamma, config: SimConfig, replication: int = 0
) -> PathRecord:
    """One path; ``replication`` selects the counter-split stream."""
    gamma = check_distribution(gamma, kernel.space)
    rng = path_rng(config.seed, replication)
    tables = _SamplerTables(kernel)
    x0 = _draw_initial(gamma, rng)
    times, states, status = _run_path(tables, x0, kernel.window.t0, config, rng)
    rec = PathRecord(
        initial_state=x0,
        t0=kernel.window.t0,
        jump_times=np.array(times),
        jump_states=np.array(states, dtype=np.int32),
        status=status,
        horizon=config.horizon,
    )
    rec.validate(kernel.space)
    return rec


def sample_paths(kernel: RateKernel, gamma, config: SimConfig) -> PathBatch:
    """``config.replications`` paths with independent per-path streams."""
    gamma = check_distribution(gamma, kernel.space)
    tables = _SamplerTables(kernel)
    n = config.replications
    initial = np.empty(n, dtype=np.int32)
    status = np.empty(n, dtype=np.int8)
    offsets = np.zeros(n + 1, dtype=np.int64)
    all_times, all_states = [], []
    t0 = kernel.window.t0
    for i in range(n):
        rng = path_rng(config.seed, i)
        x0 = _draw_initial(gamma, rng)
        times, states, st = _run_path(tables, x0, t0, config, rng)
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
        t0=t0,
        horizon=config.horizon,
        seed=config.seed,
    )


if HAVE_NUMBA:

    @njit(cache=True)
    def _states_at_jit(initial, status, offsets, jt, js, t, out):  # pragma: no cover
        for i in range(len(initial)):
            a, b = offsets[i], offsets[i + 1]
            k = np.searchsorted(jt[a:b], t, side="right")
            if status[i] == 2 and b > a and t >= jt[b - 1]:
                out[i] = -1
            elif k == 0:
                out[i] = initial[i]
            else:
                out[i] = js[a + k - 1]

    @njit(cache=True)
    def _jumps_before_jit(offsets, jt, t, out):  # pragma: no cover
        for i in range(len(out)):
            a, b = offsets[i], offsets[i + 1]
            out[i] = np.searchsorted(jt[a:b], t, side="right")


def states_at(batch: PathBatch, t: float) -> np.ndarray:
    """State index of each path at time t; -1 marks exploded-by-t paths."""
    out = np.empty(len(batch), dtype=np.int32)
    if HAVE_NUMBA:
        _states_at_jit(
            batch.initial, batch.status, batch.offsets,
            batch.jump_times, batch.jump_states, t, out,
        )
        return out
    for i in range(len(batch)):
        s = batch[i].state_at(t)
        out[i] = -1 if s is None else s
    return out


def jumps_before(batch: PathBatch, t: float) -> np.ndarray:
    """Number of jumps each path has made up to and including time t."""
    out = np.empty(len(batch), dtype=np.int64)
    if HAVE_NUMBA:
        _jumps_before_jit(batch.offsets, batch.jump_times, t, out)
        return out
    for i in range(len(batch)):
        a, b = batch.offsets[i], batch.offsets[i + 1]
        out[i] = np.searchsorted(batch.jump_times[a:b], t, side="right")
    return out


@dataclass
class EmpiricalTransition:
    """Frequency estimate of the transition rows at one time point."""

    matrix: np.ndarray          # (S, S), NaN rows where no path started
    se: np.ndarray              # binomial standard errors, same shape
    defect: np.ndarray          # per start state: exploded-by-t fraction
    defect_se: np.ndarray
    n_by_start: np.ndarray
    t: float


def empirical_transition(batch: PathBatch, space, t: float) -> EmpiricalTransition:
    """Occupancy frequencies at time t by start state.

    Paths already exploded at t contribute to the defect row rather than to
    any state, matching the sub-stochastic transition function.
    """
    S = space.n_states
    at = states_at(batch, t)
    counts = np.zeros((S, S))
    defect_counts = np.zeros(S)
    n_by_start = np.zeros(S)
    for x in range(S):
        sel = batch.initial == x
        n_by_start[x] = sel.sum()
        if not n_by_start[x]:
            continue
        vals = at[sel]
        defect_counts[x] = np.sum(vals < 0)
        got = np.bincount(vals[vals >= 0], minlength=S)
        counts[x] = got
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n_by_start[:, None]
        se = np.sqrt(p * (1 - p) / n_by_start[:, None])
        dp = defect_counts / n_by_start
        dse = np.sqrt(dp * (1 - dp) / n_by_start)
    return EmpiricalTransition(
        matrix=p, se=se, defect=dp, defect_se=dse, n_by_start=n_by_start, t=t
    )
