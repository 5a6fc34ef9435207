"""Rate kernels q(x,t,·) on finite or truncated-countable state spaces.

A kernel assigns to every state x and time t a total exit rate q(x,t) and a
destination measure q(x,t,B) over the other states.  Kernels here are always
conservative (row sums zero): a deficient kernel can be repaired with
:func:`make_conservative`, which routes the missing mass to an absorbing
sink state.

Countable models are represented by truncation: the states outside the kept
window are collapsed into a single absorbing *overflow* state.  The overflow
state may carry the supremum of the exit rates of the states it replaced
(``overflow_rate_sup``); this is what lets boundedness checks answer
questions about the untruncated family.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from . import defaults


class ModelValidationError(ValueError):
    """A kernel or model file violates a structural invariant."""


@dataclass(frozen=True)
class StateSpace:
    """Ordered, distinct state labels plus optional sink bookkeeping.

    ``cemetery_index`` marks the isolated absorbing point appended when a
    deficient kernel is made conservative.  ``overflow_index`` marks the
    absorbing state standing in for all truncated-away states;
    ``overflow_rate_sup`` is the declared supremum of exit rates over those
    removed states (``inf`` for families with unbounded rates, ``None`` when
    there is no overflow metadata).
    """

    labels: tuple[str, ...]
    cemetery_index: int | None = None
    overflow_index: int | None = None
    overflow_rate_sup: float | None = None

    def __post_init__(self):
        if not self.labels:
            raise ModelValidationError("state space needs at least one state")
        if len(set(self.labels)) != len(self.labels):
            raise ModelValidationError("state labels must be distinct")
        for idx in (self.cemetery_index, self.overflow_index):
            if idx is not None and not (0 <= idx < len(self.labels)):
                raise ModelValidationError(f"sink index {idx} out of range")
        if self.overflow_index is None and self.overflow_rate_sup is not None:
            raise ModelValidationError("overflow_rate_sup without an overflow state")

    @property
    def n_states(self) -> int:
        return len(self.labels)

    @property
    def sink_indices(self) -> tuple[int, ...]:
        return tuple(
            i for i in (self.cemetery_index, self.overflow_index) if i is not None
        )

    @property
    def real_indices(self) -> np.ndarray:
        """Indices of non-sink states (mass here counts as 'alive')."""
        sinks = set(self.sink_indices)
        return np.array([i for i in range(self.n_states) if i not in sinks])

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown state label {label!r}") from None


@dataclass(frozen=True)
class TimeWindow:
    """Half-open time interval [t0, t1), t1 may be +inf."""

    t0: float
    t1: float

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ModelValidationError(f"empty time window [{self.t0}, {self.t1})")

    def check(self, t: float, closed_right: bool = False):
        hi_ok = t <= self.t1 if closed_right else t < self.t1
        if not (self.t0 <= t and hi_ok):
            raise ValueError(f"time {t} outside window [{self.t0}, {self.t1})")


def _validate_rate_matrix(
    mat: np.ndarray, space: StateSpace, where: str, allow_deficient: bool = False
) -> np.ndarray:
    """Check off-diagonal sign, finiteness, row sums; repair tiny drift.

    With ``allow_deficient`` row sums may be negative (mass leaking out of
    the space); that is the input contract of :func:`make_conservative`.
    """
    mat = np.array(mat, dtype=float)
    n = space.n_states
    if mat.shape != (n, n):
        raise ModelValidationError(f"{where}: matrix shape {mat.shape} != ({n},{n})")
    off = mat.copy()
    np.fill_diagonal(off, 0.0)
    if not np.all(np.isfinite(off)):
        raise ModelValidationError(f"{where}: non-finite off-diagonal rate")
    if np.any(off < 0):
        bad = np.argwhere(off < 0)[0]
        raise ModelValidationError(f"{where}: negative rate at {tuple(bad)}")
    rowsum = mat.sum(axis=1)
    if np.any(rowsum > defaults.ROW_SUM_REPAIR):
        x = int(np.argmax(rowsum))
        raise ModelValidationError(
            f"{where}: positive row sum {rowsum[x]:.3e} at state "
            f"{space.labels[x]!r}"
        )
    worst = float(np.max(np.abs(rowsum)))
    if not allow_deficient:
        if worst > defaults.ROW_SUM_REPAIR:
            raise ModelValidationError(
                f"{where}: row sum defect {worst:.3e} exceeds repair threshold "
                f"{defaults.ROW_SUM_REPAIR:.0e}; route the deficiency explicitly "
                "with make_conservative"
            )
        if worst > defaults.ROW_SUM_PASS:
            warnings.warn(
                f"{where}: adjusting diagonal by up to {worst:.3e} to restore "
                "conservativity",
                stacklevel=3,
            )
            np.fill_diagonal(mat, 0.0)
            np.fill_diagonal(mat, -mat.sum(axis=1))
    for s in space.sink_indices:
        if np.any(mat[s] != 0.0):
            raise ModelValidationError(
                f"{where}: sink state {space.labels[s]!r} must have a zero row"
            )
    return mat


class RateKernel:
    """Base class; concrete kernels implement the representation hooks."""

    space: StateSpace
    window: TimeWindow

    # -- representation hooks -------------------------------------------------

    def rate_matrix(self, t: float) -> np.ndarray:
        """Rate matrix in force at time t (rows sum to zero)."""
        raise NotImplementedError

    def hazard(self, x: int, a: float, b: float) -> float:
        """The integral of q(x,s) over [a, b]."""
        raise NotImplementedError

    def qbar(self) -> tuple[np.ndarray, str]:
        """Per-state sup of q(x,·) over the window, plus the method used."""
        raise NotImplementedError

    # -- shared operations -----------------------------------------------------

    def _check_state(self, x: int):
        if not (0 <= x < self.space.n_states):
            raise IndexError(f"state index {x} out of range")

    def total_rate(self, x: int, t: float) -> float:
        """Exit rate q(x,t); zero for sink states."""
        self._check_state(x)
        self.window.check(t)
        if x in self.space.sink_indices:
            return 0.0
        return float(-self.rate_matrix(t)[x, x])

    def jump_measure(self, x: int, t: float, B) -> float:
        """Rate mass from x into B minus {x} at time t."""
        self._check_state(x)
        self.window.check(t)
        row = self.rate_matrix(t)[x]
        total = 0.0
        for y in B:
            self._check_state(y)
            if y != x:
                total += row[y]
        return float(total)


class ConstantRateKernel(RateKernel):
    """Time-homogeneous kernel given by a single rate matrix."""

    def __init__(
        self,
        space: StateSpace,
        matrix,
        window: TimeWindow | None = None,
        allow_deficient: bool = False,
    ):
        self.space = space
        self.window = window or TimeWindow(0.0, math.inf)
        self.matrix = _validate_rate_matrix(
            matrix, space, "constant kernel", allow_deficient
        )
        self.matrix.setflags(write=False)

    def rate_matrix(self, t: float) -> np.ndarray:
        return self.matrix

    def hazard(self, x, a, b):
        return float(-self.matrix[x, x]) * (b - a)

    def qbar(self):
        return -np.diag(self.matrix).copy(), "exact"

    def pieces(self, a: float, b: float):
        """(start, end, matrix) segments covering [a, b]."""
        yield a, b, self.matrix


class PiecewiseRateKernel(RateKernel):
    """Right-continuous piecewise-constant kernel.

    ``breakpoints`` are the interior switch times; matrix k applies on
    [b_{k-1}, b_k) with b_0 = t0 and b_K = t1 (half-open convention, so an
    evaluation exactly at a breakpoint uses the matrix to its right).
    """

    def __init__(self, space, breakpoints, matrices, window=None, allow_deficient=False):
        self.space = space
        self.window = window or TimeWindow(0.0, math.inf)
        self.breakpoints = np.array(sorted(breakpoints), dtype=float)
        if self.breakpoints.size and not (
            self.window.t0 < self.breakpoints[0]
            and self.breakpoints[-1] < self.window.t1
        ):
            raise ModelValidationError("breakpoints must lie strictly inside the window")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ModelValidationError("breakpoints must be strictly increasing")
        if len(matrices) != len(self.breakpoints) + 1:
            raise ModelValidationError(
                f"{len(self.breakpoints)} breakpoints need "
                f"{len(self.breakpoints) + 1} matrices, got {len(matrices)}"
            )
        self.matrices = [
            _validate_rate_matrix(m, space, f"piece {k}", allow_deficient)
            for k, m in enumerate(matrices)
        ]
        for m in self.matrices:
            m.setflags(write=False)

    def piece_index(self, t: float) -> int:
        return int(np.searchsorted(self.breakpoints, t, side="right"))

    def rate_matrix(self, t: float) -> np.ndarray:
        return self.matrices[self.piece_index(t)]

    def pieces(self, a: float, b: float):
        edges = [a] + [float(s) for s in self.breakpoints if a < s < b] + [b]
        for lo, hi in zip(edges[:-1], edges[1:]):
            yield lo, hi, self.rate_matrix(lo)

    def hazard(self, x, a, b):
        return sum((hi - lo) * -m[x, x] for lo, hi, m in self.pieces(a, b))

    def qbar(self):
        rates = np.stack([-np.diag(m) for m in self.matrices])
        return rates.max(axis=0), "exact"


class FunctionRateKernel(RateKernel):
    """Kernel given by a closed-form matrix function of time.

    ``majorant_row`` (per-state upper bound on q(x,·)) enables thinning-based
    simulation; ``qbar_analytic`` overrides the grid supremum when the true
    sup is known (e.g. infinite for rates blowing up at the window edge).
    """

    def __init__(
        self,
        space,
        matrix_fn,
        window,
        majorant_row=None,
        qbar_analytic=None,
        allow_deficient=False,
    ):
        self.space = space
        self.window = window
        self.matrix_fn = matrix_fn
        self.majorant_row = None if majorant_row is None else np.asarray(majorant_row, float)
        self.qbar_analytic = None if qbar_analytic is None else np.asarray(qbar_analytic, float)
        t_probe = window.t0 + min(1.0, (window.t1 - window.t0)) / 2.0
        _validate_rate_matrix(
            matrix_fn(t_probe), space, "generator kernel (probe)", allow_deficient
        )

    def rate_matrix(self, t: float) -> np.ndarray:
        return np.asarray(self.matrix_fn(t), dtype=float)

    def _sup_grid(self, a: float, b: float) -> np.ndarray:
        ts = np.linspace(a, b, defaults.QBAR_GRID_POINTS)
        sup = np.zeros(self.space.n_states)
        for t in ts:
            np.maximum(sup, -np.diag(self.rate_matrix(t)), out=sup)
        return sup

    def hazard(self, x, a, b):
        val, _ = quad(lambda s: self.total_rate(x, s), a, b, limit=200)
        return float(val)

    def qbar(self):
        if self.qbar_analytic is not None:
            return self.qbar_analytic.copy(), "analytic"
        hi = self.window.t1
        if math.isinf(hi):
            hi = self.window.t0 + 100.0
        # open right endpoint: stop one grid step short of t1
        step = (hi - self.window.t0) / defaults.QBAR_GRID_POINTS
        sup = self._sup_grid(self.window.t0, hi - step)
        return sup, f"grid-supremum(n={defaults.QBAR_GRID_POINTS})"


def make_conservative(kernel: RateKernel) -> RateKernel:
    """Route per-row rate deficiencies into a fresh absorbing sink state.

    Rows may sum to anything in [-inf, 0]; the deficiency -(row sum) becomes
    the rate into the new state, which is absorbing and recorded as the
    space's cemetery.  Positive row sums are rejected.  Applied to an
    already-conservative kernel this just appends an unreachable sink.
    """
    space = kernel.space
    sink = "x_inf"
    while sink in space.labels:
        sink += "'"
    new_space = StateSpace(
        labels=space.labels + (sink,),
        cemetery_index=space.n_states,
        overflow_index=space.overflow_index,
        overflow_rate_sup=space.overflow_rate_sup,
    )

    def extend(mat: np.ndarray) -> np.ndarray:
        mat = np.asarray(mat, dtype=float)
        rowsum = mat.sum(axis=1)
        if np.any(rowsum > defaults.ROW_SUM_REPAIR):
            x = int(np.argmax(rowsum))
            raise ModelValidationError(
                f"row sum {rowsum[x]:.3e} at state {space.labels[x]!r} is positive"
            )
        # the new column absorbs exactly the deficiency, so rows sum to zero
        deficiency = np.clip(-rowsum, 0.0, None)
        out = np.zeros((space.n_states + 1, space.n_states + 1))
        out[: space.n_states, : space.n_states] = mat
        out[: space.n_states, -1] = deficiency
        return out

    if isinstance(kernel, ConstantRateKernel):
        return ConstantRateKernel(new_space, extend(kernel.matrix), kernel.window)
    if isinstance(kernel, PiecewiseRateKernel):
        return PiecewiseRateKernel(
            new_space, kernel.breakpoints, [extend(m) for m in kernel.matrices], kernel.window
        )
    if isinstance(kernel, FunctionRateKernel):
        fn = kernel.matrix_fn
        qa = kernel.qbar_analytic
        return FunctionRateKernel(
            new_space,
            lambda t: extend(fn(t)),
            kernel.window,
            majorant_row=None
            if kernel.majorant_row is None
            else np.append(kernel.majorant_row, 0.0),
            qbar_analytic=None if qa is None else np.append(qa, 0.0),
        )
    raise TypeError(f"unsupported kernel type {type(kernel).__name__}")


@dataclass
class AssumptionReport:
    """Which regularity assumptions the kernel satisfies, with witnesses.

    * A1_feller        -- nested sets B_n covering the space with sup of
                          qbar below n on each B_n,
    * A2_bounded       -- qbar(x) finite for every state,
    * A3_local_bounded -- q(x,·) bounded on [t0, s) for every s < t1,
    * A4_L1            -- q(x,·) integrable on [t0, s) for every s < t1.

    A1 and A2 are equivalent; A2 implies A3 implies A4.  The report is
    computed so that the chain holds by construction.
    """

    holds: dict[str, bool]
    qbar: np.ndarray
    qbar_method: str
    witnesses: dict[str, object] = field(default_factory=dict)

    def __str__(self):
        flags = ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in self.holds.items())
        return f"AssumptionReport({flags}; qbar by {self.qbar_method})"


def _level_sets(qbar: np.ndarray) -> dict[int, list[int]]:
    """Canonical A1 witness: B_n = {x : qbar(x) < n} for a few useful n."""
    finite = qbar[np.isfinite(qbar)]
    if finite.size == 0:
        return {}
    top = int(math.floor(finite.max())) + 1
    ns = sorted({1, 2, max(1, top // 2), top})
    return {
        n: [int(i) for i in np.nonzero(qbar < n)[0]]
        for n in ns
    }


def check_assumptions(kernel: RateKernel) -> AssumptionReport:
    """Evaluate the regularity assumptions; failures are reported, not raised."""
    qbar, method = kernel.qbar()
    witnesses: dict[str, object] = {}

    a2 = bool(np.all(np.isfinite(qbar)))
    if not a2:
        bad = int(np.argmax(~np.isfinite(qbar)))
        witnesses["A2_bounded"] = {"state": kernel.space.labels[bad]}
    a1 = a2  # equivalent on a representable space: level sets exhaust it iff
    # every per-state sup is finite
    witnesses["A1_feller"] = {"level_sets": _level_sets(qbar)}

    # A3/A4 hold outright under A2; otherwise probe s strictly inside the
    # window (the quantifier never reaches t1 itself).
    if a2:
        a3 = a4 = True
    else:
        t0, t1 = kernel.window.t0, kernel.window.t1
        hi = t0 + 100.0 if math.isinf(t1) else t1
        s_probes = t0 + (hi - t0) * np.array([0.25, 0.5, 0.9, 0.99])
        a3 = True
        a4 = True
        for x in range(kernel.space.n_states):
            if np.isfinite(qbar[x]):
                continue
            for s in s_probes:
                ts = np.linspace(t0, s, 512)
                with np.errstate(divide="ignore", over="ignore"):
                    try:
                        vals = np.array([kernel.total_rate(x, t) for t in ts])
                    except (ZeroDivisionError, OverflowError):
                        vals = np.array([math.inf])
                if not np.all(np.isfinite(vals)) or vals.max() > 1e300:
                    a3 = False
                    witnesses.setdefault(
                        "A3_local_bounded",
                        {"state": kernel.space.labels[x], "s": float(s)},
                    )
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("error")
                        h = kernel.hazard(x, t0, s)
                except Exception:
                    h = math.inf
                if not math.isfinite(h):
                    a4 = False
                    witnesses.setdefault(
                        "A4_L1", {"state": kernel.space.labels[x], "s": float(s)}
                    )
        a3 = a3 and a4  # unbounded non-integrable probes can arrive in either order
        if a3:
            a4 = True  # enforce A3 => A4

    return AssumptionReport(
        holds={
            "A1_feller": a1,
            "A2_bounded": a2,
            "A3_local_bounded": a2 or a3,
            "A4_L1": a2 or a3 or a4,
        },
        qbar=qbar,
        qbar_method=method,
        witnesses=witnesses,
    )


@dataclass(frozen=True)
class QsBound:
    """Result of a (q,s)-boundedness query: sup of q over B x [t0, s)."""

    bounded: bool
    sup: float
    witness: str | None = None


def is_qs_bounded(kernel: RateKernel, B, s: float) -> QsBound:
    """Is the exit rate uniformly bounded on the set B up to time s?

    If B contains the overflow state of a truncated family, the declared
    supremum over the removed states is what counts: the query is answered
    for the family the truncation stands in for, so an unbounded family
    yields ``bounded=False`` even though every kept state has finite rate.
    """
    kernel.window.check(s, closed_right=True)
    space = kernel.space
    sup = 0.0
    witness = None
    for x in B:
        kernel._check_state(x)
        if x == space.overflow_index and space.overflow_rate_sup is not None:
            r = float(space.overflow_rate_sup)
            label = space.labels[x] + " (truncated remainder)"
        elif isinstance(kernel, (ConstantRateKernel, PiecewiseRateKernel)):
            if isinstance(kernel, ConstantRateKernel):
                r = float(-kernel.matrix[x, x])
            else:
                r = max(
                    (-m[x, x] for lo, hi, m in kernel.pieces(kernel.window.t0, s)),
                    default=0.0,
                )
            label = space.labels[x]
        else:
            qbar, _ = kernel.qbar()
            if np.isfinite(qbar[x]):
                ts = np.linspace(kernel.window.t0, s, 2048, endpoint=False)
                r = max(kernel.total_rate(x, t) for t in ts)
            else:
                r = math.inf
            label = space.labels[x]
        if r > sup:
            sup, witness = r, label
    if math.isinf(sup):
        return QsBound(False, math.inf, witness)
    return QsBound(True, sup, witness)
