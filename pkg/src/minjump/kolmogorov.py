"""Residual checks certifying a transition table against the Kolmogorov
equations.

Four families are implemented:

* ``backward_diff``     -- d/du P(u,x;t,B) = q(x,u) P(u,x;t,B)
                           - sum_{y != x} q(x,u,{y}) P(u,y;t,B),
* ``forward_diff``      -- d/dt P(u,x;t,B) = - sum_{y in B} q(y,t) P(u,x;t,{y})
                           + sum_y q(y,t,B\\{y}) P(u,x;t,{y}),
* ``backward_integral`` -- P = indicator * survival + one application of the
                           survival-weighted jump integral to P itself (the
                           fixed-point form of the term expansion),
* ``forward_integral``  -- P(u,x;t,B) = I{x in B} - int_u^t (outflow from B)
                           + int_u^t (inflow into B).

The right side of the forward equation subtracts two unbounded sums when
the exit rate is unbounded on B, so both forward checks refuse sets that
fail the (q,s)-bounded guard instead of silently producing garbage; the
refusal names the witness state.  Differential residuals use centered
differences at interior nodes, which is the grid surrogate for equations
that hold at almost every time point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import defaults
from .qkernel import RateKernel, PiecewiseRateKernel, is_qs_bounded
from .transition import TimeGrid, TransitionTable, _GridData, survival


class ForwardEquationUndefinedError(ValueError):
    """The forward equation's right side is undefined on this state set."""

    def __init__(self, witness: str, sup: float):
        self.witness = witness
        self.sup = sup
        super().__init__(
            f"forward equation undefined on B: exit rate unbounded "
            f"(witness state {witness!r}, sup={sup})"
        )


@dataclass
class ResidualReport:
    """Per-point residuals for one equation family."""

    equation: str
    points: list[dict]
    residuals: np.ndarray
    guard: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=float)
        if self.residuals.size and not np.all(np.isfinite(self.residuals)):
            raise ValueError("residuals must be finite")

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0

    @property
    def mean_residual(self) -> float:
        return float(self.residuals.mean()) if self.residuals.size else 0.0

    def as_dict(self) -> dict:
        return {
            "equation": self.equation,
            "max_residual": self.max_residual,
            "mean_residual": self.mean_residual,
            "n_points": int(self.residuals.size),
            "guard": self.guard,
            "params": self.params,
        }


def _interior_mask(kernel: RateKernel, nodes: np.ndarray) -> np.ndarray:
    """Interior nodes, excluding neighbours of rate breakpoints (kinks)."""
    mask = np.zeros(len(nodes), dtype=bool)
    mask[1:-1] = True
    if isinstance(kernel, PiecewiseRateKernel):
        for b in kernel.breakpoints:
            near = np.abs(nodes - b) <= 1.001 * np.max(np.diff(nodes))
            mask &= ~near
    return mask


def backward_residual(
    kernel: RateKernel,
    family: np.ndarray,
    u_grid: TimeGrid,
    pairs: list[tuple[int, list[int]]],
) -> ResidualReport:
    """Backward-equation residuals in the start time u.

    ``family[k, x, y]`` must hold P(u_k, x; t, {y}) for the fixed end time
    t = u_grid.t_end (as produced by
    :func:`minjump.transition.backward_start_family`).
    """
    nodes = u_grid.nodes
    if len(nodes) < 3:
        raise ValueError("backward residual needs at least 3 u-nodes")
    mask = _interior_mask(kernel, nodes)
    S = kernel.space.n_states
    points, residuals = [], []
    for x, B in pairs:
        B = list(B)
        PB = family[:, :, B].sum(axis=2)  # (K, S): P(u_k, y; t, B)
        for k in np.nonzero(mask)[0]:
            du = nodes[k + 1] - nodes[k - 1]
            lhs = (PB[k + 1, x] - PB[k - 1, x]) / du
            row = kernel.rate_matrix(nodes[k])[x]
            qx = -row[x]
            inflow = float(np.dot(row, PB[k])) - row[x] * PB[k, x]
            rhs = qx * PB[k, x] - inflow
            points.append({"u": float(nodes[k]), "x": x, "B": B})
            residuals.append(abs(lhs - rhs))
    return ResidualReport(
        equation="backward_diff",
        points=points,
        residuals=np.array(residuals),
        params={"t": u_grid.t_end, "h": u_grid.h, "n_states": S},
    )


def forward_residual(
    kernel: RateKernel,
    table: TransitionTable,
    B: list[int],
    s: float,
) -> ResidualReport:
    """Forward-equation residuals in t on [u, s), guarded by (q,s)-bounded B."""
    guard = is_qs_bounded(kernel, B, s)
    if not guard.bounded:
        raise ForwardEquationUndefinedError(guard.witness, guard.sup)
    B = list(B)
    nodes = table.grid.nodes
    mask = _interior_mask(kernel, nodes) & (nodes < s)
    P = table.values[0]  # (T, S)
    PB = P[:, B].sum(axis=1)
    points, residuals = [], []
    for k in np.nonzero(mask)[0]:
        dt = nodes[k + 1] - nodes[k - 1]
        lhs = (PB[k + 1] - PB[k - 1]) / dt
        Q = kernel.rate_matrix(nodes[k])
        qdiag = -np.diag(Q)
        outflow = float(np.dot(qdiag[B], P[k, B]))
        QB = Q[:, B].sum(axis=1) - np.where(np.isin(np.arange(len(qdiag)), B), np.diag(Q), 0.0)
        # QB[y] = q(y, t, B \ {y}): column sum over B, minus the diagonal
        # contribution when y itself lies in B
        inflow = float(np.dot(QB, P[k]))
        residuals.append(abs(lhs - (inflow - outflow)))
        points.append({"t": float(nodes[k]), "B": B})
    return ResidualReport(
        equation="forward_diff",
        points=points,
        residuals=np.array(residuals),
        guard=[{"B": B, "bounded": True, "sup": guard.sup}],
        params={"u": table.grid.u, "s": s, "h": table.grid.h},
    )


def backward_integral_check(
    kernel: RateKernel,
    table: TransitionTable,
    t: float,
    B: list[int],
) -> float:
    """Residual of the fixed-point integral identity at (u, x, t, B).

    P(u,x;t,B) must equal I{x in B} exp(-int_u^t q(x)) plus the jump
    integral of P itself; the identity holds for every measurable B (no
    boundedness guard), but needs locally bounded rates to be meaningful,
    which holds on these finite spaces.
    """
    (x,) = table.start_states
    B = list(B)
    k_t = table.grid.index_of(t)
    data = _GridData(kernel, table.grid)
    applied = data.jump_integral(table.values[0])
    ind = 1.0 if x in B else 0.0
    rhs = ind * survival(kernel, table.grid.u, x, t) + applied[k_t, B].sum()
    lhs = table.values[0, k_t, B].sum()
    return abs(float(lhs - rhs))


def forward_integral_check(
    kernel: RateKernel,
    table: TransitionTable,
    t: float,
    B: list[int],
    s: float | None = None,
) -> float:
    """Residual of the time-integrated forward identity on [u, t].

    Guarded like the differential forward equation: B must be (q,s)-bounded
    for s covering t.
    """
    s = t if s is None else s
    guard = is_qs_bounded(kernel, B, s)
    if not guard.bounded:
        raise ForwardEquationUndefinedError(guard.witness, guard.sup)
    (x,) = table.start_states
    B = list(B)
    k_t = table.grid.index_of(t)
    nodes = table.grid.nodes[: k_t + 1]
    P = table.values[0, : k_t + 1]
    S = kernel.space.n_states
    out_ig = np.empty(len(nodes))
    in_ig = np.empty(len(nodes))
    for k, w in enumerate(nodes):
        Q = kernel.rate_matrix(w)
        qdiag = -np.diag(Q)
        out_ig[k] = float(np.dot(qdiag[B], P[k, B]))
        QB = Q[:, B].sum(axis=1) - np.where(
            np.isin(np.arange(S), B), np.diag(Q), 0.0
        )
        in_ig[k] = float(np.dot(QB, P[k]))
    ind = 1.0 if x in B else 0.0
    rhs = ind - np.trapezoid(out_ig, nodes) + np.trapezoid(in_ig, nodes)
    lhs = P[k_t, B].sum()
    return abs(float(lhs - rhs))


def equation_suite(
    kernel: RateKernel,
    table: TransitionTable,
    family: np.ndarray,
    u_grid: TimeGrid,
    backward_pairs,
    forward_sets,
    s: float,
    integral_sets,
    t: float,
) -> list[ResidualReport]:
    """Run all four residual families; guard refusals become report entries."""
    reports = [backward_residual(kernel, family, u_grid, backward_pairs)]
    fwd_points, fwd_res, guards = [], [], []
    for B in forward_sets:
        try:
            rep = forward_residual(kernel, table, B, s)
            fwd_points += rep.points
            fwd_res += list(rep.residuals)
            guards += rep.guard
        except ForwardEquationUndefinedError as e:
            guards.append({"B": list(B), "bounded": False, "witness": e.witness})
    reports.append(
        ResidualReport(
            equation="forward_diff",
            points=fwd_points,
            residuals=np.array(fwd_res),
            guard=guards,
            params={"s": s},
        )
    )
    bi = [backward_integral_check(kernel, table, t, B) for B in integral_sets]
    reports.append(
        ResidualReport(
            equation="backward_integral",
            points=[{"t": t, "B": list(B)} for B in integral_sets],
            residuals=np.array(bi),
        )
    )
    fi_points, fi_res, fi_guards = [], [], []
    for B in integral_sets:
        try:
            fi_res.append(forward_integral_check(kernel, table, t, B, s))
            fi_points.append({"t": t, "B": list(B)})
            fi_guards.append({"B": list(B), "bounded": True})
        except ForwardEquationUndefinedError as e:
            fi_guards.append({"B": list(B), "bounded": False, "witness": e.witness})
    reports.append(
        ResidualReport(
            equation="forward_integral",
            points=fi_points,
            residuals=np.array(fi_res),
            guard=fi_guards,
        )
    )
    return reports
