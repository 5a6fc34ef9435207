"""Benchmark models used by the test suite, the acceptance runs, and the
experiment scripts."""

from __future__ import annotations

import math

import numpy as np

from .ctjmdp import MdpModel
from .qkernel import ConstantRateKernel, StateSpace
from .modelio import oscillator_kernel, pure_birth_kernel, two_state_kernel

__all__ = [
    "two_state_kernel",
    "oscillator_kernel",
    "pure_birth_kernel",
    "zero_kernel",
    "random_kernel",
    "bench3_model",
    "controlled_birth_model",
]


def zero_kernel(n: int = 1) -> ConstantRateKernel:
    """Everything absorbing: the process never moves."""
    space = StateSpace(labels=tuple(f"s{i}" for i in range(n)))
    return ConstantRateKernel(space, np.zeros((n, n)))


def random_kernel(n: int, seed: int, rate_scale: float = 1.0) -> ConstantRateKernel:
    """Dense conservative kernel with uniform off-diagonal rates."""
    rng = np.random.default_rng(seed)
    Q = rng.uniform(0.0, rate_scale, size=(n, n))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    space = StateSpace(labels=tuple(f"s{i}" for i in range(n)))
    return ConstantRateKernel(space, Q)


def bench3_model() -> MdpModel:
    """Three states, two actions, bounded rates; the equality benchmark.

    Every row has two destinations, so any state can be reached after an
    even or an odd number of jumps: a jump-count rule is then genuinely
    history-dependent (single-destination cycles would lock the parity to
    the state and make its Markov reduction trivial).  Rates stay moderate
    so binned policies track the conditional mixtures closely.
    """
    space = StateSpace(labels=("A", "B", "C"))
    actions = ("a", "b")
    S, A = 3, 2
    rates = np.zeros((S, A, S))
    rates[0, 0] = [-1.0, 0.7, 0.3]
    rates[1, 0] = [0.2, -0.7, 0.5]
    rates[2, 0] = [0.6, 0.2, -0.8]
    rates[0, 1] = [-0.6, 0.2, 0.4]
    rates[1, 1] = [1.0, -1.3, 0.3]
    rates[2, 1] = [0.1, 0.5, -0.6]
    return MdpModel(
        space=space,
        actions=actions,
        available=((0, 1), (0, 1), (0, 1)),
        rates=rates,
        default_action=(0, 0, 0),
    )


def controlled_birth_model(
    b: float = 2.0, N: int = 25, choice_levels: int = 4
) -> MdpModel:
    """Birth chain where one action explodes.

    Action "slow" climbs at unit rate; action "fast" climbs at rate b^n,
    which explodes in finite time once played persistently.  Only the
    first ``choice_levels`` states offer both actions; higher states force
    "fast".  Keeping the decisions at low, well-populated states makes the
    marginal-matching derivation statistically meaningful: the pass-through
    occupancy of a rate-b^n state is ~b^-n, far too thin to estimate a
    mixture from, and a policy mis-estimated there would stall the climb
    and corrupt every marginal below it.  States above the truncation
    level N collapse into the absorbing overflow state, whose recorded
    rate supremum is infinite.
    """
    labels = tuple(str(n) for n in range(1, N + 1)) + ("overflow",)
    space = StateSpace(
        labels=labels, overflow_index=N, overflow_rate_sup=math.inf if b > 1 else b
    )
    actions = ("slow", "fast")
    S, A = N + 1, 2
    rates = np.zeros((S, A, S))
    available = []
    default = []
    for n in range(1, N + 1):
        x = n - 1
        nxt = x + 1
        fast = float(b) ** n
        rates[x, 1, nxt] = fast
        rates[x, 1, x] = -fast
        if n <= choice_levels:
            rates[x, 0, nxt] = 1.0
            rates[x, 0, x] = -1.0
            available.append((0, 1))
            default.append(0)
        else:
            available.append((1,))
            default.append(1)
    available.append((0, 1))
    default.append(0)
    return MdpModel(
        space=space,
        actions=actions,
        available=tuple(available),
        rates=rates,
        default_action=tuple(default),
    )
