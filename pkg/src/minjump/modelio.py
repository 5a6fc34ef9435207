"""Model files (JSON) and the named closed-form generators.

Kernel file layout::

    {"states": ["a", "b"],
     "window": {"t0": 0.0, "t1": null},          # null = +inf
     "kernel": {"type": "constant", "matrix": [[-1.0, 1.0], [2.0, -2.0]]}}

``kernel.type`` is one of ``constant``, ``piecewise`` (adds ``breakpoints``
and ``matrices``) or ``generator`` (adds ``name`` and ``params``).  Optional
top-level keys ``cemetery_state`` / ``overflow_state`` name sink states and
``overflow_rate_sup`` declares the rate supremum over truncated-away states
("inf" allowed).

Named generators build benchmark families with bit-exact rates:

* ``two-state``:     parameters ``lam``, ``mu``; states {0,1}.
* ``fms-oscillator``: parameter ``J``; states {0, +-1, ..., +-J} plus
  overflow.  Exit rate 1 at 0 with destination weights 2^-(|j|+1); states
  j != 0 swap with -j at rate 2^|j|.  Mass that would leave the truncation
  goes to the overflow state.
* ``pure-birth``:    parameters ``b``, ``N``; states {1..N} plus overflow,
  n -> n+1 at rate b^n.  Explosive for b > 1.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .qkernel import (
    ConstantRateKernel,
    ModelValidationError,
    PiecewiseRateKernel,
    RateKernel,
    StateSpace,
    TimeWindow,
)


class ModelParseError(ModelValidationError):
    """Malformed model file; the message names the offending field."""


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ModelParseError(f"{where}: missing field {key!r}")
    return obj[key]


def _window_from(obj: dict | None) -> TimeWindow:
    if obj is None:
        return TimeWindow(0.0, math.inf)
    t0 = float(obj.get("t0", 0.0))
    t1 = obj.get("t1", None)
    return TimeWindow(t0, math.inf if t1 is None else float(t1))


def two_state_kernel(lam: float, mu: float) -> ConstantRateKernel:
    """Two states swapping at rates lam (0->1) and mu (1->0)."""
    space = StateSpace(labels=("0", "1"))
    return ConstantRateKernel(space, [[-lam, lam], [mu, -mu]])


def oscillator_kernel(J: int) -> ConstantRateKernel:
    """Truncated oscillator family with states 0, +-1, ..., +-J, overflow.

    From 0 the exit rate is exactly 1, split as 2^-(|j|+1) per destination
    j != 0; the weight of the truncated-away states, 2^-J, goes to overflow.
    Each j != 0 jumps to -j at rate 2^|j|, so the pair {j,-j} is closed and
    the per-state rates of the full family are unbounded (recorded on the
    overflow state).
    """
    if J < 1:
        raise ModelParseError("fms-oscillator: J must be >= 1")
    labels = ["0"]
    for j in range(1, J + 1):
        labels += [str(j), str(-j)]
    labels.append("overflow")
    n = len(labels)
    space = StateSpace(
        labels=tuple(labels),
        overflow_index=n - 1,
        overflow_rate_sup=math.inf,
    )
    idx = {lab: i for i, lab in enumerate(labels)}
    Q = np.zeros((n, n))
    for j in range(1, J + 1):
        w = 2.0 ** -(j + 1)
        Q[0, idx[str(j)]] = w
        Q[0, idx[str(-j)]] = w
        rate = 2.0**j
        Q[idx[str(j)], idx[str(-j)]] = rate
        Q[idx[str(-j)], idx[str(j)]] = rate
        Q[idx[str(j)], idx[str(j)]] = -rate
        Q[idx[str(-j)], idx[str(-j)]] = -rate
    Q[0, n - 1] = 2.0**-J
    Q[0, 0] = -1.0
    return ConstantRateKernel(space, Q)


def pure_birth_kernel(b: float, N: int) -> ConstantRateKernel:
    """Birth chain n -> n+1 at rate b^n on states 1..N, overflow above N."""
    if N < 1:
        raise ModelParseError("pure-birth: N must be >= 1")
    labels = tuple(str(n) for n in range(1, N + 1)) + ("overflow",)
    space = StateSpace(
        labels=labels,
        overflow_index=N,
        overflow_rate_sup=math.inf if b > 1 else float(b),
    )
    Q = np.zeros((N + 1, N + 1))
    for n in range(1, N + 1):
        rate = float(b) ** n
        Q[n - 1, n] = rate
        Q[n - 1, n - 1] = -rate
    return ConstantRateKernel(space, Q)


GENERATORS = {
    "two-state": lambda p: two_state_kernel(float(p["lam"]), float(p["mu"])),
    "fms-oscillator": lambda p: oscillator_kernel(int(p["J"])),
    "pure-birth": lambda p: pure_birth_kernel(float(p["b"]), int(p["N"])),
}


def _space_from(states, spec: dict) -> StateSpace:
    labels = tuple(str(s) for s in states)
    cemetery = spec.get("cemetery_state")
    overflow = spec.get("overflow_state")
    sup = spec.get("overflow_rate_sup")
    if isinstance(sup, str):
        sup = math.inf if sup == "inf" else float(sup)
    return StateSpace(
        labels=labels,
        cemetery_index=labels.index(str(cemetery)) if cemetery is not None else None,
        overflow_index=labels.index(str(overflow)) if overflow is not None else None,
        overflow_rate_sup=sup,
    )


def kernel_from_dict(spec: dict) -> RateKernel:
    kspec = _require(spec, "kernel", "model")
    ktype = _require(kspec, "type", "model.kernel")
    if ktype == "generator":
        name = _require(kspec, "name", "model.kernel")
        if name not in GENERATORS:
            raise ModelParseError(
                f"model.kernel.name: unknown generator {name!r} "
                f"(known: {sorted(GENERATORS)})"
            )
        return GENERATORS[name](kspec.get("params", {}))
    window = _window_from(spec.get("window"))
    space = _space_from(_require(spec, "states", "model"), spec)
    if ktype == "constant":
        return ConstantRateKernel(space, _require(kspec, "matrix", "model.kernel"), window)
    if ktype == "piecewise":
        return PiecewiseRateKernel(
            space,
            _require(kspec, "breakpoints", "model.kernel"),
            _require(kspec, "matrices", "model.kernel"),
            window,
        )
    raise ModelParseError(f"model.kernel.type: unknown type {ktype!r}")


def mdp_from_dict(spec: dict) -> "MdpModel":
    """Controlled-model file::

        {"states": [...], "actions": [...],
         "available": {state: [actions]},
         "default_action": {state: action},
         "rates": {"x,a": {target: rate, ...}, ...},
         "costs": {"running": {...}|number, "discount": number|{...},
                   "instant": [{"u": t, "values": {...}|number}],
                   "jump": {"x,y": c}|number}}

    ``rates`` lists destination rates only (diagonals are implied);
    omitted (state, action) pairs are absorbing.  Optional sink metadata as
    in kernel files.  Costs are optional and returned separately by
    :func:`load_mdp`.
    """
    from .ctjmdp import MdpModel

    space = _space_from(_require(spec, "states", "mdp"), spec)
    actions = tuple(str(a) for a in _require(spec, "actions", "mdp"))
    a_index = {a: i for i, a in enumerate(actions)}
    S, A = space.n_states, len(actions)
    avail_spec = _require(spec, "available", "mdp")
    available = []
    for lab in space.labels:
        if lab not in avail_spec:
            raise ModelParseError(f"mdp.available: missing state {lab!r}")
        acts = [a_index[str(a)] for a in avail_spec[lab]]
        available.append(tuple(acts))
    default_spec = spec.get("default_action", {})
    default = tuple(
        a_index[str(default_spec[lab])] if lab in default_spec else available[x][0]
        for x, lab in enumerate(space.labels)
    )
    rates = np.zeros((S, A, S))
    for key, row in _require(spec, "rates", "mdp").items():
        try:
            s_lab, a_lab = key.split(",")
        except ValueError:
            raise ModelParseError(f"mdp.rates: key {key!r} is not 'state,action'") from None
        x = space.index(s_lab.strip())
        a = a_index[a_lab.strip()]
        for tgt, r in row.items():
            y = space.index(str(tgt))
            if y == x:
                raise ModelParseError(f"mdp.rates[{key}]: self-loop rate on {tgt!r}")
            rates[x, a, y] = float(r)
        rates[x, a, x] = -rates[x, a].sum()
    return MdpModel(
        space=space,
        actions=actions,
        available=tuple(available),
        rates=rates,
        default_action=default,
    )


def costs_from_dict(spec: dict, model) -> "object | None":
    """Cost block of an MDP file, or None when absent."""
    from .costs import CostModel, Discount

    block = spec.get("costs")
    if block is None:
        return None
    S, A = model.space.n_states, model.n_actions

    def sa_array(val):
        if isinstance(val, dict):
            arr = np.zeros((S, A))
            for key, v in val.items():
                s_lab, a_lab = key.split(",")
                arr[model.space.index(s_lab.strip()), model.action_index(a_lab.strip())] = float(v)
            return arr
        return float(val)

    disc = block.get("discount", 1.0)
    if isinstance(disc, dict):
        disc = Discount(
            breaks=np.asarray(disc.get("breakpoints", []), float),
            values=np.asarray(disc["values"], float),
        )
    instant = [
        (float(item["u"]), sa_array(item.get("values", 0.0)))
        for item in block.get("instant", [])
    ]
    jump = block.get("jump")
    if isinstance(jump, dict):
        arr = np.zeros((S, S))
        for key, v in jump.items():
            x_lab, y_lab = key.split(",")
            arr[model.space.index(x_lab.strip()), model.space.index(y_lab.strip())] = float(v)
        jump = arr
    return CostModel.build(
        model,
        running=sa_array(block.get("running", 0.0)),
        discount=disc,
        instant=instant,
        jump=jump,
    )


def load_mdp(path: str | Path):
    """(MdpModel, CostModel | None) from an MDP model file."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelParseError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    try:
        model = mdp_from_dict(spec)
        return model, costs_from_dict(spec, model)
    except ModelParseError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ModelParseError(f"{path}: {e}") from e


def load_kernel(path: str | Path) -> RateKernel:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelParseError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(spec, dict):
        raise ModelParseError(f"{path}: top level must be an object")
    try:
        return kernel_from_dict(spec)
    except ModelParseError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ModelParseError(f"{path}: {e}") from e


def write_kernel_file(path: str | Path, spec: dict):
    Path(path).write_text(json.dumps(spec, indent=1) + "\n")
