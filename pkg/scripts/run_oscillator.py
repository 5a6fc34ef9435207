#!/usr/bin/env python3
"""Oscillator experiment: computed transition entries against the closed
form, and the monotone truncation sweep.

Writes two CSVs into --out: entries.csv (per-state value, closed form,
error at t=1) and truncation.csv (selected entries vs truncation level).
"""

import argparse
import math
from pathlib import Path

from minjump.benchmarks import oscillator_kernel
from minjump.transition import TimeGrid, minimal_transition, truncation_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--J", type=int, default=20)
    ap.add_argument("--t", type=float, default=1.0)
    ap.add_argument("--grid-step", type=float, default=1e-3)
    ap.add_argument("--tol", type=float, default=1e-7)
    ap.add_argument("--levels", default="4,8,16")
    ap.add_argument("--out", default="oscillator-out")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    kernel = oscillator_kernel(args.J)
    grid = TimeGrid.build(0.0, args.t, args.grid_step, kernel)
    table = minimal_transition(kernel, 0.0, 0, grid, tol=args.tol)
    e = math.exp(-args.t)
    lines = ["state,value,closed_form,abs_err"]
    for y, lab in enumerate(kernel.space.labels):
        v = table.at(0, args.t, y)
        if lab == "0":
            cf = e
        elif lab == "overflow":
            cf = float("nan")
        else:
            cf = (1 - e) / 2 ** (abs(int(lab)) + 1)
        lines.append(f"{lab},{v!r},{cf!r},{abs(v - cf)!r}")
    (out / "entries.csv").write_text("\n".join(lines) + "\n")
    print(
        f"terms={table.n_terms} tail={table.term_tail_max:.2e} "
        f"defect={table.mass_defect[0, -1]:.2e}"
    )

    levels = [int(x) for x in args.levels.split(",")]
    tabs = truncation_sweep(
        oscillator_kernel, levels, 0.0, "0", args.t, h=args.grid_step, tol=args.tol
    )
    lines = ["level,state,value"]
    for lev, tab in zip(levels, tabs):
        for lab in ("0", "1", "-1", "2"):
            y = tab.space.index(lab)
            lines.append(f"{lev},{lab},{tab.at(0, args.t, y)!r}")
    (out / "truncation.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out}/entries.csv and {out}/truncation.csv")


if __name__ == "__main__":
    main()
