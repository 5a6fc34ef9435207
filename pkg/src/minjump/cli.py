"""Command-line interface: model ingestion, seeded runs, report emission.

Every run writes its artifacts (CSV tables, a JSON report, and a manifest
with the model digest and all effective parameters) into the output
directory.  Re-running a manifest reproduces Monte Carlo outputs
bit-identically; exit code 0 means every checked residual or verdict was
within tolerance.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, defaults
from .benchmarks import bench3_model
from .costs import evaluate_cost_exact, evaluate_cost_mc
from .ctjmdp import (
    JumpParityPolicy,
    MarkovPolicy,
    MdpModel,
    UniformRandomPolicy,
    derive_markov_policy,
    estimate_marginals,
    markov_forward_marginals,
    simulate_controlled,
    single_action_policy,
    verify_dominance,
)
from .kolmogorov import (
    ForwardEquationUndefinedError,
    backward_integral_check,
    backward_residual,
    forward_integral_check,
    forward_residual,
)
from .modelio import ModelParseError, load_kernel, load_mdp
from .simulate import SimConfig, sample_paths
from .transition import (
    TimeGrid,
    backward_start_family,
    minimal_transition,
    ode_oracle,
)


def _digest(path: Path) -> str:
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("MINJUMP_OUT") or "minjump-out"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


class _NumpyEncoder(json.JSONEncoder):
    def default(self, o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        return super().default(o)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, cls=_NumpyEncoder) + "\n")


def _strip_out_flag(argv):
    out_stripped = []
    skip = False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out_stripped.append(a)
    return out_stripped


def _write_manifest(out: Path, command: str, args, argv):
    params = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in ("out", "func") and v is not None
    }
    manifest = {
        "version": __version__,
        "command": command,
        # the output directory is not part of the run's identity
        "argv": _strip_out_flag(argv),
        "model_digest": _digest(Path(args.model)) if getattr(args, "model", None) else None,
        "parameters": params,
        "defaults": defaults.as_dict(),
    }
    _write_json(out / "manifest.json", manifest)


def run_manifest(manifest_path: str | Path, out_dir: str | Path) -> int:
    """Re-run the command recorded in a manifest into a fresh directory."""
    manifest = json.loads(Path(manifest_path).read_text())
    return main(list(manifest["argv"]) + ["--out", str(out_dir)])


def write_bench3(path: str | Path):
    """Emit the 3-state/2-action bounded benchmark as an MDP model file."""
    model = bench3_model()
    rates = {}
    for x, lab in enumerate(model.space.labels):
        for a in model.available[x]:
            row = {
                model.space.labels[y]: model.rates[x, a, y]
                for y in range(model.space.n_states)
                if y != x and model.rates[x, a, y] > 0
            }
            rates[f"{lab},{model.actions[a]}"] = row
    spec = {
        "states": list(model.space.labels),
        "actions": list(model.actions),
        "available": {lab: [model.actions[a] for a in model.available[x]]
                      for x, lab in enumerate(model.space.labels)},
        "default_action": {lab: model.actions[model.default_action[x]]
                           for x, lab in enumerate(model.space.labels)},
        "rates": rates,
        "costs": {"running": 1.0, "discount": 1.0},
    }
    Path(path).write_text(json.dumps(spec, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# policies from the command line


def _parse_policy(model: MdpModel, spec: str):
    if spec == "parity":
        if model.n_actions < 2:
            raise ModelParseError("parity policy needs two actions")
        return JumpParityPolicy(model, 0, 1)
    if spec.startswith("parity:"):
        ev, od = spec.split(":", 1)[1].split(",")
        return JumpParityPolicy(model, model.action_index(ev), model.action_index(od))
    if spec == "uniform":
        return UniformRandomPolicy(model)
    if spec == "default":
        return single_action_policy(model)
    if spec.startswith("markov:"):
        return read_policy_csv(model, spec.split(":", 1)[1])
    raise ModelParseError(
        f"unknown policy {spec!r} (use parity[,...], uniform, default, or "
        "markov:FILE.csv)"
    )


def write_policy_csv(path: Path, model: MdpModel, policy: MarkovPolicy):
    lines = ["bin_start,state,action,prob"]
    for k in range(policy.n_bins):
        start = k * policy.bin_width
        for x, lab in enumerate(model.space.labels):
            for a, alab in enumerate(model.actions):
                p = policy.table[k, x, a]
                if p > 0:
                    lines.append(f"{float(start)!r},{lab},{alab},{float(p)!r}")
    path.write_text("\n".join(lines) + "\n")


def read_policy_csv(model: MdpModel, path: str | Path) -> MarkovPolicy:
    rows = Path(path).read_text().strip().splitlines()[1:]
    entries = []
    for row in rows:
        start, lab, alab, p = row.split(",")
        entries.append((float(start), model.space.index(lab),
                        model.action_index(alab), float(p)))
    starts = sorted({e[0] for e in entries})
    if len(starts) > 1:
        widths = np.diff(starts)
        delta = float(widths[0])
        if np.max(np.abs(widths - delta)) > 1e-9:
            raise ModelParseError(f"{path}: policy bins must be uniform")
    else:
        delta = math.inf
    table = np.zeros((len(starts), model.space.n_states, model.n_actions))
    bin_index = {s: k for k, s in enumerate(starts)}
    for start, x, a, p in entries:
        table[bin_index[start], x, a] = p
    return MarkovPolicy(model, delta, table)


# ---------------------------------------------------------------------------
# subcommands


def _load_kernel_with_truncation(args):
    """Honor --truncation by overriding a generator family's level."""
    if getattr(args, "truncation", None) is None:
        return load_kernel(args.model)
    spec = json.loads(Path(args.model).read_text())
    kspec = spec.get("kernel", {})
    if kspec.get("type") != "generator":
        raise ModelParseError("--truncation only applies to generator models")
    params = dict(kspec.get("params", {}))
    key = "J" if kspec.get("name") == "fms-oscillator" else "N"
    params[key] = int(args.truncation)
    kspec["params"] = params
    spec["kernel"] = kspec
    from .modelio import kernel_from_dict

    return kernel_from_dict(spec)


def cmd_transition(args, argv) -> int:
    out = _out_dir(args)
    kernel = _load_kernel_with_truncation(args)
    x = kernel.space.index(args.from_state)
    u = args.u
    if args.t <= u:
        raise ValueError("need --t greater than --u")
    grid = TimeGrid.build(u, args.t, args.grid_step, kernel)
    if args.oracle:
        table = ode_oracle(kernel, u, x, grid)
    else:
        table = minimal_transition(kernel, u, x, grid, tol=args.tol)
    lines = ["u,x,t,target_state,value"]
    for k, w in enumerate(grid.nodes):
        for y, lab in enumerate(kernel.space.labels):
            lines.append(
                f"{float(u)!r},{args.from_state},{float(w)!r},{lab},"
                f"{float(table.values[0, k, y])!r}"
            )
    (out / "transition.csv").write_text("\n".join(lines) + "\n")
    k_end = grid.index_of(args.t)
    report = {
        "method": table.method,
        "mass_defect_at_t": float(table.mass_defect[0, k_end]),
        "term_count": table.n_terms,
        "term_tail_bound": table.term_tail_max,
        "row_overshoot": table.params.get("row_overshoot"),
        "grid_step": args.grid_step,
        "tolerances": {"term_tol": args.tol},
        "defaults": defaults.as_dict(),
    }
    _write_json(out / "report.json", report)
    _write_manifest(out, "transition", args, argv)
    return 0


def cmd_check(args, argv) -> int:
    out = _out_dir(args)
    kernel = load_kernel(args.model)
    x = kernel.space.index(args.from_state)
    grid = TimeGrid.build(args.u, args.t, args.grid_step, kernel)
    table = ode_oracle(kernel, args.u, x, grid)
    fam = backward_start_family(kernel, grid)
    sets = [[x]] + ([[y] for y in range(min(3, kernel.space.n_states)) if y != x])
    full = list(range(kernel.space.n_states))

    report = {"equations": {}, "guard": [], "tolerances": {
        "differential": args.tol_diff, "integral": args.tol_int},
        "defaults": defaults.as_dict()}
    ok = True

    rep_b = backward_residual(kernel, fam, grid, [(x, B) for B in sets])
    report["equations"]["backward_diff"] = rep_b.as_dict()
    ok &= rep_b.max_residual <= args.tol_diff

    fwd_max = 0.0
    for B in sets + [full]:
        try:
            rep_f = forward_residual(kernel, table, B, args.t)
            fwd_max = max(fwd_max, rep_f.max_residual)
            report["guard"].append({"B": B, "bounded": True})
        except ForwardEquationUndefinedError as e:
            report["guard"].append({"B": B, "bounded": False, "witness": e.witness})
    report["equations"]["forward_diff"] = {"max_residual": fwd_max}
    ok &= fwd_max <= args.tol_diff

    bi = max(backward_integral_check(kernel, table, args.t, B) for B in sets)
    fi = 0.0
    for B in sets:
        try:
            fi = max(fi, forward_integral_check(kernel, table, args.t, B))
        except ForwardEquationUndefinedError:
            pass
    report["equations"]["backward_integral"] = {"max_residual": bi}
    report["equations"]["forward_integral"] = {"max_residual": fi}
    ok &= bi <= args.tol_int and fi <= args.tol_int

    report["pass"] = bool(ok)
    _write_json(out / "report.json", report)
    _write_manifest(out, "check", args, argv)
    return 0 if ok else 1


def _gamma_from(args, space) -> np.ndarray:
    gamma = np.zeros(space.n_states)
    if args.from_state is not None:
        gamma[space.index(args.from_state)] = 1.0
    else:
        real = space.real_indices
        gamma[real] = 1.0 / len(real)
    return gamma


def cmd_simulate(args, argv) -> int:
    out = _out_dir(args)
    kernel = _load_kernel_with_truncation(args)
    gamma = _gamma_from(args, kernel.space)
    cfg = SimConfig(seed=args.seed, horizon=args.horizon,
                    max_jumps=args.max_jumps, replications=args.paths)
    batch = sample_paths(kernel, gamma, cfg)
    lines = ["replication,t_n,x_n"]
    for i in range(len(batch)):
        rec = batch[i]
        lines.append(
            f"{i},{float(kernel.window.t0)!r},{kernel.space.labels[rec.initial_state]}"
        )
        for t, s in zip(rec.jump_times, rec.jump_states):
            lines.append(f"{i},{float(t)!r},{kernel.space.labels[s]}")
    (out / "paths.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "summary.json", batch.summary())
    _write_manifest(out, "simulate", args, argv)
    return 0


def cmd_mdp_simulate(args, argv) -> int:
    out = _out_dir(args)
    model, _ = load_mdp(args.model)
    policy = _parse_policy(model, args.policy)
    gamma = _gamma_from(args, model.space)
    cfg = SimConfig(seed=args.seed, horizon=args.horizon,
                    max_jumps=args.max_jumps, replications=args.paths)
    batch = simulate_controlled(model, policy, gamma, cfg)
    lines = ["replication,t_n,x_n"]
    for i in range(len(batch)):
        rec = batch[i]
        lines.append(f"{i},0.0,{model.space.labels[rec.initial_state]}")
        for t, s in zip(rec.jump_times, rec.jump_states):
            lines.append(f"{i},{float(t)!r},{model.space.labels[s]}")
    (out / "paths.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "summary.json", batch.summary())
    _write_manifest(out, "mdp simulate", args, argv)
    return 0


def _write_marginals_csv(path: Path, model: MdpModel, m):
    lines = ["t,state,action,mass,se"]
    for k, t in enumerate(m.times):
        for x, lab in enumerate(model.space.labels):
            lines.append(
                f"{float(t)!r},{lab},,{float(m.state_mass[k, x])!r},"
                f"{float(m.state_se[k, x])!r}"
            )
            for a, alab in enumerate(model.actions):
                lines.append(
                    f"{float(t)!r},{lab},{alab},{float(m.action_mass[k, x, a])!r},"
                    f"{float(m.action_se[k, x, a])!r}"
                )
    path.write_text("\n".join(lines) + "\n")


def _derive(args, out):
    model, _ = load_mdp(args.model)
    policy = _parse_policy(model, args.policy)
    gamma = _gamma_from(args, model.space)
    cfg = SimConfig(seed=args.seed, horizon=args.horizon,
                    max_jumps=args.max_jumps, replications=args.paths)
    batch = simulate_controlled(model, policy, gamma, cfg)
    mids = (np.arange(int(round(args.horizon / args.delta))) + 0.5) * args.delta
    marg = estimate_marginals(batch, model, policy, mids)
    phi = derive_markov_policy(marg, model)
    return model, policy, gamma, batch, marg, phi


def cmd_mdp_derive(args, argv) -> int:
    out = _out_dir(args)
    model, policy, gamma, batch, marg, phi = _derive(args, out)
    write_policy_csv(out / "policy.csv", model, phi)
    _write_marginals_csv(out / "marginals.csv", model, marg)
    _write_json(out / "report.json", {
        "delta": args.delta,
        "renormalization_worst": phi.renorm_log,
        "n_paths": args.paths,
        "defaults": defaults.as_dict(),
    })
    _write_manifest(out, "mdp derive-markov", args, argv)
    return 0


def cmd_mdp_compare(args, argv) -> int:
    out = _out_dir(args)
    model, policy, gamma, batch, marg, phi = _derive(args, out)
    times = np.array([float(t) for t in args.times.split(",")])
    m_pi = estimate_marginals(batch, model, policy, times)
    m_phi = markov_forward_marginals(model, phi, gamma, times)
    rep = verify_dominance(m_pi, m_phi)
    write_policy_csv(out / "policy.csv", model, phi)
    _write_marginals_csv(out / "pi_marginals.csv", model, m_pi)
    _write_marginals_csv(out / "phi_marginals.csv", model, m_phi)
    report = {
        "verdict": rep.verdict,
        "max_excess_z": rep.max_excess_z,
        "max_equality_z": rep.max_equality_z,
        "equality_through": rep.equality_through,
        "violations": rep.violations,
        "phi_total_mass": [float(v) for v in m_phi.total_mass],
        "measured_gap_state_mass": [
            [float(v) for v in row]
            for row in (m_pi.state_mass - m_phi.state_mass)
        ],
        "params": rep.params,
        "n_paths": args.paths,
        "defaults": defaults.as_dict(),
    }
    _write_json(out / "report.json", report)
    _write_manifest(out, "mdp compare", args, argv)
    return 0 if rep.passed else 1


def cmd_mdp_cost(args, argv) -> int:
    out = _out_dir(args)
    model, cost = load_mdp(args.model)
    if cost is None:
        raise ModelParseError("model file has no costs block")
    policy = _parse_policy(model, args.policy)
    gamma = _gamma_from(args, model.space)
    cfg = SimConfig(seed=args.seed, horizon=args.horizon,
                    max_jumps=args.max_jumps, replications=args.paths)
    batch = simulate_controlled(model, policy, gamma, cfg)
    res = evaluate_cost_mc(batch, policy, cost, args.criterion)
    report = {
        "route": res.route, "criterion": res.criterion, "value": res.value,
        "se": res.se, "tail_bound": res.tail_bound, "params": res.params,
        "defaults": defaults.as_dict(),
    }
    if isinstance(policy, MarkovPolicy) and args.criterion != "infinite_with_jump_costs":
        times = np.linspace(0.0, args.horizon, max(257, int(args.horizon / 0.0125) + 1))
        m = markov_forward_marginals(model, policy, gamma, times)
        r2 = evaluate_cost_exact(m, cost, args.criterion)
        report["exact"] = {"value": r2.value, "tail_bound": r2.tail_bound}
    _write_json(out / "report.json", report)
    _write_manifest(out, "mdp cost", args, argv)
    return 0


def cmd_accept(args, argv) -> int:
    from .acceptance import run_all

    out = _out_dir(args)
    only = {int(c) for c in args.only.split(",")} if args.only else None
    results = run_all(fast=args.fast, only=only)
    for r in results:
        print(r.line())
    report = {
        "passed": all(r.passed for r in results),
        "results": [
            {"criterion": r.cid, "title": r.title, "passed": r.passed,
             "elapsed_s": round(r.elapsed, 2), "details": r.details}
            for r in results
        ],
        "defaults": defaults.as_dict(),
    }
    _write_json(out / "acceptance.json", report)
    _write_manifest(out, "accept", args, argv)
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} criteria passed")
    return 0 if n_fail == 0 else 1


# ---------------------------------------------------------------------------
# argument wiring


def _common(p, model=True):
    if model:
        p.add_argument("--model", required=True, help="model file (JSON)")
    p.add_argument("--out", help="output directory (or $MINJUMP_OUT)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="minjump",
        description="minimal transition functions and controlled simulation "
        "of jump Markov processes",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transition", help="minimal transition table from one state")
    _common(p)
    p.add_argument("--from", dest="from_state", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--u", type=float, default=0.0)
    p.add_argument("--grid-step", type=float, default=defaults.GRID_STEP)
    p.add_argument("--tol", type=float, default=defaults.TERM_TOL)
    p.add_argument("--oracle", action="store_true",
                   help="use the matrix-exponential oracle instead")
    p.add_argument("--truncation", type=int,
                   help="override a generator family's truncation level")
    p.set_defaults(func=cmd_transition)

    p = sub.add_parser("check", help="Kolmogorov equation residual report")
    _common(p)
    p.add_argument("--from", dest="from_state", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--u", type=float, default=0.0)
    p.add_argument("--grid-step", type=float, default=defaults.GRID_STEP)
    p.add_argument("--tol-diff", type=float, default=1e-4)
    p.add_argument("--tol-int", type=float, default=1e-6)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("simulate", help="sample uncontrolled paths")
    _common(p)
    p.add_argument("--from", dest="from_state")
    p.add_argument("--paths", type=int, default=defaults.MC_PATHS)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-jumps", type=int, default=defaults.MAX_JUMPS)
    p.add_argument("--truncation", type=int,
                   help="override a generator family's truncation level")
    p.set_defaults(func=cmd_simulate)

    mdp = sub.add_parser("mdp", help="controlled-process commands")
    msub = mdp.add_subparsers(dest="mdp_command", required=True)

    def mdp_common(q):
        _common(q)
        q.add_argument("--policy", required=True,
                       help="parity | parity:ev,od | uniform | default | markov:FILE")
        q.add_argument("--from", dest="from_state")
        q.add_argument("--paths", type=int, default=defaults.MC_PATHS)
        q.add_argument("--horizon", type=float, required=True)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--max-jumps", type=int, default=defaults.MAX_JUMPS)

    q = msub.add_parser("simulate", help="sample controlled paths")
    mdp_common(q)
    q.set_defaults(func=cmd_mdp_simulate)

    q = msub.add_parser("derive-markov", help="marginal-matching Markov policy")
    mdp_common(q)
    q.add_argument("--delta", type=float, default=defaults.POLICY_BIN_WIDTH)
    q.set_defaults(func=cmd_mdp_derive)

    q = msub.add_parser("compare", help="dominance/equality verdict")
    mdp_common(q)
    q.add_argument("--delta", type=float, default=defaults.POLICY_BIN_WIDTH)
    q.add_argument("--times", default="0.25,0.5,1.0,2.0",
                   help="comma-separated check times")
    q.set_defaults(func=cmd_mdp_compare)

    q = msub.add_parser("cost", help="discounted-cost evaluation")
    mdp_common(q)
    q.add_argument("--criterion", default="infinite_discounted",
                   choices=["infinite_discounted", "finite_horizon",
                            "infinite_with_jump_costs"])
    q.set_defaults(func=cmd_mdp_cost)

    p = sub.add_parser("accept", help="run the acceptance suite")
    _common(p, model=False)
    p.add_argument("--fast", action="store_true",
                   help="scaled-down Monte Carlo sizes (development only)")
    p.add_argument("--only", help="comma-separated criterion numbers")
    p.set_defaults(func=cmd_accept)

    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args, argv)
    except (ModelParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
