"""Command-line entry point: ``sa-conc <command> [options]``.

Exit codes: 0 on success or pass, 2 when a validation verdict fails, 1 on
errors (bad arguments, bad configs, numerical failures).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from fractions import Fraction

import numpy as np

from ..bound_calculator import counterexample_path, log_counterexample_lower_mgf
from ..errors import ConfigError, SAError
from ..markov_core import solve_poisson
from ..problem_specs import average_operator, operator_poisson
from ..simulation_engine import RunPlan, _single, geometric_checkpoints
from .scenarios import catalog_by_name, load_config, scenario_catalog
from .validation import _clean, bound_references, run_validation

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
BIG_PATHS = 100_000  # deltas below 0.01 need at least this many paths


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for failed verdicts
    def error(self, message):
        raise UsageError(message)


def _deltas(text):
    try:
        out = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("--delta takes a comma-separated list of numbers") from None
    if not out or any(not 0 < d < 1 for d in out):
        raise argparse.ArgumentTypeError("every delta must lie in (0, 1)")
    return out


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    p = _Parser(prog="sa-conc", description="Concentration bounds for stochastic approximation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def scen(sp, deltas=True):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--config", metavar="PATH", help="scenario config (JSON)")
        g.add_argument("--scenario", metavar="NAME", help="built-in scenario name")
        sp.add_argument("--out", metavar="PATH", help="output file (default: stdout)")
        if deltas:
            sp.add_argument("--delta", type=_deltas, metavar="CSV", help="confidence levels, e.g. 0.1,0.01")

    sp = sub.add_parser("catalog", help="list built-in scenarios")
    sp.add_argument("--json", action="store_true", help="print full configs as JSON")
    sp.add_argument("--out", metavar="PATH")

    scen(sub.add_parser("constants", help="constants ledger as JSON"), deltas=False)

    sp = sub.add_parser("bound", help="sample the bound curve to CSV")
    scen(sp)
    sp.add_argument("--horizon", type=_positive)

    sp = sub.add_parser("simulate", help="one trajectory as CSV")
    scen(sp)
    sp.add_argument("--seed", type=_u64, default=0)
    sp.add_argument("--path-index", type=int, default=0)
    sp.add_argument("--horizon", type=_positive)

    sp = sub.add_parser("validate", help="Monte Carlo validation report (JSON)")
    scen(sp)
    sp.add_argument("--seed", type=_u64, default=0)
    sp.add_argument("--paths", type=_positive, default=1000)
    sp.add_argument("--workers", type=_positive, default=1)
    sp.add_argument("--horizon", type=_positive)

    sp = sub.add_parser("poisson", help="solve the Poisson equation of a scenario")
    scen(sp, deltas=False)
    sp.add_argument("--x", metavar="CSV", help="point x (default: the fixed point)")

    sp = sub.add_parser("counterexample", help="deterministic lower-bound table")
    scen(sp, deltas=False)
    sp.add_argument("--k", metavar="CSV", help="k grid (default: scenario's)")
    return p


def _scenario(args):
    if args.config:
        s = load_config(args.config)
    else:
        s = catalog_by_name().get(args.scenario)
        if s is None:
            raise ConfigError("unknown scenario %r; run `catalog` for the list" % args.scenario)
    if getattr(args, "delta", None):
        s = replace(s, deltas=args.delta)
    if getattr(args, "horizon", None):
        s = replace(s, horizon=args.horizon)
    return s


def _emit(text, out):
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(obj):
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _rat(v):
    return str(v) if isinstance(v, Fraction) else repr(float(v))


# ---------------------------------------------------------------- commands


def cmd_catalog(args):
    cat = scenario_catalog()
    if args.json:
        _emit(_json([s.to_config() for s in cat]), args.out)
    else:
        width = max(len(s.name) for s in cat)
        _emit("".join("%-*s  %s\n" % (width, s.name, s.description) for s in cat), args.out)
    return EXIT_OK


def cmd_constants(args):
    s = _scenario(args)
    spec = s.spec()
    ledger = s.ledger(spec)
    out = {"scenario": s.name, "regime": s.regime(spec), "problem": spec.describe(), **ledger.to_dict()}
    out["problem"].pop("linear", None)
    _emit(_json(out), args.out)
    return EXIT_OK


def cmd_bound(args):
    s = _scenario(args)
    if s.bound == "none":
        raise ConfigError("scenario %s has no bound curve" % s.name)
    spec = s.spec()
    plan = s.plan()
    refs, _ = bound_references(s, spec, s.noise_model(spec), plan)
    rows = []
    for name, v in refs.items():
        if name == "almost_sure":
            continue
        d = name.split("=")[1]
        rows += [(k, d, repr(float(v[k]))) for k in plan.checkpoints]
    _emit(_csv(["k", "delta", "bound"], rows), args.out)
    return EXIT_OK


def cmd_simulate(args):
    s = _scenario(args)
    spec = s.spec()
    plan = s.plan()
    refs, _ = bound_references(s, spec, s.noise_model(spec), plan)
    ref = next((v for n, v in refs.items() if n != "almost_sure"), None)
    traj = _single(plan, (args.seed, args.path_index), ref, False)
    rows = [(k, repr(e), repr(b), v) for k, e, b, v in traj.rows(ref)]
    _emit(_csv(["k", "error_sq", "bound", "violated"], rows), args.out)
    return EXIT_OK


def cmd_validate(args):
    s = _scenario(args)
    if min(s.deltas) < 0.01 and args.paths < BIG_PATHS:
        raise UsageError("deltas below 0.01 need --paths >= %d" % BIG_PATHS)
    rep = run_validation(s, args.paths, args.seed, args.workers)
    _emit(rep.to_json(), args.out)
    for name, ok in rep.verdicts.items():
        print("%s %s" % ("PASS" if ok else "FAIL", name), file=sys.stderr)
    print("runtime %.2fs" % rep.runtime, file=sys.stderr)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_poisson(args):
    s = _scenario(args)
    spec = s.spec()
    if args.x:
        x = np.array([float(t) for t in args.x.split(",")])
        if x.shape != (spec.dim,):
            raise UsageError("--x needs %d coordinates" % spec.dim)
    else:
        x = spec.x_star
    V = operator_poisson(spec, x)
    g = spec.F_all_states(x)
    canonical = solve_poisson(spec.chain, g)
    out = {
        "scenario": s.name,
        "x": x,
        "pi": spec.chain.pi,
        "F_bar": average_operator(spec, x),
        "family": "canonical" if spec.poisson_ref is None else "hitting(%d)" % spec.poisson_ref,
        "V": V,
        "residual": float(np.max(np.abs(g - average_operator(spec, x) + np.tensordot(spec.chain.P, V, 1) - V))),
        "canonical_V": canonical.V,
        "canonical_residual": canonical.residual_norm,
        "pi_dot_canonical_V": np.tensordot(spec.chain.pi, canonical.V, 1),
    }
    _emit(_json(out), args.out)
    return EXIT_OK


def cmd_counterexample(args):
    s = _scenario(args)
    spec = s.spec()
    if spec.kind != "counterexample":
        raise ConfigError("scenario %s is not a counterexample" % s.name)
    a, b, N = (float(spec.meta[k]) for k in ("a", "b", "N"))
    sch = s.step_schedule(spec)
    grid = [int(t) for t in args.k.split(",")] if args.k else list(s.params.get("k_grid", [10, 20, 40, 80]))
    part = 1 if b == 1 else 2
    beta = (1.0 / (2.0 - sch.z) if part == 1 else 1.0 / (1.0 - sch.z)) + float(s.params.get("beta_offset", 0.1))
    lam = float(s.params.get("lam", 1.0))
    x0 = float(s.x0_array(spec)[0])
    rows = []
    for k in grid:
        v, p = counterexample_path(a, b, N, x0, sch, k)
        ls = log_counterexample_lower_mgf(a, b, N, x0, sch, k, lam, beta, "sum")
        li = log_counterexample_lower_mgf(a, b, N, x0, sch, k, lam, beta, "integral") if part == 1 else ""
        rows.append((k, _rat(v), _rat(p), repr(ls), repr(li) if li != "" else ""))
    _emit(_csv(["k", "path_value", "path_prob", "log_lower_sum", "log_lower_integral"], rows), args.out)
    return EXIT_OK


COMMANDS = {
    "catalog": cmd_catalog,
    "constants": cmd_constants,
    "bound": cmd_bound,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "poisson": cmd_poisson,
    "counterexample": cmd_counterexample,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (%s)" % ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print("sa-conc: usage error: %s" % exc, file=sys.stderr)
        return EXIT_ERROR
    except (SAError, OSError, ValueError) as exc:
        print("sa-conc: error: %s" % exc, file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
