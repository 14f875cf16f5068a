"""Monte Carlo validation of a scenario against its bound curves."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import chi2

from ..bound_calculator import (
    hp_bound,
    hp_bound_unbounded,
    log_counterexample_lower_mgf,
    polyak_bound,
    worst_case_envelope,
)
from ..errors import BadParams, ConfigError, SAError
from ..noise_models import quantile_B
from ..problem_specs import lyapunov_residual
from ..simulation_engine import (
    RunPlan,
    enumerate_paths,
    iid_importance_mgf,
    monte_carlo,
    truncation_shift_check,
)

SCHEMA = 1
ENUM_ALPHA = 1e-3  # significance of the chi-square law check
SHIFT_TOL = 1e-10
LYAP_TOL = 1e-10


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _num(v):
    return float(v) if v is not None else math.nan


# ---------------------------------------------------------------- verdict rules
# Every verdict is a function of numbers stored in the report, so a loaded
# report can be re-judged without re-running anything.


def _rule(kind, e):
    if kind == "coverage":
        return _num(e["rate"]) <= _num(e["delta"]) + _num(e["halfwidth"])
    if kind == "as_envelope":
        return int(e["count"]) == 0
    if kind == "rate":
        return abs(_num(e["slope"]) - _num(e["target"])) <= _num(e["tol"])
    if kind == "lyapunov":
        return (_num(e["residual"]) <= LYAP_TOL and _num(e["gamma_c"]) < 1
                and _num(e["max_ratio"]) <= _num(e["gamma_c"]) + 1e-9)
    if kind == "truncation_shift":
        return _num(e["shift"]) <= _num(e["g"]) + SHIFT_TOL
    if kind == "enumeration":
        return _num(e["p_value"]) >= ENUM_ALPHA and int(e["off_atom"]) == 0
    if kind == "mgf_growth":
        lo = [_num(v) for v in e["log_lower"]]
        est = [_num(v) for v in e["log_estimate"]]
        return (all(a >= b - 1e-9 for a, b in zip(est, lo))
                and all(b > a for a, b in zip(lo, lo[1:]))
                and all(b > a for a, b in zip(est, est[1:])))
    raise ValueError("unknown check %r" % kind)


def recompute_verdicts(report):
    """Verdicts derived from the stored numbers of a report dict."""
    out = {}
    for key, e in report.get("coverage", {}).items():
        out["coverage:" + key] = _rule("coverage", e)
    if "as_envelope" in report:
        out["as_envelope"] = _rule("as_envelope", report["as_envelope"])
    if "rate" in report:
        out["rate"] = _rule("rate", report["rate"])
    for name, e in report.get("oracles", {}).items():
        out["oracle:" + name] = _rule(name, e)
    return out


# ---------------------------------------------------------------- references


def bound_references(scenario, spec, model, plan):
    """name -> array of bound values on |x_k - x*|_c^2 over k = 0..T."""
    T = plan.T
    ks = np.arange(T + 1, dtype=float)
    scale = scenario.bound_scale
    refs = {}
    if scenario.bound == "none":
        return refs, None
    ledger = scenario.ledger(spec, model)
    if scenario.bound == "hp":
        for d in scenario.deltas:
            refs["delta=%g" % d] = scale * hp_bound(ledger, ks, d)
        wc = worst_case_envelope(ledger.schedule, ledger.bounds, ledger.x0_error, ledger.x_star_norm)
        refs["almost_sure"] = scale * wc(ks, None) ** 2
    elif scenario.bound == "almost_sure":
        wc = worst_case_envelope(ledger.schedule, ledger.bounds, ledger.x0_error, ledger.x_star_norm)
        for d in scenario.deltas:
            refs["delta=%g" % d] = scale * wc(ks, None) ** 2
    elif scenario.bound == "unbounded":
        fn = scenario.ledger_fn(spec, model)
        for d in scenario.deltas:
            refs["delta=%g" % d] = scale * hp_bound_unbounded(fn, model, ks, d, T, spec.bounds.gamma_c)
    elif scenario.bound == "polyak":
        for d in scenario.deltas:
            v = np.full(T + 1, np.inf)
            v[1:] = scale * polyak_bound(ledger, ks[1:], d, iid=spec.iid)
            refs["delta=%g" % d] = v
    return refs, ledger


# ---------------------------------------------------------------- oracles


def _oracle_lyapunov(scenario, spec, n_pairs=1000, seed=0):
    lin = spec.meta.get("linear")
    if lin is None:
        raise ConfigError("the lyapunov oracle needs a linear_sa problem")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_pairs, spec.dim)) * 5
    y = rng.standard_normal((n_pairs, spec.dim)) * 5
    Ab = spec.A_bar
    num = spec.norm((x - y) @ Ab.T)
    den = spec.norm(x - y)
    return {"residual": lyapunov_residual(lin.A_bar, lin.P_bar), "gamma_c": float(spec.bounds.gamma_c),
            "max_ratio": float(np.max(num / den)), "n_pairs": n_pairs}


def _oracle_truncation(scenario, spec, model, T):
    d = min(scenario.deltas)
    gam = d / (2.0 * T)
    level = float(quantile_B(model, gam))
    shift, g = truncation_shift_check(spec, model, level, gam)
    return {"delta": d, "gamma": gam, "level": level, "shift": float(shift), "g": float(g)}


def _oracle_enumeration(scenario, spec, schedule, x0, n_paths, master_seed, workers):
    k = int(scenario.params.get("enum_k", 8))
    vals, probs, _ = enumerate_paths(spec, schedule, x0, k)
    atoms = vals[:, 0]
    plan = RunPlan(spec, scenario.noise_model(spec), schedule, k, checkpoints=[0, k], x0=x0)
    xk = monte_carlo(plan, n_paths, master_seed, workers).x_final[:, 0]
    # merge numerically equal atoms, then pool into bins of mass >= 5 / n
    order = np.argsort(atoms)
    a, p = atoms[order], probs[order]
    keep = np.concatenate([[True], np.diff(a) > 1e-9 * np.maximum(1.0, np.abs(a[1:]))])
    uniq = a[keep]
    mass = np.add.reduceat(p, np.flatnonzero(keep))
    idx = np.searchsorted(uniq, xk)
    idx = np.clip(idx, 0, len(uniq) - 1)
    left = np.clip(idx - 1, 0, len(uniq) - 1)
    near = np.where(np.abs(uniq[left] - xk) < np.abs(uniq[idx] - xk), left, idx)
    off = int(np.sum(np.abs(uniq[near] - xk) > 1e-9 * np.maximum(1.0, np.abs(xk))))
    counts = np.bincount(near, minlength=len(uniq)).astype(float)
    target = 5.0 / n_paths
    bins, acc_p, acc_c = [], 0.0, 0.0
    for m, c in zip(mass, counts):
        acc_p += m
        acc_c += c
        if acc_p >= target:
            bins.append((acc_p, acc_c))
            acc_p, acc_c = 0.0, 0.0
    if bins and acc_p > 0:
        bins[-1] = (bins[-1][0] + acc_p, bins[-1][1] + acc_c)
    exp = np.array([b[0] for b in bins]) * n_paths
    obs = np.array([b[1] for b in bins])
    stat = float(np.sum((obs - exp) ** 2 / exp)) if len(bins) > 1 else 0.0
    dof = max(len(bins) - 1, 1)
    return {"k": k, "n_atoms": int(len(uniq)), "n_bins": len(bins), "chi2": stat, "dof": dof,
            "p_value": float(chi2.sf(stat, dof)), "off_atom": off, "n_paths": int(n_paths)}


def _oracle_mgf(scenario, spec, schedule, x0, master_seed, n_samples=20000):
    a, b, N = (float(spec.meta[k]) for k in ("a", "b", "N"))
    z, h = schedule.z, schedule.h
    part = 1 if b == 1 else 2
    thresh = 1.0 / (2.0 - z) if part == 1 else 1.0 / (1.0 - z)
    beta = thresh + float(scenario.params.get("beta_offset", 0.1))
    lam = float(scenario.params.get("lam", 1.0))
    grid = [int(k) for k in scenario.params.get("k_grid", [10, 20, 40, 80])]
    lows, ests, rels = [], [], []
    for k in grid:
        scale = z * math.log(k + h)
        if part == 1:
            def g(x, k=k):
                return lam * ((k + h) ** z * x[:, 0] ** 2) ** beta
        else:
            def g(x, scale=scale):
                with np.errstate(divide="ignore"):
                    arg = np.maximum(scale + 2 * np.log(np.abs(x[:, 0])), 0.0)
                return lam * arg**beta
        lows.append(log_counterexample_lower_mgf(a, b, N, float(x0[0]), schedule, k, lam, beta))
        est, rel = iid_importance_mgf(spec, schedule, x0, k, g, [0.5, 0.5], n_samples,
                                      seed=master_seed, exclude=np.zeros(k, dtype=int))
        ests.append(est)
        rels.append(rel)
    return {"part": part, "beta": beta, "beta_threshold": thresh, "lam": lam, "k_grid": grid,
            "log_lower": lows, "log_estimate": ests, "log_rel_stderr": rels, "n_samples": n_samples,
            "statement": "consistent with divergence"}


# ---------------------------------------------------------------- driver


def fit_rate(checkpoints, q, window):
    """Least-squares slope of log q against log k over the window."""
    ks = np.asarray(checkpoints, dtype=float)
    q = np.asarray(q, dtype=float)
    m = (ks >= window[0]) & (ks <= window[1]) & (q > 0) & np.isfinite(q)
    if m.sum() < 3:
        raise BadParams("fewer than three checkpoints inside the rate window")
    x, y = np.log(ks[m]), np.log(q[m])
    xc = x - x.mean()
    slope = float(np.sum(xc * (y - y.mean())) / np.sum(xc**2))
    resid = y - y.mean() - slope * xc
    se = float(math.sqrt(np.sum(resid**2) / (m.sum() - 2) / np.sum(xc**2)))
    return slope, se, int(m.sum())


@dataclass
class ValidationReport:
    """Machine-readable result of ``run_validation``.

    ``data`` is what gets written; ``runtime`` stays out of it so that
    repeated runs with one seed produce identical files.
    """

    data: dict
    runtime: float = 0.0

    @property
    def verdicts(self):
        return self.data["verdicts"]

    @property
    def passed(self):
        return self.data["passed"]

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


def run_validation(scenario, n_paths=1000, master_seed=0, workers=1, horizon=None):
    """Simulate ``n_paths`` paths and judge every check of the scenario."""
    t0 = time.perf_counter()
    if horizon is not None:
        scenario = replace(scenario, horizon=int(horizon))
    spec = scenario.spec()
    model = scenario.noise_model(spec)
    plan = scenario.plan()
    sched = plan.schedule
    refs, ledger = bound_references(scenario, spec, model, plan)
    if scenario.kind == "counterexample" and not refs and scenario.rate_window is None:
        mc = None
    else:
        mc = monte_carlo(plan, n_paths, master_seed, workers, refs)
    try:
        adm = scenario.admissibility(spec, model).to_dict()
    except SAError as exc:
        adm = {"ok": False, "reason": str(exc)}
    data = {
        "schema": SCHEMA,
        "scenario": scenario.name,
        "config": scenario.to_config(),
        "n_paths": int(n_paths),
        "master_seed": int(master_seed),
        "horizon": plan.T,
        "schedule": sched.to_dict(),
        "regime": scenario.regime(spec),
        "admissibility": adm,
        "inadmissible_by_design": scenario.inadmissible_by_design,
        "ledger": ledger.to_dict() if ledger is not None else None,
    }
    if mc is not None:
        data["checkpoints"] = plan.checkpoints
        data["quantiles"] = {k: v for k, v in mc.quantiles.items()}
        data["nonfinite_paths"] = mc.nonfinite_paths
    cov = {}
    for name, v in (mc.violations.items() if mc is not None else ()):
        if name == "almost_sure":
            data["as_envelope"] = dict(v)
            continue
        cov[name] = dict(v, delta=float(name.split("=")[1]), n=int(n_paths))
    if cov:
        data["coverage"] = cov
    if scenario.rate_window is not None:
        slope, se, npts = fit_rate(plan.checkpoints, mc.quantiles["q%g" % scenario.rate_quantile],
                                   scenario.rate_window)
        data["rate"] = {"slope": slope, "stderr": se, "n_points": npts, "window": list(scenario.rate_window),
                        "quantile": scenario.rate_quantile, "target": -sched.z, "tol": scenario.rate_tol}
    oracles = {}
    x0 = scenario.x0_array(spec)
    for name in scenario.oracles:
        if name == "as_envelope":
            continue  # judged from the almost-sure reference above
        if name == "lyapunov":
            oracles[name] = _oracle_lyapunov(scenario, spec)
        elif name == "truncation_shift":
            oracles[name] = _oracle_truncation(scenario, spec, model, plan.T)
        elif name == "enumeration":
            oracles[name] = _oracle_enumeration(scenario, spec, sched, x0, n_paths, master_seed, workers)
        elif name == "mgf_growth":
            oracles[name] = _oracle_mgf(scenario, spec, sched, x0, master_seed)
        else:
            raise ConfigError("unknown oracle %r" % name)
    if oracles:
        data["oracles"] = oracles
    data = _clean(data)
    data["verdicts"] = recompute_verdicts(data)
    data["passed"] = all(data["verdicts"].values())
    return ValidationReport(data, time.perf_counter() - t0)
