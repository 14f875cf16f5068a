"""SA recursion x_{k+1} = x_k + alpha_k (F(x_k, S_k) + Z_k - x_k), its projected,
truncated and averaged variants, supermartingale diagnostics and the Monte
Carlo driver.

Randomness: path i of a run with master seed m draws from its own counter-based
stream Philox(key=(m, i)).  Per step it consumes one uniform for the chain
(S_0 ~ pi, then S_k ~ P(S_{k-1}, .)) followed by ``model.n_uniforms`` for
Z_k, so a path is reproducible in isolation.  Paths are simulated in fixed
blocks of BLOCK, and each block is a pure function of its path indices, so
aggregates do not depend on the number of workers.
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from statistics import NormalDist
from typing import Optional

import multiprocessing as mp
import numpy as np
from scipy.special import logsumexp

from .bound_calculator import StepSchedule, check_admissible, worst_case_envelope
from .errors import BadParams, LedgerMissing, NoConvergence, NonFinite, RegimeUnsupported
from .lyapunov_envelope import moreau_value_and_grad
from .markov_core import cumulative_rows
from .noise_models import from_uniforms, truncated_mean, truncation_bias_g
from .norms import Norm
from .problem_specs import average_operator, operator_poisson

BLOCK = 1024
CHUNK = 256
MODES = ("plain", "projected", "truncated", "polyak")
# ratios within this relative slack of 1 are rounding, not violations
RATIO_TOL = 1e-12


def path_rng(master_seed, index):
    """Generator for path ``index`` of a run seeded with ``master_seed``."""
    key = np.array([int(master_seed) % 2**64, int(index) % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def geometric_checkpoints(h, T, ratio=1.5):
    """{0, T} together with ceil(h ratio^j) <= T, sorted and unique."""
    T = int(T)
    pts = {0, T}
    v = float(h)
    while math.ceil(v) <= T:
        pts.add(int(math.ceil(v)))
        v *= ratio
    return np.array(sorted(pts), dtype=np.int64)


def wilson_interval(count, n, level=0.95):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise BadParams("n must be positive")
    zq = NormalDist().inv_cdf(0.5 + level / 2)
    p = count / n
    den = 1 + zq**2 / n
    mid = (p + zq**2 / (2 * n)) / den
    half = zq * math.sqrt(p * (1 - p) / n + zq**2 / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


@dataclass(frozen=True)
class RunPlan:
    """Everything a simulation needs apart from the seed.

    Parameters
    ----------
    spec : ProblemSpec
    model : NoiseModel
    schedule : StepSchedule
    T : int
        Horizon; errors are tracked for k = 0..T.
    checkpoints : array of int, optional
        Defaults to ``geometric_checkpoints(h, T)``.
    x0 : array, optional
        Start point (default: the origin).
    mode : {"plain", "projected", "truncated", "polyak"}
    radius : float
        Ball radius for ``projected``.
    level : float
        Truncation level for ``truncated`` (may be inf).
    s0 : int, optional
        Fixed initial state; by default S_0 ~ pi.
    """

    spec: object
    model: object
    schedule: StepSchedule
    T: int
    checkpoints: Optional[tuple] = None
    x0: Optional[tuple] = None
    mode: str = "plain"
    radius: Optional[float] = None
    level: Optional[float] = None
    s0: Optional[int] = None

    def __post_init__(self):
        if int(self.T) < 1:
            raise BadParams("the horizon must be at least 1")
        if self.mode not in MODES:
            raise BadParams("unknown mode %r" % self.mode)
        if self.mode == "projected" and not (self.radius is not None and self.radius > 0):
            raise BadParams("projection needs a positive radius")
        if self.mode == "truncated" and not (self.level is not None and self.level > 0):
            raise BadParams("truncation needs a positive level")
        if self.model.dim != self.spec.dim:
            raise BadParams("noise and problem dimensions differ")
        ck = geometric_checkpoints(self.schedule.h, self.T) if self.checkpoints is None else self.checkpoints
        ck = np.asarray(ck, dtype=np.int64)
        if ck.ndim != 1 or len(ck) == 0 or np.any(np.diff(ck) <= 0) or ck[0] < 0 or ck[-1] > self.T:
            raise BadParams("checkpoints must be strictly increasing within [0, T]")
        object.__setattr__(self, "checkpoints", tuple(int(k) for k in ck))
        x0 = np.zeros(self.spec.dim) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.spec.dim,):
            raise BadParams("x0 has the wrong dimension")
        object.__setattr__(self, "x0", tuple(float(v) for v in x0))
        object.__setattr__(self, "T", int(self.T))

    @property
    def x0_array(self):
        return np.array(self.x0)

    def alphas(self):
        return self.schedule.alpha_k(np.arange(self.T, dtype=float))

    def x0_error(self):
        return float(self.spec.norm(self.x0_array - self.spec.x_star))


@dataclass
class Trajectory:
    """One simulated path.

    ``errors_sq[i]`` is |x_k - x*|_c^2 at k = ``checkpoints[i]`` (for the
    polyak mode, of the averaged iterate y_k).  ``sup_ratio`` is the maximum
    over k <= T of errors_sq(k) / reference(k) (nan without a reference).
    """

    checkpoints: np.ndarray
    errors_sq: np.ndarray
    max_error_sq: float
    sup_ratio: float
    projection_hits: int
    truncation_hits: int
    seed: tuple
    nonfinite_step: int = -1
    x_final: Optional[np.ndarray] = None
    path: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None

    def rows(self, reference=None):
        """CSV rows (k, error_sq, bound, violated) at the checkpoints."""
        out = []
        for k, e in zip(self.checkpoints, self.errors_sq):
            b = float(reference[k]) if reference is not None else float("nan")
            out.append((int(k), float(e), b, int(reference is not None and not e <= b * (1.0 + RATIO_TOL))))
        return out


def write_trajectory_csv(path, traj, reference=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "error_sq", "bound", "violated"])
        for k, e, b, v in traj.rows(reference):
            w.writerow([k, repr(e), repr(b), v])


# ---------------------------------------------------------------- the core loop


@dataclass
class _Job:
    plan: RunPlan
    inv_refs: Optional[np.ndarray]  # (T + 1, n_refs)
    record: bool = False


def _reference_inverse(references, T):
    """1 / bound on k = 0..T for every reference, stacked as (T + 1, n_refs)."""
    if not references:
        return None
    ks = np.arange(T + 1, dtype=float)
    cols = []
    for ref in references.values():
        v = np.asarray(ref(ks) if callable(ref) else ref, dtype=float).reshape(-1)
        if v.shape != (T + 1,):
            raise BadParams("a reference needs T + 1 values")
        if np.any(np.isnan(v)) or np.any(v < 0):
            raise BadParams("reference values must be non-negative numbers")
        with np.errstate(divide="ignore"):
            cols.append(1.0 / v)
    return np.ascontiguousarray(np.stack(cols, axis=1))


def _run_block(job, master_seed, start, stop):
    plan = job.plan
    spec, model, T = plan.spec, plan.model, plan.T
    n, d = stop - start, spec.dim
    norm = spec.norm
    gens = [path_rng(master_seed, i) for i in range(start, stop)]
    m = 1 + model.n_uniforms
    alphas = plan.alphas().tolist()
    ck_col = [-1] * (T + 1)
    for j, k in enumerate(plan.checkpoints):
        ck_col[k] = j
    inv = job.inv_refs
    n_refs = 0 if inv is None else inv.shape[1]

    # chain sampling by comparing against the columns of the cumulative rows
    cum = cumulative_rows(spec.chain.P)
    cols = [np.ascontiguousarray(cum[:, j]) for j in range(cum.shape[1] - 1)]
    pi_cum = np.cumsum(spec.chain.pi)[:-1].tolist()

    scalar = d == 1 and spec.affine
    if scalar:
        A = np.ascontiguousarray(spec.A[:, 0, 0])
        c = np.ascontiguousarray(spec.c[:, 0])
        xs = float(spec.x_star[0])
        scale2 = float(norm.sq(np.ones(1)))
        x = np.full(n, plan.x0[0])
        err = lambda v: scale2 * (v - xs) ** 2
    else:
        xs = spec.x_star
        x = np.tile(plan.x0_array, (n, 1))
        err = lambda v: norm.sq(v - xs)
        if spec.affine:
            A, c = spec.A, spec.c

    def F(v, s):
        if scalar:
            return A.take(s) * v + c.take(s)
        if spec.affine:
            As = A[s]
            out = c[s].copy()
            for j in range(d):
                out += As[:, :, j] * v[:, j:j + 1]
            return out
        return spec.F(v, s)

    polyak = plan.mode == "polyak"
    projected = plan.mode == "projected"
    truncating = plan.mode == "truncated" and not math.isinf(plan.level)
    y = x.copy() if polyak else None

    errs = np.full((n, len(plan.checkpoints)), np.nan)
    sup = np.zeros((n_refs, n))
    max_err = np.zeros(n)
    proj_hits = np.zeros(n, dtype=np.int64)
    trunc_hits = np.zeros(n, dtype=np.int64)
    bad_step = np.full(n, -1, dtype=np.int64)
    path = np.empty((n, T + 1, d)) if job.record else None
    states = np.empty((n, T), dtype=np.int64) if job.record else None

    def observe(k, e):
        nonlocal max_err, sup
        if not np.isfinite(e).all():
            fin = np.isfinite(e)
            new = ~fin & (bad_step < 0)
            bad_step[new] = k
            e = np.where(fin, e, np.inf)
        max_err = np.fmax(max_err, e)
        if n_refs:
            with np.errstate(invalid="ignore"):
                sup = np.fmax(sup, inv[k][:, None] * e[None, :])
        col = ck_col[k]
        if col >= 0:
            errs[:, col] = e

    observe(0, err(x))
    if job.record:
        path[:, 0] = x.reshape(n, d)
    buf = np.empty((n, CHUNK, m))
    s = None
    for c0 in range(0, T, CHUNK):
        C = min(CHUNK, T - c0)
        for i, g in enumerate(gens):
            g.random(out=buf[i, :C])
        U = np.ascontiguousarray(buf[:, :C].transpose(1, 2, 0))  # (C, m, n)
        uc = 1.0 - U[:, 0]  # uniforms in (0, 1]
        Z = from_uniforms(model, U[:, 1:].transpose(0, 2, 1))  # (C, n, d)
        if truncating:
            keep = model.norm(Z) <= plan.level
            trunc_hits += (~keep).sum(axis=0)
            Z = np.where(keep[..., None], Z, 0.0)
        if scalar:
            Z = Z[..., 0]
        for j in range(C):
            k = c0 + j
            u = uc[j]
            if k == 0:
                if plan.s0 is None:
                    s = np.zeros(n, dtype=np.intp)
                    for p in pi_cum:
                        s += p < u
                else:
                    s = np.full(n, int(plan.s0), dtype=np.intp)
            else:
                s2 = np.zeros(n, dtype=np.intp)
                for col in cols:
                    s2 += col.take(s) < u
                s = s2
            if polyak:
                y = y + (x - y) / (k + 1)
            with np.errstate(over="ignore", invalid="ignore"):
                x = x + alphas[k] * (F(x, s) + Z[j] - x)
            if projected:
                if scalar:
                    dev = x - xs
                    hit = np.sqrt(scale2) * np.abs(dev) > plan.radius
                    if hit.any():
                        r = plan.radius / math.sqrt(scale2)
                        x = np.where(hit, xs + np.clip(dev, -r, r), x)
                else:
                    x, hit = norm.project(x, xs, plan.radius)
                proj_hits += hit
            if job.record:
                path[:, k + 1] = x.reshape(n, d)
                states[:, k] = s
            with np.errstate(over="ignore", invalid="ignore"):
                observe(k + 1, err(y if polyak else x))

    return {
        "errors": errs,
        "max_err": max_err,
        "sup": sup,
        "proj_hits": proj_hits,
        "trunc_hits": trunc_hits,
        "bad_step": bad_step,
        "x_final": x.reshape(n, d),
        "path": path,
        "states": states,
    }


_WORKER_JOB = None


def _set_worker_job(job):
    global _WORKER_JOB
    _WORKER_JOB = job


def _worker_block(args):
    return _run_block(_WORKER_JOB, *args)


def _run_paths(job, n_paths, master_seed, workers=1):
    """Simulate paths 0..n_paths-1 and concatenate the block results in order."""
    blocks = [(master_seed, a, min(a + BLOCK, n_paths)) for a in range(0, n_paths, BLOCK)]
    if workers > 1 and len(blocks) > 1 and "fork" in mp.get_all_start_methods():
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_set_worker_job, initargs=(job,)) as ex:
            parts = list(ex.map(_worker_block, blocks))
    else:
        parts = [_run_block(job, *b) for b in blocks]
    out = {}
    for key in parts[0]:
        if parts[0][key] is None:
            out[key] = None
        else:
            out[key] = np.concatenate([p[key] for p in parts], axis=-1 if key == "sup" else 0)
    return out


def _warn_if_inadmissible(plan, bounds=None, env=None):
    if env is None:
        return
    verdict = check_admissible(plan.schedule, bounds or plan.spec.bounds, env,
                               float(plan.spec.norm(plan.spec.x_star)))
    if not verdict.ok:
        warnings.warn("schedule is not admissible: " + "; ".join(verdict.failures), stacklevel=3)


def _single(plan, seed, reference, record, env=None):
    _warn_if_inadmissible(plan, env=env)
    master, index = (seed, 0) if np.isscalar(seed) else seed
    refs = None if reference is None else {"ref": reference}
    job = _Job(plan, _reference_inverse(refs, plan.T), record)
    r = _run_block(job, master, index, index + 1)
    if r["bad_step"][0] >= 0:
        raise NonFinite("iterate overflowed", step=int(r["bad_step"][0]))
    return Trajectory(
        checkpoints=np.array(plan.checkpoints),
        errors_sq=r["errors"][0],
        max_error_sq=float(r["max_err"][0]),
        sup_ratio=float(r["sup"][0, 0]) if reference is not None else float("nan"),
        projection_hits=int(r["proj_hits"][0]),
        truncation_hits=int(r["trunc_hits"][0]),
        seed=(int(master), int(index)),
        x_final=r["x_final"][0],
        path=None if r["path"] is None else r["path"][0],
        states=None if r["states"] is None else r["states"][0],
    )


def run_sa(spec, model, schedule, T, checkpoints=None, seed=0, x0=None, reference=None,
           record=False, s0=None, env=None):
    """Simulate one path of the plain recursion.

    Parameters
    ----------
    seed : int or (master_seed, path_index)
    reference : callable or array, optional
        Bound on |x_k - x*|_c^2 for k = 0..T; sets ``sup_ratio``.
    record : bool
        Keep the whole path and the visited states.
    env : EnvelopeConstants, optional
        When given, an inadmissible schedule triggers a warning.

    Raises
    ------
    NonFinite
        If an iterate overflows; ``step`` holds the first bad k.
    """
    plan = RunPlan(spec, model, schedule, T, checkpoints, x0, "plain", s0=s0)
    return _single(plan, seed, reference, record, env)


def run_projected(spec, model, schedule, radius, T, checkpoints=None, seed=0, x0=None,
                  reference=None, record=False, s0=None):
    """Like ``run_sa`` with every step followed by the projection onto
    {|x - x*|_c <= radius}; ``projection_hits`` counts activations."""
    plan = RunPlan(spec, model, schedule, T, checkpoints, x0, "projected", radius=radius, s0=s0)
    return _single(plan, seed, reference, record)


def shifted_fixed_point(spec, shift, tol=1e-13, max_iter=1_000_000):
    """Fixed point of H_bar(x) = F_bar(x) + shift by plain iteration."""
    shift = np.asarray(shift, dtype=float)
    x = np.array(spec.x_star, dtype=float)
    for _ in range(max_iter):
        nxt = average_operator(spec, x) + shift
        if spec.norm(nxt - x) <= tol * (1.0 + spec.norm(x)):
            return nxt
        x = nxt
    raise NoConvergence("fixed-point iteration for the shifted operator did not converge")


def run_truncated(spec, model, schedule, level, T, checkpoints=None, seed=0, x0=None,
                  reference=None, record=False, s0=None):
    """Recursion with the H-operator and truncated-and-centred noise.

    With m_B = E[Z 1{|Z|_c <= level}], H(x, s) = F(x, s) + m_B and the
    centred noise Z 1{|Z|_c <= level} - m_B add up to F(x, s) + Z 1{...},
    which is what is simulated (so level = inf reproduces ``run_sa`` exactly).
    Returns the trajectory (errors relative to x*) and the fixed point x_tilde
    of H_bar.

    Raises
    ------
    BadParams
        If gamma_c < 1 is not declared.
    NoConvergence
        If the fixed-point iteration for x_tilde fails.
    """
    gc = spec.bounds.gamma_c
    if gc is None or not gc < 1:
        raise BadParams("truncation needs a declared gamma_c < 1")
    plan = RunPlan(spec, model, schedule, T, checkpoints, x0, "truncated", level=level, s0=s0)
    traj = _single(plan, seed, reference, record)
    shift = truncated_mean(model, level)
    x_tilde = shifted_fixed_point(spec, shift)
    return traj, x_tilde


def truncation_shift_check(spec, model, level, gamma):
    """|x* - x_tilde|_c together with the g(gamma) bound, where level = B(gamma)."""
    x_tilde = shifted_fixed_point(spec, truncated_mean(model, level))
    return float(spec.norm(spec.x_star - x_tilde)), truncation_bias_g(model, gamma, spec.bounds.gamma_c)


def run_polyak(spec, model, schedule, T, checkpoints=None, seed=0, x0=None, reference=None,
               record=False, s0=None):
    """Errors of the running average y_k = (1/k) sum_{i<k} x_i (y_0 := x_0)."""
    plan = RunPlan(spec, model, schedule, T, checkpoints, x0, "polyak", s0=s0)
    return _single(plan, seed, reference, record)


def polyak_average(xs):
    """y_k = (1/k) sum_{i<k} x_i for k = 1..len(xs), maintained incrementally."""
    xs = np.asarray(xs, dtype=float)
    y = np.zeros_like(xs[0])
    out = np.empty_like(xs)
    for k in range(len(xs)):
        y = y + (xs[k] - y) / (k + 1)
        out[k] = y
    return out


# ---------------------------------------------------------------- Monte Carlo


@dataclass
class MonteCarloResult:
    """Aggregates of a Monte Carlo run, plus the per-path arrays behind them."""

    n_paths: int
    master_seed: int
    checkpoints: np.ndarray
    quantiles: dict
    mean_error_sq: np.ndarray
    violations: dict
    nonfinite_paths: int
    projection_hits: int
    truncation_hits: int
    errors: np.ndarray = field(repr=False)
    sup_ratios: dict = field(repr=False)
    x_final: np.ndarray = field(repr=False)

    def to_dict(self):
        return {
            "n_paths": self.n_paths,
            "master_seed": self.master_seed,
            "checkpoints": [int(k) for k in self.checkpoints],
            "quantiles": {q: [float(v) for v in arr] for q, arr in self.quantiles.items()},
            "mean_error_sq": [float(v) for v in self.mean_error_sq],
            "violations": self.violations,
            "nonfinite_paths": self.nonfinite_paths,
            "projection_hits": self.projection_hits,
            "truncation_hits": self.truncation_hits,
        }


QUANTILES = (0.5, 0.9, 0.99)


def monte_carlo(plan, n_paths, master_seed=0, workers=1, references=None, quantiles=QUANTILES):
    """Run ``n_paths`` independent paths of ``plan``.

    Parameters
    ----------
    references : dict, optional
        name -> bound on |x_k - x*|_c^2 (callable on k or an array over
        k = 0..T).  A path violates a reference when its sup ratio exceeds 1;
        paths that overflow always count as violations.
    workers : int
        Processes used; blocks are fixed, so the result does not depend on it.
    """
    n_paths = int(n_paths)
    if n_paths < 1:
        raise BadParams("n_paths must be at least 1")
    references = dict(references or {})
    job = _Job(plan, _reference_inverse(references, plan.T))
    r = _run_paths(job, n_paths, int(master_seed), int(workers))
    errors = r["errors"]
    bad = r["bad_step"] >= 0
    quant = {}
    with np.errstate(invalid="ignore"):
        for q in quantiles:
            quant["q%g" % q] = np.quantile(errors, q, axis=0)
        mean = errors.mean(axis=0)
    violations, sup_ratios = {}, {}
    for i, name in enumerate(references):
        ratios = r["sup"][i]
        sup_ratios[name] = ratios
        count = int(np.sum((ratios > 1.0 + RATIO_TOL) | bad))
        lo, hi = wilson_interval(count, n_paths)
        violations[name] = {
            "count": count,
            "rate": count / n_paths,
            "ci_low": lo,
            "ci_high": hi,
            "halfwidth": (hi - lo) / 2,
            "max_ratio": float(np.max(ratios)),
        }
    return MonteCarloResult(
        n_paths=n_paths,
        master_seed=int(master_seed),
        checkpoints=np.array(plan.checkpoints),
        quantiles=quant,
        mean_error_sq=mean,
        violations=violations,
        nonfinite_paths=int(bad.sum()),
        projection_hits=int(r["proj_hits"].sum()),
        truncation_hits=int(r["trunc_hits"].sum()),
        errors=errors,
        sup_ratios=sup_ratios,
        x_final=r["x_final"],
    )


def simulate_paths(plan, n_paths, master_seed=0, workers=1):
    """Full recorded paths (n_paths, T + 1, d) and states (n_paths, T).

    Meant for short horizons (audits, enumeration checks, diagnostics).
    """
    r = _run_paths(_Job(plan, None, record=True), int(n_paths), int(master_seed), int(workers))
    return r["path"], r["states"]


# ---------------------------------------------------------------- exact oracles


def enumerate_paths(spec, schedule, x0, k, exact=False):
    """Exact law of x_k for the noise-free recursion, by listing all n^k state
    sequences (S_0 ~ pi).

    Returns (values, probabilities, sequences).  With ``exact=True`` the
    arithmetic is carried out in Fractions (affine scalar problems with a
    rational schedule, z = 1; probabilities are rounded to the nearest
    fraction with denominator below 1e9), otherwise vectorised in floats.
    """
    chain = spec.chain
    n = chain.n_states
    k = int(k)
    if n**k > 2_000_000:
        raise BadParams("too many paths to enumerate")
    seqs = np.array(np.meshgrid(*[np.arange(n)] * k, indexing="ij")).reshape(k, -1).T if k else np.zeros((1, 0), int)
    if exact:
        if not (spec.affine and spec.dim == 1 and schedule.z == 1.0):
            raise BadParams("exact enumeration needs a scalar affine problem and z = 1")
        A = [Fraction(float(a)) for a in spec.A[:, 0, 0]]
        c = [Fraction(float(v)) for v in spec.c[:, 0]]
        # transition probabilities such as 2/3 are stored as floats; recover
        # the intended small-denominator rationals
        P = [[Fraction(float(p)).limit_denominator(10**9) for p in row] for row in chain.P]
        pi = [Fraction(float(p)).limit_denominator(10**9) for p in chain.pi]
        al, h = Fraction(schedule.alpha), Fraction(schedule.h)
        vals, probs = [], []
        for seq in seqs:
            x, p = Fraction(float(np.ravel(x0)[0])), Fraction(1)
            for i, s in enumerate(seq):
                p *= pi[s] if i == 0 else P[seq[i - 1]][s]
                x = x + al / (i + h) * (A[s] * x + c[s] - x)
            vals.append(x)
            probs.append(p)
        return vals, probs, seqs
    m = seqs.shape[0]
    x = np.tile(np.asarray(x0, dtype=float).reshape(-1), (m, 1))
    logp = np.zeros(m)
    alphas = schedule.alpha_k(np.arange(k, dtype=float))
    with np.errstate(divide="ignore"):
        lpi, lP = np.log(chain.pi), np.log(chain.P)
    for i in range(k):
        s = seqs[:, i]
        logp += lpi[s] if i == 0 else lP[seqs[:, i - 1], s]
        x = x + alphas[i] * (spec.F(x, s) - x)
    return x, np.exp(logp), seqs


def iid_importance_mgf(spec, schedule, x0, k, log_integrand, proposal, n_samples, seed, exclude=None):
    """Importance-sampled log E[exp(log_integrand(x_k))] for an i.i.d. chain
    and no additive noise.

    States are drawn i.i.d. from ``proposal`` and reweighted by pi/proposal.
    ``exclude`` (a state sequence) removes one path from the sampled part;
    its exact contribution is added back, which makes the estimate never
    smaller than that single-path term.

    Returns (log_estimate, log_stderr_relative) where the second value is
    log of the standard error divided by the estimate (IS part only).
    """
    if not spec.iid:
        raise BadParams("importance sampling here assumes an i.i.d. chain")
    pi = spec.chain.pi
    q = np.asarray(proposal, dtype=float)
    if q.shape != pi.shape or np.any(q <= 0) or abs(q.sum() - 1) > 1e-12:
        raise BadParams("proposal must be a positive distribution on the states")
    rng = np.random.Generator(np.random.Philox(key=np.array([int(seed), int(k)], dtype=np.uint64)))
    cq = np.cumsum(q)
    cq[-1] = 1.0
    S = np.searchsorted(cq, 1.0 - rng.random((n_samples, k)), side="left")
    lw = np.sum(np.log(pi)[S] - np.log(q)[S], axis=1)
    alphas = schedule.alpha_k(np.arange(k, dtype=float))
    x = np.tile(np.asarray(x0, dtype=float).reshape(-1), (n_samples, 1))
    for i in range(k):
        x = x + alphas[i] * (spec.F(x, S[:, i]) - x)
    terms = lw + log_integrand(x)
    parts = []
    if exclude is not None:
        ex = np.asarray(exclude)
        hit = np.all(S == ex[None, :], axis=1)
        terms = np.where(hit, -np.inf, terms)
        xe = np.asarray(x0, dtype=float).reshape(1, -1)
        for i in range(k):
            xe = xe + alphas[i] * (spec.F(xe, ex[i:i + 1]) - xe)
        parts.append(float(np.sum(np.log(pi)[ex]) + log_integrand(xe)[0]))
    log_is = logsumexp(terms) - math.log(n_samples)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.exp(terms - np.max(terms))
        rel = np.std(w, ddof=1) / math.sqrt(n_samples) / np.mean(w) if np.any(w > 0) else 0.0
    parts.append(log_is)
    return float(logsumexp(parts)), float(math.log(rel) if rel > 0 else -math.inf)


# ---------------------------------------------------------------- supermartingale


@dataclass
class SupermartingaleDiag:
    """Diagnostics along a replayed path for k = 1..K.

    ``lyap_arg`` is M(x_k - x*) + alpha_{k-1} d_k + alpha_{k-1} L_s L2 / 4,
    ``Zexp`` is lambda_k times it and ``log_Mbar`` subtracts
    D3 sum_{i<k} alpha_i.
    """

    k: np.ndarray
    lambda_k: np.ndarray
    d_k: np.ndarray
    lyap_arg: np.ndarray
    Zexp: np.ndarray
    log_Mbar: np.ndarray
    lambda_nonincreasing: bool

    @property
    def Mbar(self):
        return np.exp(self.log_Mbar)

    def nonnegative(self, tol=0.0):
        return bool(np.all(self.lyap_arg >= -tol))


class _PoissonMap:
    """x -> (P V_x) over all states; affine problems use the exact linear map."""

    def __init__(self, spec):
        self.spec = spec
        P = spec.chain.P
        if spec.affine:
            d = spec.dim
            V0 = operator_poisson(spec, np.zeros(d))
            W = np.stack([operator_poisson(spec, e) - V0 for e in np.eye(d)], axis=-1)  # (n, d, d)
            self.PV0 = P @ V0
            self.PW = np.tensordot(P, W, axes=1)
        self._cache = {}

    def __call__(self, x, s_prev):
        """(P V_x)(s_prev) for rows x (m, d) and states s_prev (m,)."""
        if self.spec.affine:
            return self.PV0[s_prev] + np.einsum("mij,mj->mi", self.PW[s_prev], x)
        out = np.empty_like(x)
        for i, (xi, si) in enumerate(zip(x, s_prev)):
            key = xi.tobytes()
            PV = self._cache.get(key)
            if PV is None:
                PV = self.spec.chain.P @ operator_poisson(self.spec, xi)
                self._cache[key] = PV
            out[i] = PV[si]
        return out


def _diag_setup(spec, env, ledger):
    if ledger is None:
        raise LedgerMissing("supermartingale diagnostics need a constants ledger")
    if not math.isfinite(ledger.bounds.B2):
        raise RegimeUnsupported("diagnostics need bounded noise")
    led = ledger
    T_fn = worst_case_envelope(led.schedule, led.bounds, led.x0_error, led.x_star_norm).bounding_sequence
    return T_fn, Norm("euclidean", spec.dim)


def _log_mbar(spec, env, ledger, T_fn, norm_s, pmap, k, x, s_prev):
    """(lambda_k, d_k, lyap_arg, Zexp, log Mbar_k) for rows x with state S_{k-1} = s_prev."""
    sch = ledger.schedule
    M, G = moreau_value_and_grad(env, spec.norm, norm_s, x - spec.x_star)
    dk = np.sum(G * pmap(x, s_prev), axis=-1)
    a_prev = float(sch.alpha_k(k - 1))
    arg = M + a_prev * dk + a_prev * env.L_s * ledger.bounds.L2 / 4
    lam = ledger.theta / (float(sch.alpha_k(k)) * float(T_fn(np.array(float(k)))))
    disc = ledger.D3 * float(np.sum(sch.alpha_k(np.arange(k, dtype=float))))
    return lam, dk, arg, lam * arg, lam * arg - disc


def supermartingale_diag(spec, env, ledger, path, states, ks=None):
    """Replay a recorded path and evaluate lambda_k, d_k, the exponential
    argument and log Mbar_k.

    d_k uses E[V_{x_k}(S_k) | F_k] = (P V_{x_k})(S_{k-1}), with the Poisson
    family recorded on the spec.

    Parameters
    ----------
    path : ndarray (T + 1, d)
    states : ndarray (T,)
    ks : iterable of int, optional
        Steps to diagnose (1 <= k <= T); default all.

    Raises
    ------
    LedgerMissing
    RegimeUnsupported
        Unbounded noise (B2 = inf).
    """
    T_fn, norm_s = _diag_setup(spec, env, ledger)
    path = np.asarray(path, dtype=float)
    states = np.asarray(states)
    ks = np.arange(1, len(states) + 1) if ks is None else np.asarray(list(ks), dtype=int)
    if np.any(ks < 1) or np.any(ks > len(states)):
        raise BadParams("diagnosed steps must lie in 1..T")
    pmap = _PoissonMap(spec)
    rows = [_log_mbar(spec, env, ledger, T_fn, norm_s, pmap, int(k), path[k][None], states[k - 1:k]) for k in ks]
    lam = np.array([r[0] for r in rows])
    sch = ledger.schedule
    Tk = T_fn(np.asarray(ks, dtype=float)) * sch.alpha_k(np.asarray(ks, dtype=float))
    return SupermartingaleDiag(
        k=ks,
        lambda_k=lam,
        d_k=np.array([r[1][0] for r in rows]),
        lyap_arg=np.array([r[2][0] for r in rows]),
        Zexp=np.array([r[3][0] for r in rows]),
        log_Mbar=np.array([r[4][0] for r in rows]),
        lambda_nonincreasing=bool(np.all(np.diff(Tk) >= -1e-15 * np.abs(Tk[1:]))),
    )


def drift_probe(spec, model, env, ledger, k, s_prev, x_k, n_inner, seed):
    """Nested Monte Carlo estimate of E[Mbar_{k+1} | F_k] / Mbar_k.

    F_k fixes x_k and S_{k-1}; S_k is integrated exactly over P(S_{k-1}, .)
    and Z_k by ``n_inner`` draws per next state.

    Returns (ratio_estimate, stderr).
    """
    T_fn, norm_s = _diag_setup(spec, env, ledger)
    pmap = _PoissonMap(spec)
    x_k = np.asarray(x_k, dtype=float).reshape(1, -1)
    _, _, _, _, log_now = _log_mbar(spec, env, ledger, T_fn, norm_s, pmap, k, x_k, np.array([s_prev]))
    rng = np.random.Generator(np.random.Philox(key=np.array([int(seed), int(k)], dtype=np.uint64)))
    a = float(ledger.schedule.alpha_k(k))
    est, var = 0.0, 0.0
    for s, p in enumerate(spec.chain.P[s_prev]):
        if p == 0:
            continue
        m = model.n_uniforms
        Z = from_uniforms(model, rng.random((n_inner, m)) if m else np.zeros((n_inner, 0)))
        sv = np.full(n_inner, s)
        x1 = x_k + a * (spec.F(np.repeat(x_k, n_inner, axis=0), sv) + Z - x_k)
        _, _, _, _, log_next = _log_mbar(spec, env, ledger, T_fn, norm_s, pmap, k + 1, x1, sv)
        r = np.exp(log_next - log_now[0])
        est += p * r.mean()
        var += p * p * r.var(ddof=1) / n_inner
    return float(est), float(math.sqrt(var))
