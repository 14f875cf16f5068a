import csv
import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sa_concentration.bound_calculator import (
    StepSchedule,
    admissible_schedule,
    constants_ledger,
    counterexample_path,
    worst_case_envelope,
)
from sa_concentration.errors import BadParams, LedgerMissing, NonFinite
from sa_concentration.lyapunov_envelope import envelope_for
from sa_concentration.markov_core import MarkovChain
from sa_concentration.noise_models import NoiseModel, quantile_B, truncated_mean
from sa_concentration.norms import Norm
from sa_concentration.problem_specs import affine_problem, contraction_demo, scalar_counterexample, stationary_mean
from sa_concentration.simulation_engine import (
    BLOCK,
    RunPlan,
    drift_probe,
    enumerate_paths,
    geometric_checkpoints,
    iid_importance_mgf,
    monte_carlo,
    polyak_average,
    run_polyak,
    run_projected,
    run_sa,
    run_truncated,
    simulate_paths,
    supermartingale_diag,
    truncation_shift_check,
    wilson_interval,
    write_trajectory_csv,
)

QUIET = NoiseModel("point_mass", 1)


def demo_setup(regime="negative", B2=0.5, z=1.0):
    spec = contraction_demo(regime)
    b = replace(spec.bounds, B2=B2)
    env = envelope_for(spec.norm, b.gamma_c)
    xs = float(spec.norm(spec.x_star))
    sch = admissible_schedule(b, env, z, xs)
    return spec, b, env, sch, xs


def test_one_step_collapse():
    chain = MarkovChain([[0.5, 0.5], [0.5, 0.5]])
    spec = affine_problem("const", chain, [0.0, 0.0], [2.0, 2.0])
    tr = run_sa(spec, QUIET, StepSchedule(1.0, 1.0), 1, checkpoints=[0, 1], x0=[7.0], record=True)
    assert tr.path[1, 0] == 2.0 and tr.errors_sq[1] == 0.0


def test_stationary_mean_is_empirical_mean():
    f = np.array([1.0, -1.0])
    spec = stationary_mean([[0.9, 0.1], [0.2, 0.8]], f)
    tr = run_sa(spec, QUIET, StepSchedule(1.0, 1.0), 500, seed=3, record=True)
    means = np.cumsum(f[tr.states]) / np.arange(1, 501)
    assert np.allclose(tr.path[1:, 0], means, atol=1e-12)


def test_counterexample_law_matches_enumeration():
    spec = scalar_counterexample(0.5, 1.0, 0.5)
    sch = StepSchedule(1.0, 2.0)
    k = 8
    vals, probs, _ = enumerate_paths(spec, sch, [1.0], k)
    # exact rational law agrees with the float enumeration
    ev, ep, _ = enumerate_paths(spec, sch, [1.0], k, exact=True)
    assert sum(ep) == 1
    assert np.allclose([float(v) for v in ev], vals[:, 0], rtol=1e-12)
    plan = RunPlan(spec, QUIET, sch, k, checkpoints=[0, k], x0=[1.0])
    n = 20000
    xk = monte_carlo(plan, n, master_seed=11).x_final[:, 0]
    atoms = vals[:, 0]
    order = np.argsort(atoms)
    cdf = np.cumsum(probs[order])
    edges = atoms[order][np.searchsorted(cdf, np.linspace(0.1, 0.9, 9))]
    edges = np.unique(edges)
    exp = np.diff(np.concatenate([[0.0], [probs[atoms <= e].sum() for e in edges], [1.0]]))
    obs = np.bincount(np.searchsorted(edges, xk, side="left"), minlength=len(exp)) / n
    for o, e in zip(obs, exp):
        lo, hi = wilson_interval(round(o * n), n, 0.999)
        assert lo <= e <= hi
    # every simulated value is an atom of the exact law
    assert np.all(np.isin(np.round(xk, 10), np.round(atoms, 10)))


def test_exact_enumeration_finds_lower_bound_path():
    spec = scalar_counterexample(0.5, 1.0, 0.5)
    sch = StepSchedule(1.0, 2.0)
    vals, probs, seqs = enumerate_paths(spec, sch, [1.0], 6, exact=True)
    top = [i for i, s in enumerate(seqs) if np.all(s == 0)][0]
    v, p = counterexample_path(0.5, 1.0, 0.5, 1.0, sch, 6)
    assert vals[top] == v and probs[top] == p == Fraction(2, 3) ** 6


def test_projection_examples():
    e = Norm("euclidean", 2)
    out, hit = e.project(np.array([3.0, 4.0]), np.zeros(2), 1.0)
    assert np.allclose(out, [0.6, 0.8]) and hit
    out, _ = Norm("sup", 2).project(np.array([2.0, -0.5]), np.zeros(2), 1.0)
    assert np.allclose(out, [1.0, -0.5])


@pytest.mark.parametrize("regime", ["negative", "zero", "positive"])
def test_projection_inactive_above_envelope(regime):
    spec, b, env, sch, xs = demo_setup(regime)
    model = NoiseModel("bounded_ball", 1, B2=0.5)
    T = 3000
    x0 = [spec.x_star[0] + 1.0]
    B = float(worst_case_envelope(sch, b, 1.0, xs)(np.array(T), None))
    plain = run_sa(spec, model, sch, T, seed=(5, 2), x0=x0, record=True)
    proj = run_projected(spec, model, sch, B, T, seed=(5, 2), x0=x0, record=True)
    assert proj.projection_hits == 0
    assert plain.path.tobytes() == proj.path.tobytes()
    small = run_projected(spec, model, sch, 0.05, T, seed=(5, 2), x0=x0)
    # x0 itself lies outside the ball; every later iterate is inside
    assert small.projection_hits > 0 and np.all(small.errors_sq[1:] <= 0.05**2 * (1 + 1e-12))


def test_projection_multidimensional_sup():
    spec = contraction_demo("positive", dim=2)
    spec = replace(spec, norm=Norm("sup", 2))
    model = NoiseModel("bounded_ball", 2, B2=1.0, norm=spec.norm)
    tr = run_projected(spec, model, StepSchedule(0.5, 2.0), 0.1, 200, seed=1, x0=spec.x_star)
    assert tr.projection_hits > 0 and tr.max_error_sq <= 0.01 + 1e-12


def test_truncation_symmetric_and_infinite_level():
    spec, b, env, sch, xs = demo_setup()
    model = NoiseModel("sub_weibull", 1, p=2.0, q=1.0, theta=1.0)
    tr, xt = run_truncated(spec, model, sch, 2.0, 2000, seed=4, record=True)
    assert np.allclose(xt, spec.x_star, atol=1e-12) and tr.truncation_hits > 0
    plain = run_sa(spec, model, sch, 2000, seed=4, record=True)
    inf_tr, _ = run_truncated(spec, model, sch, math.inf, 2000, seed=4, record=True)
    assert inf_tr.path.tobytes() == plain.path.tobytes() and inf_tr.truncation_hits == 0


@pytest.mark.parametrize("gamma", [0.1, 0.5, 0.8])
def test_truncation_shift_affine(gamma):
    chain = MarkovChain([[0.6, 0.4], [0.3, 0.7]])
    spec = affine_problem("lin", chain, [gamma, gamma], [1.0, -2.0])
    model = NoiseModel("centered_exponential", 1)
    for level in (0.5, 1.0, 3.0):
        _, xt = run_truncated(spec, model, StepSchedule(2.0, 10.0), level, 5, seed=0)
        m = truncated_mean(model, level)[0]
        assert abs((xt - spec.x_star)[0] - m / (1 - gamma)) <= 1e-8
    g_level = 0.01
    shift, g = truncation_shift_check(spec, model, quantile_B(model, g_level), g_level)
    assert shift <= g


def test_polyak_examples():
    assert np.allclose(polyak_average(np.full((5, 2), 3.0)), 3.0)
    xs = np.arange(10.0)[:, None]
    ys = polyak_average(xs)
    # y_k = mean of x_0..x_{k-1} = (k - 1)/2, stored at index k - 1
    assert np.allclose(ys[:, 0], (np.arange(1, 11) - 1) / 2)


def test_polyak_matches_recorded_path():
    f = np.array([1.0, -1.0])
    spec = stationary_mean([[0.9, 0.1], [0.2, 0.8]], f)
    sch = StepSchedule(1.0, 1.0)
    tr = run_sa(spec, QUIET, sch, 300, seed=9, record=True)
    ck = [1, 10, 100, 300]
    avg = run_polyak(spec, QUIET, sch, 300, checkpoints=ck, seed=9)
    y = polyak_average(tr.path[:300])
    direct = [(y[k - 1, 0] - spec.x_star[0]) ** 2 for k in ck]
    assert np.allclose(avg.errors_sq, direct, rtol=1e-10, atol=1e-15)


def test_nonfinite_reported_with_step():
    spec = contraction_demo("positive")
    with pytest.raises(NonFinite) as info:
        run_sa(spec, QUIET, StepSchedule(1000.0, 1.0), 400, x0=[1.0])
    assert 0 < info.value.step <= 400


def test_nonfinite_paths_count_as_violations():
    spec = contraction_demo("positive")
    plan = RunPlan(spec, QUIET, StepSchedule(1000.0, 1.0), 400, x0=[1.0])
    r = monte_carlo(plan, 3, references={"huge": np.full(401, 1e300)})
    assert r.nonfinite_paths == 3 and r.violations["huge"]["count"] == 3


def test_monte_carlo_single_path_and_workers():
    spec, b, env, sch, xs = demo_setup("zero")
    model = NoiseModel("bounded_ball", 1, B2=0.5)
    plan = RunPlan(spec, model, sch, 300, x0=[0.0])
    one = monte_carlo(plan, 1, master_seed=3)
    tr = run_sa(spec, model, sch, 300, seed=(3, 0), x0=[0.0])
    assert np.array_equal(one.errors[0], tr.errors_sq)
    assert np.array_equal(one.quantiles["q0.5"], tr.errors_sq)
    n = BLOCK + 77
    a = monte_carlo(plan, n, master_seed=3, workers=1)
    c = monte_carlo(plan, n, master_seed=3, workers=8)
    assert a.to_dict() == c.to_dict() and np.array_equal(a.errors, c.errors)
    # path i of a big run is reproducible in isolation
    tr = run_sa(spec, model, sch, 300, seed=(3, BLOCK + 5), x0=[0.0])
    assert np.array_equal(a.errors[BLOCK + 5], tr.errors_sq)


@pytest.mark.parametrize("regime", ["negative", "zero", "positive"])
@pytest.mark.parametrize("z", [1.0, 0.75])
def test_worst_case_envelope_never_violated(regime, z):
    spec, b, env, sch, xs = demo_setup(regime, z=z)
    model = NoiseModel("bounded_ball", 1, B2=0.5)
    x0 = [spec.x_star[0] + 1.0]
    wc = worst_case_envelope(sch, b, 1.0, xs)
    plan = RunPlan(spec, model, sch, 2000, x0=x0)
    r = monte_carlo(plan, 300, master_seed=1, references={"as": lambda k: wc(k, None) ** 2})
    assert r.violations["as"]["count"] == 0 and r.nonfinite_paths == 0


def test_wilson_interval():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0 and hi == pytest.approx(0.03699, abs=1e-4)
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.4038, abs=1e-4) and hi == pytest.approx(0.5962, abs=1e-4)
    with pytest.raises(BadParams):
        wilson_interval(1, 0)


def test_checkpoints():
    ck = geometric_checkpoints(10, 100)
    assert list(ck) == [0, 10, 15, 23, 34, 51, 76, 100]
    spec = contraction_demo("negative")
    with pytest.raises(BadParams):
        RunPlan(spec, QUIET, StepSchedule(1.0, 10.0), 50, checkpoints=[0, 5, 5])
    with pytest.raises(BadParams):
        RunPlan(spec, QUIET, StepSchedule(1.0, 10.0), 50, checkpoints=[0, 60])
    with pytest.raises(BadParams):
        RunPlan(spec, QUIET, StepSchedule(1.0, 10.0), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_sup_ratio_dominates_sampled_ratios(T, seed):
    spec, b, env, sch, xs = demo_setup("positive")
    model = NoiseModel("bounded_ball", 1, B2=0.5)
    ref = np.linspace(1.0, 2.0, T + 1)
    tr = run_sa(spec, model, sch, T, checkpoints=range(T + 1), seed=seed, x0=[3.0], reference=ref)
    assert np.all(np.diff(tr.checkpoints) > 0)
    assert tr.sup_ratio >= np.max(tr.errors_sq / ref) * (1 - 1e-15)
    assert tr.max_error_sq == np.max(tr.errors_sq)


def test_trajectory_csv(tmp_path):
    spec, b, env, sch, xs = demo_setup()
    tr = run_sa(spec, QUIET, sch, 100, checkpoints=[0, 50, 100], x0=[5.0])
    ref = np.full(101, 1e-3)
    write_trajectory_csv(tmp_path / "t.csv", tr, ref)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["k", "error_sq", "bound", "violated"]
    assert [r[0] for r in rows[1:]] == ["0", "50", "100"] and rows[1][3] == "1"


def test_importance_mgf_matches_enumeration():
    spec = scalar_counterexample(0.5, 1.0, 0.5)
    sch = StepSchedule(1.0, 2.0)
    k = 6
    g = lambda x: 0.3 * x[:, 0] ** 2
    vals, probs, seqs = enumerate_paths(spec, sch, [1.0], k)
    exact = math.log(np.sum(probs * np.exp(g(vals))))
    est, rel = iid_importance_mgf(spec, sch, [1.0], k, g, [0.5, 0.5], 200000, seed=1)
    assert abs(est - exact) < 5 * math.exp(rel) + 1e-3
    top = np.zeros(k, dtype=int)
    est2, _ = iid_importance_mgf(spec, sch, [1.0], k, g, [0.5, 0.5], 20000, seed=2, exclude=top)
    single = math.log(probs[0]) + g(vals[:1])[0]
    assert np.all(seqs[0] == top) and est2 >= single


def supermart_setup(chain=None):
    spec, b, env, sch, xs = demo_setup("negative")
    if chain is not None:
        spec = affine_problem("one", chain, [0.5], [1.0])
        b = replace(spec.bounds, B2=0.5)
        env = envelope_for(spec.norm, b.gamma_c)
        xs = float(spec.norm(spec.x_star))
        sch = admissible_schedule(b, env, 1.0, xs)
        spec = replace(spec, bounds=b)
    x0 = spec.x_star + 1.0
    led = constants_ledger(b, env, sch, 1.0, xs)
    return spec, env, led, sch, x0


def test_supermartingale_trivial_cases():
    spec, env, led, sch, x0 = supermart_setup()
    path = np.tile(spec.x_star, (4, 1))
    diag = supermartingale_diag(spec, env, led, path, np.array([0, 1, 2]))
    a_prev = sch.alpha_k(diag.k - 1)
    assert np.allclose(diag.d_k, 0.0)
    assert np.allclose(diag.Zexp, diag.lambda_k * a_prev * env.L_s * led.bounds.L2 / 4)
    assert np.all(diag.lambda_k > 0)
    with pytest.raises(LedgerMissing):
        supermartingale_diag(spec, env, None, path, np.array([0, 1, 2]))

    spec1, env1, led1, sch1, _ = supermart_setup(MarkovChain([[1.0]]))
    model = NoiseModel("bounded_ball", 1, B2=0.5)
    tr = run_sa(spec1, model, sch1, 50, seed=1, x0=spec1.x_star + 1.0, record=True)
    diag = supermartingale_diag(spec1, env1, led1, tr.path, tr.states)
    assert np.allclose(diag.d_k, 0.0, atol=1e-14)
    M = 0.5 * (tr.path[1:, 0] - spec1.x_star[0]) ** 2 / (1 + env1.mu)
    disc = led1.D3 * np.array([np.sum(sch1.alpha_k(np.arange(k))) for k in diag.k])
    expect = diag.lambda_k * (M + sch1.alpha_k(diag.k - 1) * env1.L_s * led1.bounds.L2 / 4) - disc
    assert np.allclose(diag.log_Mbar, expect, rtol=1e-12)


def test_supermartingale_nonnegative_and_drift():
    spec, env, led, sch, x0 = supermart_setup()
    model = NoiseModel("bounded_ball", 1, B2=0.5)
    paths, states = simulate_paths(RunPlan(spec, model, sch, 200, x0=x0), 5, master_seed=2)
    for p, s in zip(paths, states):
        diag = supermartingale_diag(spec, env, led, p, s)
        assert diag.nonnegative()
        assert diag.lambda_nonincreasing is False  # constant T_k and decreasing steps
    p, s = paths[0], states[0]
    for k in (1, 50, 150):
        ratio, se = drift_probe(spec, model, env, led, k, int(s[k - 1]), p[k], 2000, seed=k)
        assert ratio <= 1 + 2.58 * se
