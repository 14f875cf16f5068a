import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from sa_concentration.errors import ConditionViolated, Infeasible
from sa_concentration.lyapunov_envelope import (
    choose_mu,
    condition_value,
    envelope_constants,
    envelope_for,
    moreau_value_and_grad,
)
from sa_concentration.norms import Norm

EUC2 = Norm("euclidean", 2)


def norm_pairs(d=3, seed=0):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(d, d))
    return [Norm("euclidean", d), Norm("weighted", d, B @ B.T + 0.5 * np.eye(d)), Norm("sup", d)]


def brute_moreau(norm_c, mu, x):
    obj = lambda u: 0.5 * norm_c(u) ** 2 + 0.5 / mu * np.sum((x - u) ** 2)
    best = None
    for start in (x / 2, np.zeros_like(x), x):
        res = optimize.minimize(obj, start, method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 40000})
        best = res.fun if best is None else min(best, res.fun)
    return best


def test_choose_mu_examples():
    assert choose_mu(0.7, 1.0, 1.0) == 1.0
    assert np.isclose(condition_value(0.7, 1.0, 1.0, 1.0), 0.7)
    assert choose_mu(0.0, 0.3, 1.0) == 1.0
    assert envelope_constants(0.0, 1.0, 1.0, 0.3, 1.0).eta == 2.0

    mu = choose_mu(0.9, 1 / np.sqrt(2), 1.0, margin=0.01)
    assert condition_value(0.9, mu, 1 / np.sqrt(2), 1.0) <= 0.99
    # closed-form largest feasible mu for the margin
    t, g, l, u = 0.99, 0.9, 1 / np.sqrt(2), 1.0
    exact = (t**2 - g**2) / (g**2 * u**2 - t**2 * l**2)
    assert mu == pytest.approx(exact, rel=1e-10)
    assert 0.5 < mu < 0.54


def test_choose_mu_infeasible():
    with pytest.raises(Infeasible) as info:
        choose_mu(0.97, 0.5, 1.0, margin=0.05)
    assert info.value.asymptote == pytest.approx(0.97 * 2)


def test_envelope_constants_examples():
    c = envelope_constants(0.5, 1.0, 1.0, 1.0, 1.0)
    assert (c.eta, c.L_s, c.l, c.u) == (1.0, 1.0, 4.0, 4.0)
    big = envelope_constants(0.5, 100.0, 1.0, 1.0, 1.0)
    assert big.l == big.u == 2 * 101
    with pytest.raises(ConditionViolated):
        envelope_constants(0.9, 10.0, 1.0, 0.1, 1.0)


def test_moreau_examples():
    c = envelope_constants(0.5, 1.0, 1.0, 1.0, 1.0)
    v, g = moreau_value_and_grad(c, EUC2, EUC2, np.zeros(2))
    assert v == 0 and np.all(g == 0)
    x = np.array([3.0, -4.0])
    v, _ = moreau_value_and_grad(c, EUC2, EUC2, x)
    assert v == pytest.approx(25 / 4)


@pytest.mark.parametrize("idx", [0, 1, 2])
def test_moreau_matches_brute_force(idx):
    norm_c = norm_pairs()[idx]
    env = envelope_for(norm_c, 0.5)
    rng = np.random.default_rng(idx)
    for _ in range(10):
        x = rng.normal(size=3) * 2
        v, _ = moreau_value_and_grad(env, norm_c, Norm("euclidean", 3), x)
        assert v == pytest.approx(brute_moreau(norm_c, env.mu, x), rel=1e-7, abs=1e-12)


@pytest.mark.parametrize("idx", [0, 1, 2])
def test_gradient_and_inequalities(idx):
    norm_c = norm_pairs()[idx]
    s = Norm("euclidean", 3)
    env = envelope_for(norm_c, 0.5)
    rng = np.random.default_rng(10 + idx)
    X = rng.normal(size=(100, 3)) * rng.uniform(0.1, 10, size=(100, 1))
    _, G = moreau_value_and_grad(env, norm_c, s, X)
    h = 1e-6
    for x, g in zip(X, G):
        fd = np.array([(moreau_value_and_grad(env, norm_c, s, x + h * e)[0]
                        - moreau_value_and_grad(env, norm_c, s, x - h * e)[0]) / (2 * h) for e in np.eye(3)])
        assert np.linalg.norm(fd - g) <= 1e-6 * max(np.linalg.norm(g), 1e-8)

    X, Y = rng.normal(size=(2, 1000, 3)) * 3
    vx, gx = moreau_value_and_grad(env, norm_c, s, X)
    vy, _ = moreau_value_and_grad(env, norm_c, s, Y)
    rhs = vx + np.sum(gx * (Y - X), axis=1) + 0.5 * env.L_s * np.sum((Y - X) ** 2, axis=1)
    assert np.all(vy <= rhs + 1e-12)
    sq = norm_c.sq(X)
    assert np.all(env.l * vx <= sq * (1 + 1e-12)) and np.all(sq <= env.u * vx * (1 + 1e-12))
    # homogeneity of the squared norm
    v2, _ = moreau_value_and_grad(env, norm_c, s, 2 * X)
    assert np.allclose(v2, 4 * vx, rtol=1e-12)


def contraction_matrix(norm_c, gamma, rng):
    d = norm_c.dim
    if norm_c.kind == "sup":
        Pm = np.eye(d)[rng.permutation(d)] * rng.choice([-1, 1], size=d)
        return gamma * Pm
    M = rng.normal(size=(d, d))
    return gamma * M / norm_c.operator_norm(M)


@pytest.mark.parametrize("idx", [0, 1, 2])
def test_negative_drift(idx):
    norm_c = norm_pairs()[idx]
    s = Norm("euclidean", 3)
    rng = np.random.default_rng(20 + idx)
    A = contraction_matrix(norm_c, 0.5, rng)
    assert norm_c.operator_norm(A) <= 0.5 + 1e-12
    env = envelope_for(norm_c, 0.5)
    l_cs, u_cs = norm_c.equivalence_to_euclidean()
    assert env.eta == 2 * (1 - 0.5 * np.sqrt((1 + env.mu * u_cs**2) / (1 + env.mu * l_cs**2)))
    x_star = rng.normal(size=3)
    c = x_star - A @ x_star
    X = rng.normal(size=(1000, 3)) * 5
    Fb = X @ A.T + c
    v, g = moreau_value_and_grad(env, norm_c, s, X - x_star)
    drift = np.sum(g * (Fb - X), axis=1)
    assert np.all(drift <= -env.eta * v + 1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.99), st.floats(0.05, 1.0), st.floats(0.05, 0.5))
def test_choose_mu_property(gamma, l, margin):
    try:
        mu = choose_mu(gamma, l, 1.0, margin)
    except Infeasible:
        assert gamma >= 1 - margin
        return
    assert condition_value(gamma, mu, l, 1.0) <= 1 - margin + 1e-12
    if mu < 1:
        # nearly maximal: a slightly larger mu breaks the margin
        assert condition_value(gamma, mu * (1 + 1e-9), l, 1.0) > 1 - margin - 1e-9
