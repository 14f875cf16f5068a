import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from sa_concentration.errors import InvalidGamma
from sa_concentration.noise_models import (
    NoiseModel,
    empirical_truncated_mean,
    lemma_bias_constant,
    lemma_tail_bound,
    quantile_B,
    sample_noise,
    tail_expectation_bound,
    tail_mean,
    truncate_and_center,
    truncated_mean,
    truncation_bias_g,
)
from sa_concentration.norms import Norm


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def exact_tail_expectation(model, level):
    """E[W 1{W >= level}] for the tight radial law, by quadrature."""
    if model.kind == "sub_weibull":
        p, q, th = model.p, model.q, model.theta
        surv = lambda x: min(1.0, p * np.exp(-q * x ** (1.0 / th)))
    else:
        p, th = model.p, model.theta
        surv = lambda x: min(1.0, p * x ** (-th))
    integral = integrate.quad(surv, level, np.inf, limit=500, epsabs=1e-14, epsrel=1e-12)[0]
    return level * surv(level) + integral


def test_point_mass_is_zero():
    m = NoiseModel("point_mass", dim=3)
    assert np.all(sample_noise(m, rng(), size=10) == 0)
    assert truncation_bias_g(m, 0.01, 0.5) == 0.0


def test_bounded_ball_norm_and_mean():
    m = NoiseModel("bounded_ball", dim=3, B2=1.0)
    Z = sample_noise(m, rng(1), size=10**6)
    assert np.max(np.linalg.norm(Z, axis=1)) <= 1.0
    se = Z.std(axis=0) / np.sqrt(len(Z))
    assert np.all(np.abs(Z.mean(axis=0)) <= 3 * se)


def test_bounded_ball_sup_norm():
    m = NoiseModel("bounded_ball", dim=4, B2=2.0, norm=Norm("sup", 4))
    Z = sample_noise(m, rng(2), size=10**5)
    assert np.max(np.abs(Z)) <= 2.0


def test_sub_pareto_tail_example():
    m = NoiseModel("sub_pareto", dim=2, p=1.0, theta=2.0)
    assert quantile_B(m, 0.01) == pytest.approx(10.0, rel=1e-15)
    n = 10**6
    W = np.linalg.norm(sample_noise(m, rng(3), size=n), axis=1)
    frac = np.mean(W > 10.0)
    assert frac <= 0.01 + 1.96 * np.sqrt(0.01 * 0.99 / n)


def test_quantile_examples():
    assert quantile_B(NoiseModel("sub_weibull", p=1, q=1, theta=1), np.exp(-3)) == pytest.approx(3.0, rel=1e-14)
    assert quantile_B(NoiseModel("sub_weibull", p=np.e, q=2, theta=0.5), 1.0) == pytest.approx(np.sqrt(0.5))
    assert quantile_B(NoiseModel("bounded_ball", B2=1.5), 0.1) == 1.5
    with pytest.raises(InvalidGamma):
        quantile_B(NoiseModel("sub_pareto", p=1, theta=2), 0.0)
    with pytest.raises(InvalidGamma):
        quantile_B(NoiseModel("sub_pareto", p=1, theta=2), 1.5)


def test_bias_constants():
    assert lemma_bias_constant(NoiseModel("sub_weibull", theta=1)) == pytest.approx(2 * np.log(2))
    # sum (i+1)^2 / 2^i = 12
    assert lemma_bias_constant(NoiseModel("sub_weibull", theta=2)) == pytest.approx(12 * np.log(2), rel=1e-12)
    assert lemma_bias_constant(NoiseModel("sub_pareto", p=1, theta=2)) == pytest.approx(1 / (1 - 2**-0.5))


def test_g_dominates_exact_tail():
    m = NoiseModel("sub_weibull", p=1, q=1, theta=1)
    g = truncation_bias_g(m, np.exp(-3), 0.5)
    # exact E[W 1{W >= 3}] = 4 e^-3 for an Exp(1) radial law
    assert g >= 4 * np.exp(-3) / 0.5
    # the closed form as printed misses the B P(W >= B) term
    assert lemma_tail_bound(m, np.exp(-3)) < 4 * np.exp(-3)

    m = NoiseModel("sub_pareto", p=1, theta=2)
    assert truncation_bias_g(m, 0.01, 0.0) >= exact_tail_expectation(m, 10.0)


MODELS = [
    NoiseModel("sub_weibull", p=1, q=1, theta=1),
    NoiseModel("sub_weibull", p=2, q=0.5, theta=0.5),
    NoiseModel("sub_weibull", p=1, q=1, theta=2),
    NoiseModel("sub_weibull", p=3, q=2, theta=1.5),
    NoiseModel("sub_pareto", p=1, theta=2),
    NoiseModel("sub_pareto", p=2, theta=4),
]


@pytest.mark.parametrize("model", MODELS, ids=lambda m: str(m.describe()))
@pytest.mark.parametrize("gamma", [0.1, 0.01, 0.001])
def test_tail_bound_dominates_quadrature(model, gamma):
    exact = exact_tail_expectation(model, quantile_B(model, gamma))
    assert tail_expectation_bound(model, gamma) >= exact * (1 - 1e-9)


@pytest.mark.parametrize("model", MODELS + [NoiseModel("centered_exponential")], ids=lambda m: m.kind)
def test_empirical_quantiles(model):
    n = 10**6
    Z = sample_noise(model, rng(11), size=n)
    W = model.norm(Z)
    for gamma in (0.1, 0.01, 0.001):
        frac = np.mean(W > quantile_B(model, gamma))
        assert frac <= gamma + 1.96 * np.sqrt(gamma * (1 - gamma) / n)


def test_monotonicity_on_grid():
    grid = [0.1, 0.03, 0.01, 0.003, 0.001]
    for model in MODELS:
        B = [quantile_B(model, g) for g in grid]
        assert all(b1 <= b2 for b1, b2 in zip(B, B[1:]))
        # the bias shrinks as the truncation level grows (gamma decreases)
        g = [truncation_bias_g(model, x, 0.5) for x in grid]
        assert all(g1 >= g2 for g1, g2 in zip(g, g[1:]))


def test_truncate_and_center():
    m = NoiseModel("bounded_ball", dim=2, B2=1.0)
    z = np.array([[0.3, 0.4]])
    assert np.array_equal(truncate_and_center(m, 1.0, z, np.zeros(2)), z)
    assert np.array_equal(truncate_and_center(m, 0.1, z, np.zeros(2)), np.zeros((1, 2)))


def test_symmetric_centering_estimate():
    m = NoiseModel("sub_pareto", dim=2, p=1, theta=2)
    mean, se = empirical_truncated_mean(m, 5.0, 10**7, rng(5))
    assert np.all(np.abs(mean) <= 3 * se)
    assert np.all(truncated_mean(m, 5.0) == 0)


def test_centered_exponential_closed_forms():
    m = NoiseModel("centered_exponential")
    for level in (0.5, 2.0):
        mean, se = empirical_truncated_mean(m, level, 2 * 10**6, rng(6))
        assert abs(mean[0] - truncated_mean(m, level)[0]) <= 4 * se[0]
    assert np.isclose(tail_mean(m, 2.0)[0], 3 * np.exp(-3))
    Z = sample_noise(m, rng(7), size=10**6)
    assert abs(Z.mean()) <= 4 * Z.std() / 1e3


def test_sampling_reproducible():
    m = NoiseModel("sub_weibull", dim=3, p=1, q=1, theta=1)
    a = sample_noise(m, rng(9), size=100)
    b = sample_noise(m, rng(9), size=100)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(1e-6, 0.5))
def test_weibull_bound_property(theta, p, q, gamma):
    m = NoiseModel("sub_weibull", p=p, q=q, theta=theta)
    level = quantile_B(m, gamma)
    assert tail_expectation_bound(m, gamma) >= exact_tail_expectation(m, level) * (1 - 1e-7)


def test_weibull_degenerate_level():
    # p < gamma puts B(gamma) at zero; the bound must still cover E[W]
    m = NoiseModel("sub_weibull", p=0.3, q=2.0, theta=1.0)
    assert quantile_B(m, 0.5) == 0.0
    assert tail_expectation_bound(m, 0.5) >= exact_tail_expectation(m, 0.0) * (1 - 1e-9)
