import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sa_concentration.errors import NotErgodic
from sa_concentration.markov_core import (
    MarkovChain,
    expected_return_times,
    hitting_times,
    max_hitting_time,
    poisson_hitting_form,
    poisson_residual,
    random_ergodic_chain,
    sample_path,
    solve_poisson,
    stationary_distribution,
)

P2 = [[0.9, 0.1], [0.2, 0.8]]


def test_periodic_chain_rejected():
    with pytest.raises(NotErgodic):
        MarkovChain([[0.0, 1.0], [1.0, 0.0]])
    bypass = MarkovChain([[0.0, 1.0], [1.0, 0.0]], validate=False)
    with pytest.raises(NotErgodic):
        stationary_distribution(bypass)


def test_reducible_chain_rejected():
    with pytest.raises(NotErgodic):
        MarkovChain([[1.0, 0.0], [0.5, 0.5]])


def test_stationary_examples():
    assert np.allclose(MarkovChain([[0.5, 0.5], [0.5, 0.5]]).pi, [0.5, 0.5], atol=1e-15)
    pi = MarkovChain(P2).pi
    # oracle: least-squares null vector of (P - I)^T
    A = np.vstack([(np.array(P2) - np.eye(2)).T, np.ones(2)])
    oracle = np.linalg.lstsq(A, np.array([0, 0, 1.0]), rcond=None)[0]
    assert np.allclose(pi, oracle, atol=1e-14)
    assert np.allclose(pi, [2 / 3, 1 / 3], atol=1e-14)


def test_poisson_iid_and_two_state():
    iid = MarkovChain([[0.5, 0.5], [0.5, 0.5]])
    sol = solve_poisson(iid, [1.0, -1.0])
    assert np.allclose(sol.V, [1.0, -1.0], atol=1e-14)

    rng = np.random.default_rng(0)
    pi = np.array([0.2, 0.3, 0.5])
    chain = MarkovChain(np.tile(pi, (3, 1)))
    g = rng.normal(size=(3, 2))
    V = solve_poisson(chain, g).V
    assert np.allclose(V, g - pi @ g, atol=1e-13)

    chain = MarkovChain(P2)
    sol = solve_poisson(chain, [1.0, 0.0])
    # fundamental-matrix oracle via the pseudo-inverse of I - P
    Z = np.linalg.pinv(np.eye(2) - np.array(P2))
    gc = np.array([1.0, 0.0]) - chain.pi @ np.array([1.0, 0.0])
    V = Z @ gc
    V = V - chain.pi @ V
    assert np.allclose(sol.V, V, atol=1e-12)
    assert sol.residual_norm <= 1e-10
    assert abs(chain.pi @ sol.V) <= 1e-10


def test_hitting_form_differs_by_constant():
    rng = np.random.default_rng(3)
    chain = random_ergodic_chain(5, rng)
    g = rng.normal(size=(5, 3))
    V = solve_poisson(chain, g).V
    for ref in range(5):
        Vs = poisson_hitting_form(chain, g, ref)
        assert poisson_residual(chain, g, Vs) < 1e-10
        shift = Vs - V
        assert np.allclose(shift, shift[0], atol=1e-10)
        # a full excursion from the reference state has zero mean
        assert np.allclose(Vs[ref], 0.0, atol=1e-10)


def test_return_times():
    assert np.allclose(expected_return_times(MarkovChain([[0.5, 0.5], [0.5, 0.5]])), [2, 2])
    assert np.allclose(expected_return_times(MarkovChain(P2)), [1.5, 3.0], atol=1e-12)
    assert np.allclose(expected_return_times(MarkovChain([[1.0]])), [1.0])
    # hitting time of state 1 from state 0 in P2 is geometric with mean 10
    assert np.isclose(hitting_times(MarkovChain(P2), 1)[0], 10.0)
    s0, worst = max_hitting_time(MarkovChain(P2))
    assert s0 == 0 and np.isclose(worst, 5.0)


def test_sample_path_examples():
    assert np.all(sample_path(MarkovChain([[1.0]]), 0, 50, 1) == 0)
    alt = sample_path(MarkovChain([[0.0, 1.0], [1.0, 0.0]], validate=False), 0, 10, 5)
    assert alt.tolist() == [0, 1] * 5
    a = sample_path(MarkovChain(P2), 0, 1000, 42)
    b = sample_path(MarkovChain(P2), 0, 1000, 42)
    assert a.tobytes() == b.tobytes()


def test_sample_path_occupation():
    n = 10**6
    path = sample_path(MarkovChain(P2), 0, n, 7)
    occ = np.bincount(path, minlength=2) / n
    # asymptotic variance of the occupation of state 0 for a two-state chain:
    # pi0 pi1 (1 + lam) / (1 - lam), lam = 1 - p01 - p10
    lam = 0.7
    sigma = np.sqrt((2 / 3) * (1 / 3) * (1 + lam) / (1 - lam) / n)
    assert abs(occ[0] - 2 / 3) <= 3 * sigma


def test_json_roundtrip():
    chain = MarkovChain(P2, labels=[1.0, -1.0])
    obj = chain.to_json()
    assert np.allclose(obj["pi"], [2 / 3, 1 / 3])
    back = MarkovChain.from_json(obj)
    assert np.array_equal(back.P, chain.P) and back.labels == chain.labels


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_poisson_random_chains(n, d, seed):
    rng = np.random.default_rng(seed)
    chain = random_ergodic_chain(n, rng)
    g = rng.normal(size=(n, d)) * 10
    sol = solve_poisson(chain, g)
    assert sol.residual_norm <= 1e-10
    assert np.max(np.abs(chain.pi @ sol.V)) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_kac_identity(n, seed):
    chain = random_ergodic_chain(n, np.random.default_rng(seed))
    assert np.allclose(expected_return_times(chain) * chain.pi, 1.0, atol=1e-8)
