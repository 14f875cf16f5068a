"""Finite-state ergodic Markov chains: stationary law, Poisson equation,
return and hitting times, and path sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import reduce
from math import gcd
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .errors import NotErgodic, SingularSystem

ROW_TOL = 1e-12
DENSE_LIMIT = 512


def _period(P):
    """Period of an irreducible chain via BFS levels on the support graph."""
    n = P.shape[0]
    graph = csr_matrix(P > 0)
    order, pred = breadth_first_order(graph, 0, directed=True, return_predecessors=True)
    level = np.full(n, -1, dtype=np.int64)
    level[0] = 0
    for v in order[1:]:
        level[v] = level[pred[v]] + 1
    rows, cols = np.nonzero(P > 0)
    diffs = np.abs(level[rows] + 1 - level[cols])
    return reduce(gcd, diffs.tolist(), 0)


def check_ergodic(P):
    """Raise NotErgodic unless P is irreducible and aperiodic."""
    n = P.shape[0]
    if n == 1:
        return
    ncomp, _ = connected_components(csr_matrix(P > 0), directed=True, connection="strong")
    if ncomp != 1:
        raise NotErgodic("transition graph is not strongly connected (%d classes)" % ncomp)
    d = _period(P)
    if d != 1:
        raise NotErgodic("chain is periodic with period %d" % d)


@dataclass(frozen=True)
class MarkovChain:
    """Immutable finite Markov chain.

    Parameters
    ----------
    P : ndarray, shape (n, n)
        Row-stochastic transition matrix.
    labels : sequence, optional
        Real value attached to each state (used by scalar examples).
    validate : bool
        If False, skip the ergodicity check. Only meant for tests that need
        a periodic chain to sample from.
    """

    P: np.ndarray
    labels: Optional[tuple] = None
    validate: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise ValueError("P must be a non-empty square matrix")
        if np.any(P < 0) or np.any(P > 1):
            raise ValueError("entries of P must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("rows of P must sum to 1")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != P.shape[0]:
                raise ValueError("labels must have one entry per state")
            object.__setattr__(self, "labels", labels)
        if self.validate:
            check_ergodic(P)

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def pi(self):
        if "pi" not in self._cache:
            self._cache["pi"] = stationary_distribution(self)
        return self._cache["pi"]

    def _fundamental_lu(self):
        if "lu" not in self._cache:
            n = self.n_states
            Z = np.eye(n) - self.P + np.outer(np.ones(n), self.pi)
            try:
                with np.errstate(all="raise"):
                    lu = linalg.lu_factor(Z, check_finite=True)
            except (linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                raise SingularSystem(str(exc)) from exc
            if np.min(np.abs(np.diag(lu[0]))) < 1e-14:
                raise SingularSystem("fundamental matrix is numerically singular")
            self._cache["lu"] = lu
        return self._cache["lu"]

    def to_json(self):
        out = {"P": self.P.tolist(), "pi": self.pi.tolist()}
        if self.labels is not None:
            out["labels"] = list(self.labels)
        return out

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(np.asarray(obj["P"], dtype=float), labels=obj.get("labels"))


def stationary_distribution(chain, tol=1e-12, max_iter=1_000_000):
    """Stationary probability vector of an ergodic chain.

    Dense linear solve for small chains, power iteration otherwise.
    """
    P = chain.P
    n = P.shape[0]
    if chain.validate is False:
        check_ergodic(P)
    if n == 1:
        return np.ones(1)
    if n <= DENSE_LIMIT:
        A = P.T - np.eye(n)
        A[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        try:
            pi = linalg.solve(A, b)
        except linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
    else:
        pi = np.full(n, 1.0 / n)
        for _ in range(max_iter):
            nxt = pi @ P
            if np.max(np.abs(nxt - pi)) < tol:
                pi = nxt
                break
            pi = nxt
        else:
            raise SingularSystem("power iteration did not converge")
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()
    if np.any(pi <= 0):
        raise NotErgodic("stationary distribution has zero mass on some state")
    return pi


@dataclass(frozen=True)
class PoissonSolution:
    V: np.ndarray
    residual_norm: float


def _as_state_array(chain, g):
    g = np.asarray(g, dtype=float)
    if g.shape[0] != chain.n_states:
        raise ValueError("g must have one row per state")
    if not np.all(np.isfinite(g)):
        raise ValueError("g must be finite")
    return g


def poisson_residual(chain, g, V):
    """Max-abs residual of g - gbar + PV - V."""
    g = _as_state_array(chain, g)
    gbar = np.tensordot(chain.pi, g, axes=1)
    r = g - gbar + np.tensordot(chain.P, V, axes=1) - V
    return float(np.max(np.abs(r))) if r.size else 0.0


def solve_poisson(chain, g):
    """Canonical solution of the Poisson equation.

    Solves (I - P + 1 pi^T) V = g - gbar, which yields the solution with
    pi . V = 0.  ``g`` may carry trailing dimensions (states first).

    Returns
    -------
    PoissonSolution
    """
    g = _as_state_array(chain, g)
    shape = g.shape
    gbar = np.tensordot(chain.pi, g, axes=1)
    rhs = (g - gbar).reshape(shape[0], -1)
    lu = chain._fundamental_lu()
    V = linalg.lu_solve(lu, rhs).reshape(shape)
    if not np.all(np.isfinite(V)):
        raise SingularSystem("Poisson solve produced non-finite values")
    return PoissonSolution(V, poisson_residual(chain, g, V))


def hitting_times(chain, target):
    """E[min{n > 0 : S_n = target} | S_0 = s] for every s."""
    P = chain.P
    n = P.shape[0]
    keep = np.arange(n) != target
    m = np.zeros(n)
    if n > 1:
        A = np.eye(n - 1) - P[np.ix_(keep, keep)]
        try:
            m[keep] = linalg.solve(A, np.ones(n - 1))
        except linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
    m[target] = 1.0 + P[target, keep] @ m[keep]
    return m


def expected_return_times(chain):
    """Mean return time E[tau_s | S_0 = s] for each state (first-passage systems)."""
    n = chain.n_states
    return np.array([hitting_times(chain, s)[s] for s in range(n)])


def max_hitting_time(chain):
    """Best reference state for the hitting-time Poisson solution.

    Returns (s0, max_s E_s[tau_{s0}]) with s0 minimising the maximum.
    """
    worst = np.array([hitting_times(chain, t).max() for t in range(chain.n_states)])
    s0 = int(np.argmin(worst))
    return s0, float(worst[s0])


def poisson_hitting_form(chain, g, ref=0):
    """Solution V*(s) = E_s[sum_{k < tau} (g(S_k) - gbar)], tau the first
    return/hit time of state ``ref``."""
    g = _as_state_array(chain, g)
    shape = g.shape
    n = shape[0]
    gc = (g - np.tensordot(chain.pi, g, axes=1)).reshape(n, -1)
    keep = np.arange(n) != ref
    V = np.zeros_like(gc)
    if n > 1:
        A = np.eye(n - 1) - chain.P[np.ix_(keep, keep)]
        V[keep] = linalg.solve(A, gc[keep])
    V[ref] = gc[ref] + chain.P[ref, keep] @ V[keep]
    return V.reshape(shape)


def cumulative_rows(P):
    """Row-cumulative transition matrix with the last column pinned to 1."""
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    return cum


def step_states(cum, states, u):
    """Advance a vector of states given uniforms in (0, 1] and row-cumulative P."""
    return (cum[states] < u[:, None]).sum(axis=1)


def sample_path(chain, start, length, seed):
    """Sample ``length`` states starting from ``start`` (included)."""
    if not 0 <= start < chain.n_states:
        raise ValueError("start out of range")
    rng = np.random.Generator(np.random.Philox(seed))
    cum = cumulative_rows(chain.P)
    out = np.empty(length, dtype=np.int64)
    if length == 0:
        return out
    u = 1.0 - rng.random(length)
    s = int(start)
    out[0] = s
    for k in range(1, length):
        s = int(np.searchsorted(cum[s], u[k], side="left"))
        out[k] = s
    return out


def random_ergodic_chain(n, rng, density=0.6):
    """Random irreducible aperiodic chain (a self-loop on state 0 and a
    Hamiltonian cycle guarantee both)."""
    while True:
        mask = rng.random((n, n)) < density
        perm = rng.permutation(n)
        for i in range(n):
            mask[perm[i], perm[(i + 1) % n]] = True
        mask[0, 0] = True
        W = rng.random((n, n)) * mask
        P = W / W.sum(axis=1, keepdims=True)
        try:
            return MarkovChain(P)
        except NotErgodic:
            continue
