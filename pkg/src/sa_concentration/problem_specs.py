"""Noisy operators F(x, s), the averaged operator, fixed points, and the
constants (A1, B1, A3, B3, B2, gamma_c, L_F, L1, L2) that feed the bounds.

Every built-in problem is affine in x: F(x, s) = A(s) x + c(s).  Generic
operators can be supplied as a callable instead.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize

from .errors import GridTooSmall, MissingLipschitz, NoConvergence, NotHurwitz
from .markov_core import MarkovChain, max_hitting_time, poisson_hitting_form, solve_poisson
from .markov_core import expected_return_times
from .norms import Norm

HURWITZ_MARGIN = 1e-10


@dataclass(frozen=True)
class NoiseBounds:
    """Affine noise envelopes and Lipschitz data.

    ``B2`` is the almost-sure bound on the additive noise (inf when the law
    is unbounded).  ``gamma_c``, ``L_F``, ``L1``, ``L2`` may be None when not
    known.
    """

    A1: float
    B1: float
    A3: float
    B3: float
    B2: float = 0.0
    gamma_c: Optional[float] = None
    L_F: Optional[float] = None
    L1: Optional[float] = None
    L2: Optional[float] = None

    def __post_init__(self):
        for name in ("A1", "B1", "A3", "B3", "B2"):
            v = getattr(self, name)
            if not v >= 0:
                raise ValueError("%s must be non-negative, got %r" % (name, v))
        for name in ("L_F", "L1", "L2"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError("%s must be non-negative, got %r" % (name, v))
        if self.gamma_c is not None:
            if not 0.0 <= self.gamma_c < 1.0:
                raise ValueError("gamma_c must lie in [0, 1)")
            if self.B3 != 0.0 or abs(self.A3 - self.gamma_c) > 1e-12:
                raise ValueError("a declared contraction needs A3 = gamma_c and B3 = 0")

    @property
    def D(self):
        return self.A1 + self.A3 - 1.0

    @property
    def A13(self):
        return self.A1 + self.A3

    @property
    def B123(self):
        return self.B1 + self.B2 + self.B3

    def to_dict(self):
        out = {k: getattr(self, k) for k in ("A1", "B1", "A3", "B3", "B2", "gamma_c", "L_F", "L1", "L2")}
        out.update(D=self.D, B123=self.B123)
        return {k: (None if v is None else float(v)) for k, v in out.items()}


@dataclass(frozen=True)
class ProblemSpec:
    """A noisy operator on a finite ergodic chain.

    Parameters
    ----------
    name : str
    chain : MarkovChain
    norm : Norm
        The contraction norm |.|_c.
    x_star : ndarray
        Fixed point of the averaged operator.
    bounds : NoiseBounds
    A, c : ndarray, optional
        Affine representation, shapes (n, d, d) and (n, d).
    operator : callable, optional
        ``operator(x, s)`` for generic problems; x has shape (m, d) and s
        shape (m,).
    kind : str
        Catalog tag (``affine``, ``stationary_mean``, ``linear_sa``,
        ``counterexample``, ``generic``).
    poisson_ref : int or None
        Reference state of the hitting-time Poisson family used for L1, L2
        and diagnostics; None selects the canonical (pi . V = 0) family.
    iid : bool
        True when every row of P equals pi.
    """

    name: str
    chain: MarkovChain
    norm: Norm
    x_star: np.ndarray
    bounds: NoiseBounds
    A: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    operator: Optional[Callable] = field(default=None, compare=False)
    kind: str = "affine"
    poisson_ref: Optional[int] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.array(self.x_star, dtype=float).reshape(-1)
        x.setflags(write=False)
        object.__setattr__(self, "x_star", x)
        if self.A is not None:
            A = np.array(self.A, dtype=float)
            c = np.array(self.c, dtype=float)
            n, d = self.chain.n_states, self.dim
            if A.shape != (n, d, d) or c.shape != (n, d):
                raise ValueError("affine data must have shapes (n, d, d) and (n, d)")
            A.setflags(write=False)
            c.setflags(write=False)
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "c", c)
        elif self.operator is None:
            raise ValueError("either affine data or an operator is required")

    @property
    def dim(self):
        return self.x_star.shape[0]

    @property
    def affine(self):
        return self.A is not None

    @property
    def iid(self):
        P = self.chain.P
        return bool(np.allclose(P, P[0][None, :], atol=1e-15))

    @property
    def A_bar(self):
        return np.tensordot(self.chain.pi, self.A, axes=1)

    @property
    def c_bar(self):
        return self.chain.pi @ self.c

    def F(self, x, s):
        """Evaluate F(x, s); x of shape (d,) or (m, d), s int or (m,)."""
        x = np.asarray(x, dtype=float)
        s = np.asarray(s)
        if self.affine:
            if x.ndim == 1 and s.ndim == 0:
                return self.A[s] @ x + self.c[s]
            xb = np.broadcast_to(x, s.shape + (self.dim,)) if x.ndim == 1 else x
            return np.einsum("mij,mj->mi", self.A[s], xb) + self.c[s]
        if x.ndim == 1 and s.ndim == 0:
            return np.asarray(self.operator(x[None, :], s[None]), dtype=float)[0]
        if x.ndim == 1:
            x = np.broadcast_to(x, s.shape + (self.dim,))
        return np.asarray(self.operator(x, s), dtype=float)

    def F_all_states(self, x):
        """F(x, s) for every state; returns (n, d)."""
        n = self.chain.n_states
        return self.F(np.asarray(x, dtype=float), np.arange(n))

    def with_noise_bound(self, B2):
        return replace(self, bounds=replace(self.bounds, B2=float(B2)))

    def describe(self):
        out = {
            "name": self.name,
            "kind": self.kind,
            "dim": self.dim,
            "norm": self.norm.describe(),
            "x_star": self.x_star.tolist(),
            "chain": self.chain.to_json(),
            "bounds": self.bounds.to_dict(),
            "poisson_family": "canonical" if self.poisson_ref is None else "hitting(%d)" % self.poisson_ref,
        }
        out.update(self.meta)
        return out


def average_operator(spec, x):
    """F_bar(x) = sum_s pi(s) F(x, s)."""
    x = np.asarray(x, dtype=float)
    if spec.affine:
        return spec.A_bar @ x + spec.c_bar
    return spec.chain.pi @ spec.F_all_states(x)


def operator_poisson(spec, x):
    """Poisson solution V_x (shape (n, d)) of F(x, s) - F_bar(x) + (P V_x)(s) = V_x(s),
    in the family recorded on the spec."""
    g = spec.F_all_states(x)
    if spec.poisson_ref is None:
        return solve_poisson(spec.chain, g).V
    return poisson_hitting_form(spec.chain, g, spec.poisson_ref)


# ---------------------------------------------------------------- envelopes


def _envelope_grid(norm, dim, radius, n_radii, n_dirs, rng):
    if n_radii < 2 or n_dirs < 1:
        raise GridTooSmall("need at least 2 radii and 1 direction")
    radii = np.geomspace(radius * 1e-3, radius, n_radii)
    g = rng.standard_normal((n_dirs, dim))
    if norm.kind == "sup":
        # include the sup-ball vertices' directions
        g = np.vstack([g, np.sign(g)])
    g = g[norm(g) > 0]
    dirs = g / norm(g)[:, None]
    return radii, dirs


def affine_envelope(r, e):
    """Smallest (A, B) >= 0 with A r_i + B >= e_i, minimising A r_mid + B.

    r_mid is the midpoint of the radial range, so the line minimises the
    average envelope over [0, max r].  The solution is a vertex of the LP,
    i.e. supported by at most two grid points; B is then re-tightened so
    that the largest residual is exactly zero.
    """
    r = np.asarray(r, dtype=float)
    e = np.asarray(e, dtype=float)
    if r.size == 0:
        raise GridTooSmall("empty grid")
    if np.all(e <= 0):
        return 0.0, 0.0
    r_mid = 0.5 * r.max()
    res = optimize.linprog(
        c=[r_mid, 1.0],
        A_ub=np.column_stack([-r, -np.ones_like(r)]),
        b_ub=-e,
        bounds=[(0, None), (0, None)],
        method="highs",
    )
    A = max(float(res.x[0]), 0.0) if res.status == 0 else float(np.max(e / np.maximum(r, 1e-300)))
    B = max(float(np.max(e - A * r)), 0.0)
    return A, B


def affine_noise_bounds(spec):
    """Exact global envelopes for an affine problem.

    A1 = max_s |A(s) - A_bar|_c, B1 = max_s |c(s) - c_bar|_c; with a contraction
    A3 = |A_bar|_c and B3 = 0, otherwise (A3, B3) = (|A_bar|_c, |A_bar x* + c_bar - x*|_c).
    """
    norm = spec.norm
    Ab, cb = spec.A_bar, spec.c_bar
    A1 = max(norm.operator_norm(spec.A[s] - Ab) for s in range(spec.chain.n_states))
    B1 = float(np.max(norm(spec.c - cb[None, :])))
    A3 = norm.operator_norm(Ab)
    return float(A1), B1, float(A3), 0.0


def estimate_noise_bounds(spec, grid=None, radius=10.0, n_radii=64, n_dirs=64, seed=0):
    """Affine envelopes (A1, B1) and (A3, B3) fitted on a grid.

    Parameters
    ----------
    spec : ProblemSpec
    grid : ndarray, optional
        Points x of shape (m, d).  If omitted, log-spaced radii up to
        ``radius`` times random directions (64 x 64 by default).
    radius : float
        Largest radius the grid must reach.

    Returns
    -------
    NoiseBounds
        The bounds are sound on the grid only.  For linear SA the closed
        forms (scaled by beta for the operator F_beta) are returned instead.

    Raises
    ------
    GridTooSmall
        If the grid is empty or does not reach ``radius``.
    """
    b = spec.bounds
    if spec.kind == "linear_sa":
        lin = spec.meta["linear"]
        A1, B1 = lin.beta * lin.A1_closed_form, lin.beta * lin.B1_closed_form
        return replace(b, A1=A1, B1=B1, B2=0.0)
    norm = spec.norm
    rng = np.random.Generator(np.random.Philox(seed))
    if grid is None:
        radii, dirs = _envelope_grid(norm, spec.dim, radius, n_radii, n_dirs, rng)
        X = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, spec.dim)
    else:
        X = np.atleast_2d(np.asarray(grid, dtype=float))
        if X.shape[0] < 2:
            raise GridTooSmall("grid needs at least two points")
        if norm(X).max() < radius * (1 - 1e-12):
            raise GridTooSmall("grid does not reach radius %g" % radius)

    n = spec.chain.n_states
    r1 = norm(X)
    Fbar = np.stack([average_operator(spec, x) for x in X])
    dev = np.zeros(len(X))
    for s in range(n):
        dev = np.maximum(dev, norm(spec.F(X, np.full(len(X), s)) - Fbar))
    A1, B1 = affine_envelope(r1, dev)

    Y = X + spec.x_star
    r3 = norm(X)
    Fy = np.stack([average_operator(spec, y) for y in Y])
    A3, B3 = affine_envelope(r3, norm(Fy - spec.x_star))
    if b.gamma_c is not None:
        # a declared contraction pins A3 = gamma_c and B3 = 0
        A3, B3 = b.gamma_c, 0.0
    return replace(b, A1=A1, B1=B1, A3=A3, B3=B3)


# ---------------------------------------------------------------- linear SA


def solve_lyapunov_and_beta(A_bar):
    """Solve A^T P + P A + I = 0 and return (P_bar, beta).

    beta = 1 / (2 lambda_max(A^T P_bar A)).

    Raises
    ------
    NotHurwitz
        If some eigenvalue of A has real part >= -1e-10.
    """
    A = np.atleast_2d(np.asarray(A_bar, dtype=float))
    ev = linalg.eigvals(A)
    if np.max(ev.real) >= -HURWITZ_MARGIN:
        raise NotHurwitz("max real part of spectrum is %.3g" % np.max(ev.real))
    d = A.shape[0]
    # solve_continuous_lyapunov(a, q) solves a X + X a^H = q
    P = linalg.solve_continuous_lyapunov(A.T, -np.eye(d))
    P = 0.5 * (P + P.T)
    if linalg.eigvalsh(P)[0] <= 0:
        raise NotHurwitz("Lyapunov solution is not positive definite")
    M = A.T @ P @ A
    lam = linalg.eigvalsh(0.5 * (M + M.T))[-1]
    return P, 1.0 / (2.0 * lam)


def lyapunov_residual(A_bar, P):
    A = np.asarray(A_bar, dtype=float)
    return float(np.max(np.abs(A.T @ P + P @ A + np.eye(A.shape[0]))))


@dataclass(frozen=True)
class LinearSAProblem:
    """Linear SA data: x_{k+1} = x_k + alpha_k (A(S_k) x_k + b(S_k)).

    The equivalent contractive form uses F_beta(x, s) = beta A(s) x + beta b(s) + x
    with the norm sqrt(x^T P_bar x).
    """

    chain: MarkovChain
    A_of_s: np.ndarray
    b_of_s: np.ndarray
    A_bar: np.ndarray = field(init=False)
    b_bar: np.ndarray = field(init=False)
    P_bar: np.ndarray = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self):
        A = np.array(self.A_of_s, dtype=float)
        b = np.array(self.b_of_s, dtype=float)
        n = self.chain.n_states
        if A.ndim != 3 or A.shape[0] != n or A.shape[1] != A.shape[2] or b.shape != (n, A.shape[1]):
            raise ValueError("A_of_s must be (n, d, d) and b_of_s (n, d)")
        object.__setattr__(self, "A_of_s", A)
        object.__setattr__(self, "b_of_s", b)
        pi = self.chain.pi
        object.__setattr__(self, "A_bar", np.tensordot(pi, A, axes=1))
        object.__setattr__(self, "b_bar", pi @ b)
        P, beta = solve_lyapunov_and_beta(self.A_bar)
        object.__setattr__(self, "P_bar", P)
        object.__setattr__(self, "beta", float(beta))

    @property
    def dim(self):
        return self.A_bar.shape[0]

    @property
    def norm(self):
        return Norm("weighted", self.dim, self.P_bar)

    @property
    def x_star(self):
        return -linalg.solve(self.A_bar, self.b_bar)

    @property
    def A1_closed_form(self):
        n = self.norm
        return max(n.operator_norm(a) for a in self.A_of_s) + n.operator_norm(self.A_bar)

    @property
    def B1_closed_form(self):
        n = self.norm
        return float(np.max(n(self.b_of_s)) + n(self.b_bar))

    def gamma_c(self):
        """Contraction factor |I + beta A_bar|_P of F_beta_bar."""
        return self.norm.operator_norm(np.eye(self.dim) + self.beta * self.A_bar)

    def gamma_c_analytic(self):
        """sqrt(1 - beta / (2 lambda_max(P_bar))), an upper bound on gamma_c."""
        return float(np.sqrt(max(0.0, 1.0 - self.beta / (2.0 * linalg.eigvalsh(self.P_bar)[-1]))))

    def spec(self, name="linear_sa"):
        d = self.dim
        I = np.eye(d)
        A = I[None, :, :] + self.beta * self.A_of_s
        c = self.beta * self.b_of_s
        gc = self.gamma_c()
        norm = self.norm
        bounds = NoiseBounds(
            A1=self.beta * self.A1_closed_form,
            B1=self.beta * self.B1_closed_form,
            A3=gc,
            B3=0.0,
            gamma_c=gc,
            L_F=max(norm.operator_norm(a) for a in A),
        )
        spec = ProblemSpec(name, self.chain, norm, self.x_star, bounds, A=A, c=c, kind="linear_sa",
                           meta={"linear": self})
        return _attach_poisson_constants(spec)

    def to_json(self):
        return {
            "A_bar": self.A_bar.tolist(),
            "b_bar": self.b_bar.tolist(),
            "A_per_state": self.A_of_s.tolist(),
            "b_per_state": self.b_of_s.tolist(),
            "P": self.chain.P.tolist(),
        }


def linear_sa_from_json(obj):
    """Build a LinearSAProblem from {"A_per_state", "b_per_state", "P"} and
    optional "A_bar", "b_bar" (checked against the stationary means)."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    A = np.asarray(obj["A_per_state"], dtype=float)
    P = obj.get("P")
    chain = MarkovChain(np.full((len(A), len(A)), 1.0 / len(A)) if P is None else P)
    lin = LinearSAProblem(chain, A, np.asarray(obj["b_per_state"], dtype=float))
    for key, val in (("A_bar", lin.A_bar), ("b_bar", lin.b_bar)):
        if key in obj and np.max(np.abs(np.asarray(obj[key]) - val)) > 1e-10:
            raise ValueError("%s does not match the stationary mean of the per-state data" % key)
    return lin


# ---------------------------------------------------------------- fixed points


def fixed_point(spec, x0=None, tol=1e-12, max_iter=100_000):
    """Fixed point of the averaged operator.

    Linear SA uses x* = -A_bar^{-1} b_bar; everything else iterates F_bar
    until |F_bar(x) - x|_c <= tol.
    """
    if spec.kind == "linear_sa":
        return spec.meta["linear"].x_star
    x = np.zeros(spec.dim) if x0 is None else np.asarray(x0, dtype=float)
    for _ in range(max_iter):
        nxt = average_operator(spec, x)
        if not np.all(np.isfinite(nxt)):
            break
        if spec.norm(nxt - x) <= tol:
            return nxt
        x = nxt
    raise NoConvergence("fixed-point iteration did not converge; is gamma_c misdeclared?")


def poisson_constants_L1_L2(spec):
    """(L1, L2) for a contractive problem.

    L1 = (L_F + gamma_c)(1 + tau_bar), where tau_bar is the larger of the
    maximal expected return time and the best maximal hitting time of a
    fixed reference state; L2 = L1 |x*|_c + max_s |V_0(s)|_c in the Poisson
    family recorded on the spec.

    Raises
    ------
    MissingLipschitz
        If L_F or gamma_c is unknown.
    """
    b = spec.bounds
    if b.L_F is None or b.gamma_c is None:
        raise MissingLipschitz("L_F and gamma_c are required")
    ret = float(np.max(expected_return_times(spec.chain)))
    _, hit = max_hitting_time(spec.chain)
    L1 = (b.L_F + b.gamma_c) * (1.0 + max(ret, hit))
    V0 = operator_poisson(spec, np.zeros(spec.dim))
    L2 = L1 * float(spec.norm(spec.x_star)) + float(np.max(spec.norm(V0)))
    return float(L1), float(L2)


def poisson_lipschitz_exact(spec):
    """max_s |W(s)|_c where V_x(s) = W(s) x + v(s) (affine problems only)."""
    n, d = spec.chain.n_states, spec.dim
    if spec.poisson_ref is None:
        W = solve_poisson(spec.chain, spec.A).V
    else:
        W = poisson_hitting_form(spec.chain, spec.A, spec.poisson_ref)
    return max(spec.norm.operator_norm(W[s]) for s in range(n))


def _attach_poisson_constants(spec):
    b = spec.bounds
    if b.L_F is None or b.gamma_c is None:
        return spec
    # the hitting-time family is Lipschitz with the L1 above; an operator
    # that does not depend on x can keep the canonical family
    ref = None if b.L_F + b.gamma_c == 0 else max_hitting_time(spec.chain)[0]
    spec = replace(spec, poisson_ref=ref)
    L1, L2 = poisson_constants_L1_L2(spec)
    return replace(spec, bounds=replace(b, L1=L1, L2=L2))


# ---------------------------------------------------------------- builders


def affine_problem(name, chain, A, c, norm=None, kind="affine", meta=None):
    """Contractive affine problem F(x, s) = A(s) x + c(s) with exact constants.

    gamma_c = |A_bar|_c must be < 1.
    """
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    if A.ndim == 1:
        A = A[:, None, None]
    if c.ndim == 1:
        c = c[:, None]
    d = c.shape[1]
    norm = Norm("euclidean", d) if norm is None else norm
    pi = chain.pi
    Ab = np.tensordot(pi, A, axes=1)
    cb = pi @ c
    x_star = linalg.solve(np.eye(d) - Ab, cb)
    gc = norm.operator_norm(Ab)
    tmp = ProblemSpec(name, chain, norm, x_star, NoiseBounds(0, 0, 0, 0), A=A, c=c, kind=kind)
    A1, B1, A3, _ = affine_noise_bounds(tmp)
    if gc < 1:
        bounds = NoiseBounds(A1, B1, gc, 0.0, gamma_c=gc, L_F=max(norm.operator_norm(a) for a in A))
    else:
        bounds = NoiseBounds(A1, B1, A3, float(norm(Ab @ x_star + cb - x_star)))
    spec = ProblemSpec(name, chain, norm, x_star, bounds, A=A, c=c, kind=kind, meta=dict(meta or {}))
    return _attach_poisson_constants(spec)


def stationary_mean(P, f, name="stationary_mean"):
    """F(x, s) = f(s): SA with alpha_k = 1/(k+1) from x0 = 0 is the running
    empirical mean of f(S_k)."""
    chain = MarkovChain(P, labels=[float(v) for v in np.ravel(f)])
    f = np.asarray(f, dtype=float).reshape(chain.n_states, -1)
    n, d = f.shape
    return affine_problem(name, chain, np.zeros((n, d, d)), f, kind="stationary_mean")


def scalar_counterexample(a, b, N, name="scalar_counterexample"):
    """F(x, s) = s x + b (s - a) with i.i.d. S in {a + N, a - 1},
    P(S = a + N) = 1/(N + 1).  F_bar(x) = a x and x* = 0."""
    if not 0 < a < 1 or not N > 0 or b < 0:
        raise ValueError("need a in (0, 1), N > 0 and b >= 0")
    p_hi = 1.0 / (N + 1.0)
    row = [p_hi, 1.0 - p_hi]
    labels = (a + N, a - 1.0)
    chain = MarkovChain([row, row], labels=labels)
    s = np.array(labels)
    meta = {"a": a, "b": b, "N": N}
    return affine_problem(name, chain, s, b * (s - a), kind="counterexample", meta=meta)


# doubly stochastic and aperiodic, so pi is uniform
DEMO_P = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]]
DEMO_SLOPES = {
    "negative": (0.3, 0.5, 0.7),
    "zero": (0.0, 0.5, 1.0),
    "positive": (-0.5, 0.5, 1.5),
}


def contraction_demo(regime="negative", dim=1, offsets=(1.0, -1.0, 0.5), name=None):
    """Three-state contraction F(x, s) = a(s) x + c(s) with mean slope 0.5.

    ``regime`` picks a(s) so that D = A1 + A3 - 1 is negative (-0.3),
    zero, or positive (0.5).
    """
    slopes = np.asarray(DEMO_SLOPES[regime], dtype=float)
    chain = MarkovChain(DEMO_P)
    A = slopes[:, None, None] * np.eye(dim)[None, :, :]
    c = np.outer(offsets, np.ones(dim)) / np.sqrt(dim)
    return affine_problem(name or "contraction_" + regime, chain, A, c, meta={"regime": regime})


CATALOG = {
    "stationary_mean": lambda: stationary_mean([[0.9, 0.1], [0.2, 0.8]], [1.0, -1.0]),
    "linear_sa": lambda: LinearSAProblem(
        MarkovChain([[0.7, 0.3], [0.4, 0.6]]),
        [[[-1.5, 0.3], [0.0, -0.8]], [[-0.5, -0.2], [0.4, -1.4]]],
        [[1.0, 0.0], [-0.5, 1.0]],
    ).spec(),
    "scalar_counterexample": lambda: scalar_counterexample(0.5, 1.0, 0.5),
    "contraction_demo": lambda: contraction_demo("negative"),
}


def build(name, **kw):
    """Build a catalog problem by name."""
    if name not in CATALOG:
        raise KeyError("unknown problem %r; known: %s" % (name, ", ".join(sorted(CATALOG))))
    return CATALOG[name](**kw) if kw else CATALOG[name]()
