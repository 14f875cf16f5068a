"""Generalized Moreau envelope M(x) = min_u {|u|_c^2 / 2 + |x - u|_s^2 / (2 mu)}
with |.|_s euclidean, the choice of mu, and the drift/sandwich constants.

Norm-equivalence constants follow l_cs |x|_s <= |x|_c <= u_cs |x|_s, which is
the orientation under which l M(x) <= |x|_c^2 <= u M(x) holds with
l = 2(1 + mu l_cs^2) and u = 2(1 + mu u_cs^2).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .errors import ConditionViolated, Infeasible, SolverStall
from .norms import Norm

DEFAULT_MARGIN = 0.05


def condition_value(gamma_c, mu, l_cs, u_cs):
    """gamma_c sqrt((1 + mu u_cs^2) / (1 + mu l_cs^2)); must stay below 1."""
    return gamma_c * np.sqrt((1.0 + mu * u_cs**2) / (1.0 + mu * l_cs**2))


def choose_mu(gamma_c, l_cs, u_cs, margin=DEFAULT_MARGIN, tol=1e-12, max_halvings=200):
    """Pick the smoothing parameter mu.

    The condition value increases with mu, from gamma_c as mu -> 0 to
    gamma_c u_cs / l_cs as mu -> inf.  Returns mu = 1 if the condition holds
    there with the margin; otherwise halves mu until it does and bisects
    back up to the largest feasible value.

    Raises
    ------
    Infeasible
        If gamma_c >= 1 - margin, so no mu > 0 works.  ``asymptote`` carries
        gamma_c u_cs / l_cs.
    """
    if not 0.0 <= gamma_c < 1.0:
        raise ValueError("gamma_c must lie in [0, 1)")
    if not 0.0 < l_cs <= u_cs:
        raise ValueError("need 0 < l_cs <= u_cs")
    if not 0.0 < margin < 1.0:
        raise ValueError("margin must lie in (0, 1)")
    target = 1.0 - margin
    ok = lambda m: condition_value(gamma_c, m, l_cs, u_cs) <= target
    if ok(1.0):
        return 1.0
    if gamma_c >= target:
        raise Infeasible("gamma_c = %g leaves no room for margin %g" % (gamma_c, margin),
                         asymptote=gamma_c * u_cs / l_cs)
    hi = 1.0
    lo = 0.5
    for _ in range(max_halvings):
        if ok(lo):
            break
        hi, lo = lo, lo / 2.0
    else:
        raise Infeasible("no feasible mu found", asymptote=gamma_c * u_cs / l_cs)
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class EnvelopeConstants:
    """Constants of the Moreau-envelope Lyapunov function.

    eta = 2(1 - condition value), L_s = L / mu, l = 2(1 + mu l_cs^2),
    u = 2(1 + mu u_cs^2).
    """

    mu: float
    L: float
    eta: float
    L_s: float
    l: float
    u: float
    l_cs: float
    u_cs: float
    gamma_c: float

    @property
    def l_cM(self):
        return 1.0 / np.sqrt(1.0 + self.mu * self.u_cs**2)

    @property
    def u_cM(self):
        return 1.0 / np.sqrt(1.0 + self.mu * self.l_cs**2)

    def to_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}


def envelope_constants(gamma_c, mu, L, l_cs, u_cs):
    """Constants for a given mu.

    Raises
    ------
    ConditionViolated
        If gamma_c sqrt((1 + mu u_cs^2)/(1 + mu l_cs^2)) >= 1.
    """
    val = condition_value(gamma_c, mu, l_cs, u_cs)
    if not (mu > 0 and val < 1.0):
        raise ConditionViolated("condition value %.6g is not below 1 (mu = %g)" % (val, mu))
    return EnvelopeConstants(
        mu=float(mu),
        L=float(L),
        eta=float(2.0 * (1.0 - val)),
        L_s=float(L / mu),
        l=float(2.0 * (1.0 + mu * l_cs**2)),
        u=float(2.0 * (1.0 + mu * u_cs**2)),
        l_cs=float(l_cs),
        u_cs=float(u_cs),
        gamma_c=float(gamma_c),
    )


def envelope_for(norm_c, gamma_c, margin=DEFAULT_MARGIN, mu=None):
    """EnvelopeConstants for |.|_c = ``norm_c`` and euclidean |.|_s (L = 1)."""
    l_cs, u_cs = norm_c.equivalence_to_euclidean()
    if mu is None:
        mu = choose_mu(gamma_c, l_cs, u_cs, margin)
    return envelope_constants(gamma_c, mu, 1.0, l_cs, u_cs)


def sup_prox_threshold(x, mu):
    """Threshold t of the prox of mu |.|_inf^2 / 2 at x.

    t solves mu t = sum_i (|x_i| - t)_+; found exactly by sorting
    (t = max_k S_k / (mu + k) over the top-k partial sums S_k).
    """
    a = np.sort(np.abs(x), axis=-1)[..., ::-1]
    k = np.arange(1, a.shape[-1] + 1)
    return np.max(np.cumsum(a, axis=-1) / (mu + k), axis=-1)


def moreau_value_and_grad(constants, norm_c, norm_s, x):
    """M(x) and its gradient.

    Parameters
    ----------
    constants : EnvelopeConstants
    norm_c : Norm
        euclidean, weighted or sup.
    norm_s : Norm
        Must be euclidean.
    x : ndarray, shape (d,) or (m, d)

    Returns
    -------
    value : float or ndarray
    grad : ndarray, same shape as x
    """
    if norm_s.kind != "euclidean":
        raise ValueError("the smoothing norm must be euclidean")
    mu = constants.mu
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    if norm_c.kind == "euclidean":
        g = x / (1.0 + mu)
        return 0.5 * np.sum(x * g, axis=-1), g
    if norm_c.kind == "weighted":
        # infimal convolution of two quadratics: (Q^{-1} + mu I)^{-1}
        K = _weighted_kernel(norm_c, mu)
        g = x @ K
        return 0.5 * np.sum(x * g, axis=-1), g
    t = sup_prox_threshold(x, mu)
    if not np.all(np.isfinite(t)):
        raise SolverStall("sup-norm prox threshold is not finite")
    t = np.asarray(t)[..., None]
    u = np.clip(x, -t, t)
    r = x - u
    val = 0.5 * t[..., 0] ** 2 + 0.5 / mu * np.sum(r * r, axis=-1)
    return val, r / mu


_KERNELS = {}


def _weighted_kernel(norm_c, mu):
    key = (norm_c.weight.tobytes(), norm_c.dim, float(mu))
    K = _KERNELS.get(key)
    if K is None:
        d = norm_c.dim
        K = linalg.inv(linalg.inv(norm_c.weight) + mu * np.eye(d))
        K = 0.5 * (K + K.T)
        _KERNELS[key] = K
    return K


def moreau_value(constants, norm_c, x):
    """M(x) alone (euclidean smoothing norm)."""
    return moreau_value_and_grad(constants, norm_c, Norm("euclidean", norm_c.dim), x)[0]
