"""Additive martingale-difference noise: radial laws, tail quantiles B(gamma),
truncation, and truncation-bias bounds g(gamma)."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import gamma as gamma_fn, ndtri

from .errors import InvalidGamma, UnsupportedModel
from .norms import Norm

KINDS = ("bounded_ball", "sub_weibull", "sub_pareto", "point_mass", "centered_exponential")
UNBOUNDED = ("sub_weibull", "sub_pareto", "centered_exponential")


@dataclass(frozen=True)
class NoiseModel:
    """Noise law Z = W * v with radial part W and a symmetric direction v.

    kinds
        ``bounded_ball`` (B2): W = B2 U^{1/d}, so |Z|_c <= B2 surely.
        ``sub_weibull`` (p, q, theta): P(W >= x) = min(1, p exp(-q x^{1/theta})).
        ``sub_pareto`` (p, theta): P(W >= x) = min(1, p x^{-theta}).
        ``point_mass``: Z = 0.
        ``centered_exponential``: Z = (E - 1) v0 with E ~ Exp(1) and a fixed
        unit vector v0.  Mean zero but not symmetric, so truncation shifts the
        mean; dominated by a sub-Weibull(e, 1, 1) radial law.

    direction
        ``isotropic``: v = g / |g|_c with g standard normal.
        ``axis``: v = +-v0 / |v0|_c with a fair random sign.
    """

    kind: str
    dim: int = 1
    B2: float = 0.0
    p: float = 1.0
    q: float = 1.0
    theta: float = 1.0
    direction: str = "isotropic"
    axis: Optional[tuple] = None
    norm: Optional[Norm] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedModel("unknown noise kind %r" % self.kind)
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.kind == "bounded_ball" and not self.B2 >= 0:
            raise ValueError("B2 must be non-negative")
        if self.kind == "sub_weibull" and not (self.theta >= 0.5 and self.p > 0 and self.q > 0):
            raise ValueError("sub-Weibull needs theta >= 1/2 and p, q > 0")
        if self.kind == "sub_pareto" and not (self.theta >= 2 and self.p > 0):
            raise ValueError("sub-Pareto needs theta >= 2 and p > 0")
        if self.direction not in ("isotropic", "axis"):
            raise ValueError("direction must be 'isotropic' or 'axis'")
        if self.norm is None:
            object.__setattr__(self, "norm", Norm("euclidean", self.dim))
        if self.axis is not None:
            object.__setattr__(self, "axis", tuple(float(a) for a in self.axis))
        elif self.direction == "axis" or self.kind == "centered_exponential":
            object.__setattr__(self, "axis", (1.0,) + (0.0,) * (self.dim - 1))

    @property
    def bounded(self):
        return self.kind in ("bounded_ball", "point_mass")

    @property
    def symmetric(self):
        return self.kind != "centered_exponential"

    @property
    def n_uniforms(self):
        """Uniforms consumed per sample by ``from_uniforms``."""
        if self.kind == "point_mass":
            return 0
        if self.kind == "centered_exponential":
            return 1
        return 1 + (self.dim if self.direction == "isotropic" else 1)

    def sup_bound(self):
        """Almost-sure bound on |Z|_c (inf for unbounded laws)."""
        if self.kind == "point_mass":
            return 0.0
        if self.kind == "bounded_ball":
            return float(self.B2)
        return float("inf")

    def describe(self):
        out = {"kind": self.kind, "dim": self.dim}
        if self.kind == "bounded_ball":
            out["B2"] = self.B2
        elif self.kind == "sub_weibull":
            out.update(p=self.p, q=self.q, theta=self.theta)
        elif self.kind == "sub_pareto":
            out.update(p=self.p, theta=self.theta)
        if self.kind != "point_mass":
            out["direction"] = self.direction
        return out

    @classmethod
    def from_config(cls, obj, norm=None):
        kind = obj["kind"]
        dim = int(obj.get("dim", norm.dim if norm is not None else 1))
        kw = {k: obj[k] for k in ("B2", "p", "q", "theta", "direction") if k in obj}
        if "axis" in obj:
            kw["axis"] = tuple(obj["axis"])
        return cls(kind=kind, dim=dim, norm=norm, **kw)


def open_uniform(raw):
    """Map draws in [0, 1) to the open interval (0, 1)."""
    return np.clip(raw, 2.0**-60, 1.0 - 2.0**-53)


def radial_from_uniform(model, u):
    """Radial magnitude W from uniforms u in (0, 1)."""
    if model.kind == "bounded_ball":
        return model.B2 * u ** (1.0 / model.dim)
    if model.kind == "sub_weibull":
        return np.maximum(np.log(model.p / u) / model.q, 0.0) ** model.theta
    if model.kind == "sub_pareto":
        return (model.p / u) ** (1.0 / model.theta)
    raise UnsupportedModel(model.kind)


def _unit_axis(model):
    v = np.asarray(model.axis, dtype=float)
    return v / model.norm(v)


def from_uniforms(model, U):
    """Noise vectors from an array of uniforms with trailing axis n_uniforms."""
    U = np.asarray(U, dtype=float)
    lead = U.shape[:-1]
    if model.kind == "point_mass":
        return np.zeros(lead + (model.dim,))
    U = open_uniform(U)
    if model.kind == "centered_exponential":
        e = -np.log(U[..., 0])
        return (e - 1.0)[..., None] * _unit_axis(model)
    w = radial_from_uniform(model, U[..., 0])
    if model.direction == "axis":
        sign = np.where(U[..., 1] < 0.5, -1.0, 1.0)
        return (w * sign)[..., None] * _unit_axis(model)
    g = ndtri(U[..., 1:])
    if model.dim == 1:
        v = np.sign(g)
        v[v == 0] = 1.0
    else:
        nrm = model.norm(g)
        bad = nrm == 0
        if np.any(bad):
            g[bad] = 0.0
            g[bad, 0] = 1.0
            nrm = model.norm(g)
        v = g / nrm[..., None]
    return w[..., None] * v


def sample_noise(model, rng, k=None, size=None):
    """Draw noise vectors.

    ``k`` is accepted for interface symmetry; the law does not depend on it.
    Returns shape (d,) when ``size`` is None, else (size, d).
    """
    n = 1 if size is None else int(size)
    m = model.n_uniforms
    U = rng.random((n, m)) if m else np.zeros((n, 0))
    Z = from_uniforms(model, U)
    return Z[0] if size is None else Z


def _check_gamma(gamma):
    if not (0.0 < gamma <= 1.0) or not np.isfinite(gamma):
        raise InvalidGamma("gamma must lie in (0, 1], got %r" % (gamma,))


def dominating_law(model):
    """(kind, p, q, theta) of the radial law used for quantiles and bias."""
    if model.kind == "centered_exponential":
        return "sub_weibull", np.e, 1.0, 1.0
    return model.kind, model.p, model.q, model.theta


def quantile_B(model, gamma):
    """Level B(gamma) with P(W > B(gamma)) <= gamma.

    Bounded laws return their almost-sure bound as a constant.
    """
    _check_gamma(gamma)
    if model.bounded:
        return model.sup_bound()
    kind, p, q, theta = dominating_law(model)
    if kind == "sub_weibull":
        return max(np.log(p / gamma) / q, 0.0) ** theta
    return (p / gamma) ** (1.0 / theta)


@lru_cache(maxsize=None)
def weibull_series_constant(theta, power=None):
    """log 2 * sum_i (i+1)^power / 2^i, summed until terms drop below 1e-17."""
    power = theta if power is None else power
    total, i = 0.0, 0
    while True:
        term = (i + 1) ** power / 2.0**i
        total += term
        if term < 1e-17 * total and i > 10:
            break
        i += 1
    return np.log(2.0) * total


def lemma_bias_constant(model):
    """The constant c of the tail-bias lemmas, from the dyadic series."""
    kind, p, q, theta = dominating_law(model)
    if kind == "sub_weibull":
        return 2.0 * np.log(2.0) if theta <= 1 else weibull_series_constant(theta)
    return 1.0 / (1.0 - 2.0 ** (-(theta - 1.0) / theta))


def lemma_tail_bound(model, gamma):
    """The tail-bias lemma's closed form, as printed (no 1/(1 - gamma_c))."""
    _check_gamma(gamma)
    if model.bounded:
        return 0.0
    kind, p, q, theta = dominating_law(model)
    c = lemma_bias_constant(model)
    if kind == "sub_weibull":
        L = max(np.log(p / gamma) / q, 0.0)
        if L == 0.0:
            return float("inf") if theta < 1 else 0.0
        return gamma * theta * c / q * L ** (theta - 1.0)
    return c * gamma ** ((theta - 1.0) / theta) * p ** (1.0 / theta) / theta


def tail_integral_bound(model, gamma):
    """Upper bound on the integral of P(W >= x) over [B(gamma), inf)."""
    if model.bounded:
        return 0.0
    kind, p, q, theta = dominating_law(model)
    if kind == "sub_weibull" and p <= gamma:
        # B(gamma) = 0: the integral is the full mean of the tight law
        return p * gamma_fn(theta + 1.0) / q**theta
    if kind == "sub_weibull" and theta > 1:
        # convexity gives K_{i+1} - K_i <= (theta log2 / q) L_{i+1}^{theta-1}
        # and L_{i+1} <= (i+1)(L_0 + log2/q)
        L = max(np.log(p / gamma) / q, 0.0)
        c = weibull_series_constant(theta, theta - 1.0)
        return gamma * theta * c / q * (L + np.log(2.0) / q) ** (theta - 1.0)
    return lemma_tail_bound(model, gamma)


def tail_expectation_bound(model, gamma):
    """Upper bound on E[W 1{W >= B(gamma)}] = B P(W >= B) + tail integral."""
    _check_gamma(gamma)
    if model.bounded:
        return 0.0
    return gamma * quantile_B(model, gamma) + tail_integral_bound(model, gamma)


def truncation_bias_g(model, gamma, gamma_c):
    """Bias bound g(gamma) on the fixed-point shift caused by truncation."""
    _check_gamma(gamma)
    if not 0.0 <= gamma_c < 1.0:
        raise ValueError("gamma_c must lie in [0, 1)")
    return tail_expectation_bound(model, gamma) / (1.0 - gamma_c)


def truncation_bias_g_printed(model, gamma, gamma_c):
    """g(gamma) with the lemma closed form exactly as printed (reporting only)."""
    return lemma_tail_bound(model, gamma) / (1.0 - gamma_c)


def truncate_and_center(model, level, sample, centering):
    """Z 1{|Z|_c <= level} - centering, row-wise."""
    if not level > 0:
        raise ValueError("level must be positive")
    Z = np.asarray(sample, dtype=float)
    keep = model.norm(Z) <= level
    return np.where(np.asarray(keep)[..., None], Z, 0.0) - np.asarray(centering, dtype=float)


def truncated_mean(model, level):
    """Exact E[Z 1{|Z|_c <= level}].

    Zero for every symmetric law; closed form for the centred exponential.
    """
    d = model.dim
    if model.symmetric or np.isinf(level):
        return np.zeros(d)
    B = float(level)
    if B >= 1.0:
        m = -(1.0 + B) * np.exp(-(1.0 + B))
    else:
        m = (1.0 - B) * np.exp(-(1.0 - B)) - (1.0 + B) * np.exp(-(1.0 + B))
    return m * _unit_axis(model)


def tail_mean(model, level):
    """Exact E[Z 1{|Z|_c > level}] (minus the truncated mean, as E[Z] = 0)."""
    return -truncated_mean(model, level)


def empirical_truncated_mean(model, level, n, rng):
    """Monte Carlo estimate of E[Z 1{|Z|_c <= level}] and its standard error."""
    Z = sample_noise(model, rng, size=n)
    keep = model.norm(Z) <= level
    T = np.where(keep[:, None], Z, 0.0)
    return T.mean(axis=0), T.std(axis=0, ddof=1) / np.sqrt(n)
