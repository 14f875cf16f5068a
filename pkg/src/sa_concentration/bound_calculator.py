"""Step sizes, the constants ledger and the bound curves.

Every formula here is a closed-form expression in the noise envelope
(A1, B1, A3, B3, B2, L1, L2), the Moreau-envelope constants (eta, L_s, l, u,
l_cs) and the schedule alpha_k = alpha / (k + h)^z.  Throughout,
c := A1 |x*|_c + B123 and D := A1 + A3 - 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .errors import BadParams, DegenerateStart, HorizonExceeded, NoConvergence, RegimeUnsupported
from .noise_models import quantile_B, truncation_bias_g

D_TOL = 1e-12  # |D| below this is treated as D = 0


def sign_of_D(D, tol=D_TOL):
    """-1, 0 or +1."""
    if abs(D) <= tol:
        return 0
    return 1 if D > 0 else -1


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class StepSchedule:
    """alpha_k = alpha / (k + h)^z, defined for k >= -1.

    ``h`` only has to be positive here so that plain averaging schedules
    such as 1/(k+1) can be expressed; ``check_admissible`` flags h < 8 and
    the bound formulas need h > 1.
    """

    alpha: float
    h: float
    z: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise BadParams("alpha must be positive and finite")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise BadParams("h must be positive and finite")
        if not 0.0 < self.z <= 1.0:
            raise BadParams("z must lie in (0, 1]")

    def alpha_k(self, k):
        k = np.asarray(k, dtype=float)
        return self.alpha / (k + self.h) ** self.z

    @property
    def alpha0(self):
        return self.alpha / self.h**self.z

    @property
    def alpha_m1(self):
        """alpha_{-1}; needs h > 1."""
        if self.h <= 1:
            raise BadParams("alpha_{-1} needs h > 1")
        return self.alpha / (self.h - 1.0) ** self.z

    def partial_sum(self, k):
        """sum_{i<k} alpha_i, summed exactly."""
        return float(np.sum(self.alpha_k(np.arange(int(k)))))

    def integral_upper(self, k):
        """Upper bound of sum_{i<k} alpha_i by the integral from -1 to k-1."""
        k = np.asarray(k, dtype=float)
        if self.z == 1.0:
            return self.alpha * np.log((k - 1 + self.h) / (self.h - 1))
        w = 1.0 - self.z
        return self.alpha / w * ((k + self.h - 1) ** w - (self.h - 1) ** w)

    def step_lemmas(self, k_max=10**6):
        """Worst slack of the three step-size inequalities over k in [0, k_max].

        Returns a dict of booleans plus the largest ratio alpha_k/alpha_{k+1}
        seen (k >= -1 for that one).
        """
        k = np.arange(0, k_max + 1, dtype=float)
        a = self.alpha_k(k)
        a_prev = self.alpha_k(k - 1)
        ks = np.arange(-1, k_max + 1, dtype=float)
        ratio = self.alpha_k(ks) / self.alpha_k(ks + 1)
        tol = 1e-12
        return {
            "ratio_le_2": bool(np.all(ratio <= 2 + tol)),
            "max_ratio": float(ratio.max()),
            "diff_le_2a2": bool(np.all(a_prev - a <= 2 * a * a / self.alpha * (1 + tol))),
            "prod_le_2a2": bool(np.all(a * a_prev <= 2 * a * a * (1 + tol))),
        }

    def to_dict(self):
        return {"alpha": float(self.alpha), "h": float(self.h), "z": float(self.z)}


# ---------------------------------------------------------------- constants


def _c_terms(bounds, env, alpha, x_star_norm):
    """C1', C2', C1, C2 and c = A1|x*| + B123."""
    L1, L2 = _lipschitz(bounds)
    A13 = bounds.A13
    c = bounds.A1 * x_star_norm + bounds.B123
    l2 = env.l_cs**2
    lm2 = min(env.l_cs, 1.0) ** 2
    Ls, u, eta = env.L_s, env.u, env.eta
    C1p = A13 * (L1 + L2) + 2 * (L1 + L2) + L1 * c
    C2p = (L1 + L2) * c + (1 + A13) * L2
    C1 = (u * Ls / (l2 * lm2) * ((3 / alpha + eta) * (L1 + L2) + (3 * L1 + 1) * (1 + A13) ** 2 + C1p)
          + u * Ls * (1 + A13) ** 2 / l2)
    C2 = ((3 / alpha + eta) * Ls * L2 / 4 + Ls / (l2 * lm2) * ((3 * L1 + 1) * c**2 + C2p)
          + Ls * c**2 / l2)
    return C1p, C2p, C1, C2, c


def _lipschitz(bounds):
    if bounds.L1 is None or bounds.L2 is None:
        raise BadParams("the ledger needs L1 and L2")
    return float(bounds.L1), float(bounds.L2)


@dataclass(frozen=True)
class AdmissibilityVerdict:
    ok: bool
    failures: tuple
    conditions: dict

    def to_dict(self):
        return {"ok": self.ok, "failures": list(self.failures),
                "conditions": {k: list(v) for k, v in self.conditions.items()}}


def check_admissible(schedule, bounds, env, x_star_norm=0.0):
    """Step-size conditions.

    z = 1 needs alpha > 2/eta; z < 1 needs h >= (4z/(alpha eta))^{1/(1-z)}.
    Both need h >= max{4 C1/(eta alpha), eta/(2 alpha),
    u L_s (L1 + L2)/(l_cs^2 alpha), 8}.  We also require alpha_0 <= 1, used
    by the one-step worst-case recursion.

    Returns
    -------
    AdmissibilityVerdict
        ``conditions`` maps a label to (lhs, rhs) with the requirement
        lhs >= rhs (strict for the alpha > 2/eta label).
    """
    a, h, z = schedule.alpha, schedule.h, schedule.z
    eta = env.eta
    L1, L2 = _lipschitz(bounds)
    _, _, C1, _, _ = _c_terms(bounds, env, a, x_star_norm)
    cond = {}
    if z == 1.0:
        cond["alpha > 2/eta"] = (a, 2.0 / eta)
    else:
        cond["h >= (4z/(alpha eta))^(1/(1-z))"] = (h, (4 * z / (a * eta)) ** (1 / (1 - z)))
    cond["h >= 4 C1/(eta alpha)"] = (h, 4 * C1 / (eta * a))
    cond["h >= eta/(2 alpha)"] = (h, eta / (2 * a))
    cond["h >= u L_s (L1+L2)/(l_cs^2 alpha)"] = (h, env.u * env.L_s * (L1 + L2) / (env.l_cs**2 * a))
    cond["h >= 8"] = (h, 8.0)
    cond["alpha_0 <= 1"] = (1.0, schedule.alpha0)
    fails = []
    for name, (lhs, rhs) in cond.items():
        good = lhs > rhs if name == "alpha > 2/eta" else lhs >= rhs
        if not good:
            fails.append(name)
    cond = {k: (float(v[0]), float(v[1])) for k, v in cond.items()}
    return AdmissibilityVerdict(not fails, tuple(fails), cond)


def admissible_schedule(bounds, env, z=1.0, x_star_norm=0.0, alpha=None):
    """Smallest integer h making (alpha, h, z) admissible.

    alpha defaults to 2.5/eta: above the z = 1 threshold 2/eta, and small
    enough to keep the 2 alpha D exponent of expansive regimes moderate.
    """
    eta = env.eta
    if alpha is None:
        alpha = 2.5 / eta
    L1, L2 = _lipschitz(bounds)
    _, _, C1, _, _ = _c_terms(bounds, env, alpha, x_star_norm)
    need = [8.0, 4 * C1 / (eta * alpha), eta / (2 * alpha),
            env.u * env.L_s * (L1 + L2) / (env.l_cs**2 * alpha), alpha]
    if z < 1.0:
        need.append((4 * z / (alpha * eta)) ** (1 / (1 - z)))
    sched = StepSchedule(alpha, float(math.ceil(max(need))), z)
    verdict = check_admissible(sched, bounds, env, x_star_norm)
    if not verdict.ok:
        raise BadParams("no admissible h for alpha = %g: %s" % (alpha, ", ".join(verdict.failures)))
    return sched


@dataclass(frozen=True)
class ConstantsLedger:
    """Inputs and every derived constant of the high-probability bounds.

    ``b_bar2`` is the full constant of the z = 1 theorems, which already
    contains ``b_bar3``.  ``b_bar2`` is None when alpha eta / 2 <= 1 (only
    possible for z < 1, where it is not used).  ``b_bar3_source`` is
    "printed" or "z0" (see ``constants_ledger``).
    """

    bounds: object
    env: object
    schedule: StepSchedule
    x0_error: float
    x_star_norm: float
    c: float
    C1p: float
    C2p: float
    C1: float
    C2: float
    D2: float
    D3: float
    theta: float
    a_bar1: float
    b_bar1: float
    b_bar2: Optional[float]
    b_bar3: float
    b_bar4: float
    c_bar1: float
    c_bar2: float
    c_bar3: float
    b_bar3_printed: float
    b_bar3_source: str
    verdict: AdmissibilityVerdict
    perturbed_start: bool = False

    @property
    def D(self):
        return self.bounds.D

    @property
    def regime(self):
        return {"D_sign": sign_of_D(self.D), "z": self.schedule.z,
                "bounded": bool(math.isfinite(self.bounds.B2))}

    def constants(self):
        names = ("c", "C1p", "C2p", "C1", "C2", "D2", "D3", "theta", "a_bar1", "b_bar1", "b_bar2",
                 "b_bar3", "b_bar4", "c_bar1", "c_bar2", "c_bar3", "b_bar3_printed")
        out = {n: (None if getattr(self, n) is None else float(getattr(self, n))) for n in names}
        out["A13"] = float(self.bounds.A13)
        out["B123"] = float(self.bounds.B123)
        out["D"] = float(self.D)
        return out

    def to_dict(self):
        return {
            "inputs": {
                "bounds": self.bounds.to_dict(),
                "envelope": self.env.to_dict(),
                "schedule": self.schedule.to_dict(),
                "x0_error": float(self.x0_error),
                "x_star_norm": float(self.x_star_norm),
                "perturbed_start": self.perturbed_start,
            },
            "constants": self.constants(),
            "b_bar3_source": self.b_bar3_source,
            "admissible": self.verdict.to_dict(),
        }


def constants_ledger(bounds, env, schedule, x0_error, x_star_norm=0.0, eps=None):
    """Evaluate C1', C2', C1, C2, D2, D3, theta, a_bar1, b_bar1..4, c_bar1..3.

    Parameters
    ----------
    bounds : NoiseBounds
        Must carry finite B2, L1 and L2.
    env : EnvelopeConstants
    schedule : StepSchedule
        Needs h > 1.
    x0_error : float
        |x_0 - x*|_c.
    x_star_norm : float
        |x*|_c.
    eps : float, optional
        Used in place of ``x0_error`` when the latter is 0.  Without it a
        zero start error raises DegenerateStart.

    Notes
    -----
    b_bar3 (= c_bar3) divides by L1^2 L2 and is infinite when the Poisson
    constants vanish.  In that case we fall back to the bound on the initial
    exponent before the last simplification,
    (u alpha / alpha_0) [(1/l)(1 + alpha_{-1} u L_s (L1+L2)/l_cs^2)
    + alpha_{-1} L_s L2 / (2 |x0 - x*|^2)], which never exceeds the printed
    form and is finite.
    """
    perturbed = False
    if not x0_error > 0:
        if eps is None:
            raise DegenerateStart("x0 = x*: theta needs a non-zero start error (pass eps to perturb)")
        if not eps > 0:
            raise BadParams("eps must be positive")
        x0_error, perturbed = float(eps), True
    if not math.isfinite(bounds.B2):
        raise BadParams("the ledger needs a finite B2; use hp_bound_unbounded for unbounded noise")
    values = [bounds.A1, bounds.B1, bounds.A3, bounds.B3, bounds.B2, x0_error, x_star_norm,
              env.eta, env.L_s, env.l, env.u, env.l_cs]
    if not all(math.isfinite(v) for v in values):
        raise BadParams("ledger inputs must be finite")
    a, h, z = schedule.alpha, schedule.h, schedule.z
    if h <= 1:
        raise BadParams("bounds need h > 1")
    L1, L2 = _lipschitz(bounds)
    C1p, C2p, C1, C2, c = _c_terms(bounds, env, a, x_star_norm)
    eta, Ls, l, u, lcs = env.eta, env.L_s, env.l, env.u, env.l_cs
    x2 = x0_error**2
    D2 = C2 + eta * Ls * L2 / 4
    den = L1**2 * x2 + L2**2 + bounds.B2**2
    if den == 0:
        raise BadParams("theta is undefined when L1, L2 and B2 all vanish")
    D3 = D2 * eta * lcs**4 / (16 * Ls**2 * u * den)
    theta = eta * lcs**4 * x2 / (32 * Ls**2 * u * den)

    D = bounds.D
    sgn = sign_of_D(D)
    if sgn > 0:
        a_bar1 = (1.0 / (h - 1)) ** (2 * a * D) * (x0_error + c / D) ** 2
    elif sgn == 0:
        a_bar1 = 2 * x2 + 2 * c**2 * a**2
    else:
        a_bar1 = 2 * x2 + 2 * c**2 / D**2

    a0, am1 = schedule.alpha0, schedule.alpha_m1
    b1 = u * a / theta
    if L1 > 0 and L2 > 0:
        b3_printed = (eta * lcs**2 * a / (64 * l * Ls**2 * a0 * L1**2 * L2 * theta)
                      * (2 * lcs**2 * L2 + 2 * u * am1 * (L1 + L2) * L2 * Ls + lcs**2 * am1 * l * Ls * L1**2))
    else:
        b3_printed = math.inf
    if math.isfinite(b3_printed):
        b3, source = b3_printed, "printed"
    else:
        b3 = (u * a / a0) * ((1 / l) * (1 + am1 * u * Ls * (L1 + L2) / lcs**2) + am1 * Ls * L2 / (2 * x2))
        source = "z0"
    if a * eta / 2 > 1:
        b2 = b1 * (8 * a * math.e * theta * D2 / ((a * eta / 2 - 1) * x2)
                   + 2 * u * Ls * (L1 + L2) * theta / (l * lcs**2)) + b3
    else:
        b2 = None
    b4 = a**2 * D3 * u / theta
    c1 = a * u / theta
    c2 = 8 * a * u * D2 / (eta * x2) + u**2 * Ls * (L1 + L2) * a / (lcs**2 * l) + c1 * math.log(math.pi**2 / 6)
    verdict = check_admissible(schedule, bounds, env, x_star_norm)
    return ConstantsLedger(
        bounds=bounds, env=env, schedule=schedule, x0_error=float(x0_error), x_star_norm=float(x_star_norm),
        c=float(c), C1p=float(C1p), C2p=float(C2p), C1=float(C1), C2=float(C2), D2=float(D2), D3=float(D3),
        theta=float(theta), a_bar1=float(a_bar1), b_bar1=float(b1), b_bar2=None if b2 is None else float(b2),
        b_bar3=float(b3), b_bar4=float(b4), c_bar1=float(c1), c_bar2=float(c2), c_bar3=float(b3),
        b_bar3_printed=float(b3_printed), b_bar3_source=source, verdict=verdict, perturbed_start=perturbed,
    )


# ---------------------------------------------------------------- curves


@dataclass(frozen=True)
class BoundCurve:
    """A bound on |x_k - x*|_c^2 as a function of (k, delta).

    ``bounding_sequence`` is an almost-sure, non-decreasing envelope T_k
    (or None).
    """

    regime: dict
    kind: str
    fn: Callable
    bounding_sequence: Optional[Callable] = None

    def __call__(self, k, delta):
        return self.fn(k, delta)

    def samples(self, ks, deltas):
        return [[int(k), float(d), float(v)] for d in deltas for k, v in zip(ks, np.atleast_1d(self.fn(np.asarray(ks), d)))]


def log_worst_case(schedule, bounds, x0_error, x_star_norm=0.0, k=None):
    """log B_k of the almost-sure envelope |x_k - x*|_c <= B_k.

    Works in logs so that the z < 1, D > 0 envelope does not overflow.
    Returns -inf where B_k = 0.
    """
    k = np.asarray(k, dtype=float)
    a, h, z = schedule.alpha, schedule.h, schedule.z
    if h <= 1:
        raise BadParams("the envelope needs h > 1")
    c = bounds.A1 * x_star_norm + bounds.B123
    D = bounds.D
    sgn = sign_of_D(D)
    S = schedule.integral_upper(k)
    with np.errstate(divide="ignore"):
        if sgn > 0:
            return D * S + math.log(x0_error + c / D) if x0_error + c / D > 0 else np.full(k.shape, -np.inf)
        if sgn == 0:
            return np.log(x0_error + c * S)
        return np.full(k.shape, math.log(x0_error - c / D) if x0_error - c / D > 0 else -np.inf)


def worst_case_envelope(schedule, bounds, x0_error, x_star_norm=0.0):
    """BoundCurve giving B_k; its bounding sequence is T_k = B_k^2.

    For z = 1 (integral from -1 to k-1 of alpha/(x+h)):
      D > 0: ((k-1+h)/(h-1))^{alpha D} (|x0 - x*| + c/D)
      D = 0: |x0 - x*| + c alpha log((k-1+h)/(h-1))
      D < 0: |x0 - x*| - c/D
    For z < 1 the sum is bounded by alpha ((k+h-1)^{1-z} - (h-1)^{1-z})/(1-z)
    and the D > 0 case becomes an exponential.
    The value ignores delta.
    """
    def B(k, delta=None):
        return np.exp(log_worst_case(schedule, bounds, x0_error, x_star_norm, k))

    regime = {"D_sign": sign_of_D(bounds.D), "z": schedule.z, "bounded": True}
    return BoundCurve(regime, "almost-sure", B, lambda k: B(k) ** 2)


def _log_term(delta):
    delta = float(delta)
    if not 0.0 < delta <= 1.0:
        raise BadParams("delta must lie in (0, 1]")
    return math.log(1.0 / delta)


def _require_b2(ledger):
    if ledger.b_bar2 is None:
        raise RegimeUnsupported("b_bar2 needs alpha eta > 2")
    return ledger.b_bar2


def theorem_b1_bracket(ledger, k, delta, K=0):
    """phi(k) with |x_k - x*|^2 <= T_k phi(k) for k >= K, for any a.s. T_k.

    z = 1:  [b1 L + b2 + b3 (h/(K+h))^{alpha eta/2 - 1} + b4 log((k-1+h)/(K-1+h))] / (k+h)
    z < 1:  [c1 L + 2 c1 log((k+1)/sqrt(K+1)) + c2
             + c3 ((K+h)/h)^z exp(-eta alpha ((k+h)^{1-z} - h^{1-z}) / (2(1-z)))] / (k+h-1)^z
    with L = log(1/delta).  Here b2 denotes the constant without b3.
    """
    s = ledger.schedule
    a, h, z = s.alpha, s.h, s.z
    k = np.asarray(k, dtype=float)
    L = _log_term(delta)
    eta = ledger.env.eta
    if z == 1.0:
        b2_core = _require_b2(ledger) - ledger.b_bar3
        br = (ledger.b_bar1 * L + b2_core + ledger.b_bar3 * (h / (K + h)) ** (a * eta / 2 - 1)
              + ledger.b_bar4 * np.log((k - 1 + h) / (K - 1 + h)))
        return br / (k + h)
    w = 1.0 - z
    br = (ledger.c_bar1 * L + 2 * ledger.c_bar1 * np.log((k + 1) / math.sqrt(K + 1)) + ledger.c_bar2
          + ledger.c_bar3 * ((K + h) / h) ** z * np.exp(-eta * a / (2 * w) * ((k + h) ** w - h**w)))
    return br / (k + h - 1) ** z


def theorem_b1_curve(ledger, T, K=0):
    """BoundCurve T_k phi(k) for a caller-supplied non-decreasing a.s. envelope T."""
    fn = lambda k, delta: T(np.asarray(k, dtype=float)) * theorem_b1_bracket(ledger, k, delta, K)
    return BoundCurve(ledger.regime, "explicit-constant", fn, T)


def theorem21(ledger, k, delta, part, D=None):
    """The two z = 1 curves; ``D`` overrides the exponent of part 2."""
    h = ledger.schedule.h
    k = np.asarray(k, dtype=float)
    L = _log_term(delta)
    b2 = _require_b2(ledger)
    tail = ledger.b_bar1 * L + b2 + ledger.b_bar4 * np.log((k + h - 1) / (h - 1))
    if part == 1:
        fac = np.maximum(1.0, np.log((k - 1 + h) / (h - 1)) ** 2)
        return ledger.a_bar1 * fac / (k + h - 1) * tail
    D = ledger.D if D is None else D
    return ledger.a_bar1 * (ledger.b_bar1 * L + b2) ** (2 * ledger.schedule.alpha * D) / (k + h - 1) * tail


def hp_bound(ledger, k, delta, beta=0.9):
    """High-probability, time-uniform bound on |x_k - x*|_c^2.

    z = 1, D <= 0:
        a1 (1 v log((k-1+h)/(h-1))^2)/(k+h-1) [b1 L + b2 + b4 log((k+h-1)/(h-1))]
    z = 1, D > 0:
        a1 [b1 L + b2]^{2 alpha D}/(k+h-1) [b1 L + b2 + b4 log((k+h-1)/(h-1))]
    z < 1, D < 0:
        a1/(k+h-1)^z [c1 L + 2 c1 log(k+1) + c2 + c3 exp(-eta alpha ((k+h)^{1-z} - h^{1-z})/(2(1-z)))]
    z < 1, D >= 0:
        the projected-ball argument carried out numerically, see ``ball_radius``.
        ``beta`` only enters the reported intersection diagnostics.

    Raises
    ------
    RegimeUnsupported
        z <= 1/2 with D > 0.
    """
    s = ledger.schedule
    a, h, z = s.alpha, s.h, s.z
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise BadParams("k must be non-negative")
    L = _log_term(delta)
    sgn = sign_of_D(ledger.D)
    if z == 1.0:
        return theorem21(ledger, k, delta, part=1 if sgn <= 0 else 2)
    if sgn < 0:
        w = 1.0 - z
        br = (ledger.c_bar1 * L + 2 * ledger.c_bar1 * np.log(k + 1) + ledger.c_bar2
              + ledger.c_bar3 * np.exp(-ledger.env.eta * a / (2 * w) * ((k + h) ** w - h**w)))
        return ledger.a_bar1 / (k + h - 1) ** z * br
    if sgn > 0 and z <= 0.5:
        raise RegimeUnsupported("z <= 1/2 with D > 0: the tail is heavier than Pareto")
    rad = ball_radius(ledger, delta)
    return rad.curve(k)


def hp_curve(ledger, beta=0.9):
    """``hp_bound`` wrapped as a BoundCurve, with T_k = B_k^2 attached."""
    T = worst_case_envelope(ledger.schedule, ledger.bounds, ledger.x0_error, ledger.x_star_norm).bounding_sequence
    kind = "explicit-constant" if ledger.schedule.z == 1.0 or ledger.D < -D_TOL else "ball-argument"
    return BoundCurve(ledger.regime, kind, lambda k, d: hp_bound(ledger, k, d, beta), T)


_BALL_GRID = np.unique(np.concatenate([np.arange(0, 20000, dtype=float),
                                       np.round(np.geomspace(2e4, 1e16, 4000))]))


@dataclass(frozen=True)
class BallRadius:
    """Radius making the projection inactive on the good event.

    With B = B_{k_star}: for k < k_star the a.s. envelope keeps iterates in
    the ball; for k >= k_star,
    (1 + alpha_k D) B sqrt(phi(k)) + alpha_k c <= B, so one more step cannot
    leave it either.  Then |x_k - x*|^2 <= min(B_k^2, B^2 phi(k)) for all k
    with probability 1 - delta, where phi is the z < 1 bracket with K = 0.
    """

    ledger: ConstantsLedger
    delta: float
    k_star: float
    log_B: float

    @property
    def B2(self):
        return math.exp(2 * self.log_B) if self.log_B < 354 else math.inf

    def log_curve(self, k):
        k = np.asarray(k, dtype=float)
        led = self.ledger
        logBk = log_worst_case(led.schedule, led.bounds, led.x0_error, led.x_star_norm, k)
        hp = 2 * self.log_B + np.log(theorem_b1_bracket(led, k, self.delta, 0))
        return np.minimum(2 * logBk, hp)

    def curve(self, k):
        with np.errstate(over="ignore"):
            return np.exp(self.log_curve(k))


def ball_radius(ledger, delta):
    """Smallest grid index k_star with
    sup_{j >= k_star} (1 + alpha_j D) sqrt(phi(j)) + alpha_{k_star} c / B_{k_star} <= 1.

    The supremum is taken over integers up to 2e4 and a geometric grid up
    to 1e16 beyond; both terms are smooth and eventually decreasing there.
    """
    s = ledger.schedule
    if s.z == 1.0:
        raise RegimeUnsupported("the numeric ball argument is for z < 1")
    g = _BALL_GRID
    phi = theorem_b1_bracket(ledger, g, delta, 0)
    a = s.alpha_k(g)
    first = (1 + a * max(ledger.D, 0.0)) * np.sqrt(phi)
    suffix = np.maximum.accumulate(first[::-1])[::-1]
    logB = log_worst_case(s, ledger.bounds, ledger.x0_error, ledger.x_star_norm, g)
    with np.errstate(over="ignore", invalid="ignore"):
        second = np.where(np.isfinite(logB), a * ledger.c * np.exp(-logB), np.inf)
    ok = suffix + second <= 1.0
    good_after = np.logical_and.accumulate(ok[::-1])[::-1]
    idx = np.flatnonzero(good_after)
    if idx.size == 0:
        raise NoConvergence("no ball radius found on the grid up to k = 1e16")
    i = int(idx[0])
    return BallRadius(ledger, float(delta), float(g[i]), float(logB[i]))


def ball_lemma_values(ledger, delta, beta=0.9, a6=None):
    """Intersection points of the printed ball lemmas, for reports.

    D > 0: k1 = d1^{1/(1-z)} log(B^2 L / log(B^2 L)^{beta z/(1-z)})^{1/(1-z)}
    with d1 = 1/a3, a3 = D alpha/(1-z); value = B_{k1}^2.
    D = 0: k1 = d1 B^2 L + d1 d2 B^2 log(d1 B^2 L) with d1 = 2 c1 (1-z)/a6,
    d2 = 2; value = a6 (k1 + h - 1)^{1-z}/(1-z) as printed.  a6 defaults to
    (1-z)|x0 - x*|/(h-1)^{1-z} + alpha c, the coefficient that puts the
    D = 0 envelope B_k under a6 (k+h-1)^{1-z}/(1-z).
    B is the radius from ``ball_radius``.  These are diagnostics only.
    """
    s = ledger.schedule
    z, h, a = s.z, s.h, s.alpha
    if z == 1.0:
        raise RegimeUnsupported("ball lemmas here are for z < 1")
    if not 0 < beta < 1:
        raise BadParams("beta must lie in (0, 1)")
    w = 1 - z
    rad = ball_radius(ledger, delta)
    L = _log_term(delta)
    out = {"B2": rad.B2, "log_B": rad.log_B, "k_star": rad.k_star, "a6_default": None}
    if L == 0:
        out.update(k1=None, value=None)
        return out
    logBL = 2 * rad.log_B + math.log(L)
    if sign_of_D(ledger.D) > 0:
        a3 = ledger.D * a / w
        if logBL <= 1:
            out.update(k1=None, value=None)
            return out
        inner = logBL - beta * z / w * math.log(logBL)
        k1 = (max(inner, 0.0) / a3) ** (1 / w)
        lv = 2 * float(log_worst_case(s, ledger.bounds, ledger.x0_error, ledger.x_star_norm, k1))
        out.update(k1=k1, log_value=lv, value=math.exp(lv) if lv < 709 else math.inf)
        return out
    if a6 is None:
        a6 = w * ledger.x0_error / (h - 1) ** w + a * ledger.c
        out["a6_default"] = a6
    d1, d2 = 2 * ledger.c_bar1 * w / a6, 2.0
    BL = math.exp(logBL) if logBL < 709 else math.inf
    k1 = d1 * BL + d1 * d2 * rad.B2 * max(math.log(d1) + logBL, 0.0)
    out.update(k1=k1, value=a6 / w * (k1 + h - 1) ** w, a6=a6)
    return out


# ---------------------------------------------------------------- unbounded noise


def ledger_factory(bounds, env, schedule, x0_error, x_star_norm=0.0, eps=None):
    """B2 -> ConstantsLedger, for ``hp_bound_unbounded``.

    For the truncated auxiliary iteration, pass the error and norm measured
    from its shifted fixed point.
    """
    def make(B2):
        return constants_ledger(replace(bounds, B2=float(B2)), env, schedule, x0_error, x_star_norm, eps)
    return make


def unbounded_pieces(ledger_fn, model, delta, T, gamma_c):
    """(ledger, B2, g) used by the unbounded-noise bound at (delta, T)."""
    if not 0 < delta < 1:
        raise BadParams("delta must lie in (0, 1)")
    if T < 1:
        raise BadParams("T must be >= 1")
    gam = delta / (2.0 * T)
    if model.bounded:
        B2, g = float(quantile_B(model, gam)), 0.0
    else:
        B2 = 2.0 * float(quantile_B(model, gam))
        g = float(truncation_bias_g(model, gam, gamma_c))
    return ledger_fn(B2), B2, g


def hp_bound_unbounded(ledger_fn, model, k, delta, T, gamma_c):
    """Bound on |x_k - x*|_c^2 for 0 <= k <= T under unbounded i.i.d. noise (z = 1).

    The auxiliary ledger uses B2 = 2 B(delta/(2T)) (or the almost-sure bound
    itself for bounded laws, where truncation is inactive).  With
    L = log(2/delta), B23 the full b2 constant and lg = log((k+h-1)/h):
      D < 0: f = a1/(k+h-1) [b1 L + B23 + b4 lg]
      D = 0: f = a1 (1 v log((k-1+h)/(h-1))^2)/(k+h-1) [b1 L + B23 + b4 lg]
      D > 0: f = a1 [b1 L + B23]^{2 alpha D}/(k+h-1) [b1 L + B23 + b4 lg]
    and the returned value is (sqrt(f) + g)^2 with g = g(delta/(2T)), the
    triangle inequality around the shifted fixed point.

    Raises
    ------
    HorizonExceeded
        If any k > T.
    """
    k = np.asarray(k, dtype=float)
    if np.any(k > T):
        raise HorizonExceeded("k = %g exceeds the horizon T = %d" % (float(np.max(k)), T))
    ledger, _, g = unbounded_pieces(ledger_fn, model, delta, T, gamma_c)
    s = ledger.schedule
    if s.z != 1.0:
        raise RegimeUnsupported("the unbounded-noise bound is stated for z = 1")
    a, h = s.alpha, s.h
    L = math.log(2.0 / delta)
    B23 = _require_b2(ledger)
    head = ledger.b_bar1 * L + B23
    br = head + ledger.b_bar4 * np.log((k + h - 1) / h)
    sgn = sign_of_D(ledger.D)
    if sgn < 0:
        f = ledger.a_bar1 / (k + h - 1) * br
    elif sgn == 0:
        f = ledger.a_bar1 * np.maximum(1.0, np.log((k - 1 + h) / (h - 1)) ** 2) / (k + h - 1) * br
    else:
        f = ledger.a_bar1 * head ** (2 * a * ledger.D) / (k + h - 1) * br
    return (np.sqrt(f) + g) ** 2


# ---------------------------------------------------------------- Polyak


def polyak_f(D, z, delta, beta=0.9):
    """f_z(delta): log(1/delta), log(1/delta)^{1/z} or exp(log(1/delta)^{(1-z)/(beta z)})."""
    L = _log_term(delta)
    sgn = sign_of_D(D)
    if sgn < 0:
        return L
    if sgn == 0:
        return L ** (1 / z)
    return math.exp(L ** ((1 - z) / (beta * z)))


def polyak_bound(ledger, k, delta, beta=0.9, s1=None, s2=None, iid=True):
    """Shape s1 log(1/delta)/k + s2 f_z(delta)^2 / k^{min(2z, 2-z)}.

    Scales default to s1 = a1 c1 and s2 = a1 (c1 + c2 + c3), the constants
    of the unaveraged z < 1 bound.

    Raises
    ------
    RegimeUnsupported
        For z = 1 or non-i.i.d. noise.
    """
    z = ledger.schedule.z
    if z == 1.0:
        raise RegimeUnsupported("the averaged bound needs z < 1")
    if not iid:
        raise RegimeUnsupported("the averaged bound needs i.i.d. noise")
    if not 0 < beta < 1:
        raise BadParams("beta must lie in (0, 1)")
    k = np.asarray(k, dtype=float)
    if np.any(k < 1):
        raise BadParams("k must be >= 1")
    if s1 is None:
        s1 = ledger.a_bar1 * ledger.c_bar1
    if s2 is None:
        s2 = ledger.a_bar1 * (ledger.c_bar1 + ledger.c_bar2 + ledger.c_bar3)
    f = polyak_f(ledger.D, z, delta, beta)
    return s1 * _log_term(delta) / k + s2 * f**2 / k ** min(2 * z, 2 - z)


# ---------------------------------------------------------------- counterexample


def _counter_part(a, b, N):
    if not 0 < a < 1:
        raise BadParams("a must lie in (0, 1)")
    if b == 1 and abs(N - (1 - a)) <= 1e-12:
        return 1
    if b == 0 and N > 1 - a:
        return 2
    raise BadParams("need (b = 1, N = 1 - a) or (b = 0, N > 1 - a)")


def counterexample_path(a, b, N, x0, schedule, k):
    """Value and probability of the all-(a+N) path of the scalar example.

    Part 1 (b = 1, N = 1 - a): x_k = x0 + sum_{i<k} alpha_i (1 - a), probability (2 - a)^{-k}.
    Part 2 (b = 0): x_k = x0 prod_{i<k} (1 + alpha_i (a + N - 1)), probability (N + 1)^{-k}.
    Returns Fractions when z = 1 (every quantity is then rational).
    """
    part = _counter_part(a, b, N)
    if not x0 > 0:
        raise BadParams("x0 must be positive")
    k = int(k)
    if k < 0:
        raise BadParams("k must be non-negative")
    exact = schedule.z == 1.0
    cast = Fraction if exact else float
    A, Nn, x = cast(a), cast(N), cast(x0)
    alpha, h = cast(schedule.alpha), cast(schedule.h)
    for i in range(k):
        ai = alpha / (i + h) if exact else schedule.alpha / (i + schedule.h) ** schedule.z
        x = x + ai * (1 - A) if part == 1 else x * (1 + ai * (A + Nn - 1))
    prob = (1 / (Nn + 1)) ** k
    return x, prob


def log_counterexample_lower_mgf(a, b, N, x0, schedule, k, lam, beta, form="sum"):
    """log of the single-path lower bound on the MGF of the scalar example.

    Part 1: E exp(lam ((k+h)^z x_k^2)^beta) >= (2-a)^{-k} exp(lam (k+h)^{beta z} P^{2 beta}),
    with P the path value (form="sum") or its integral lower bound
    x0 + alpha (1-a) ((k+h)^{1-z} - h^{1-z})/(1-z) (form="integral"; log((k+h)/h) at z = 1).
    Part 2: E exp(lam log_+((k+h)^z x_k^2)^beta) >= (N+1)^{-k} exp(lam log_+((k+h)^z P^2)^beta).
    """
    part = _counter_part(a, b, N)
    if lam < 0 or beta <= 0:
        raise BadParams("need lam >= 0 and beta > 0")
    path, _ = counterexample_path(a, b, N, x0, schedule, k)
    path = float(path)
    logp = -k * math.log(2 - a if part == 1 else N + 1)
    h, z, al = schedule.h, schedule.z, schedule.alpha
    if part == 1:
        if form == "integral":
            S = math.log((k + h) / h) if z == 1.0 else ((k + h) ** (1 - z) - h ** (1 - z)) / (1 - z)
            path = x0 + al * (1 - a) * S
        elif form != "sum":
            raise BadParams("form must be 'sum' or 'integral'")
        return logp + lam * (k + h) ** (beta * z) * path ** (2 * beta)
    arg = max(z * math.log(k + h) + 2 * math.log(path), 0.0)
    return logp + lam * arg**beta


def counterexample_lower_mgf(a, b, N, x0, schedule, k, lam, beta, form="sum"):
    """exp of ``log_counterexample_lower_mgf`` (may be inf)."""
    lv = log_counterexample_lower_mgf(a, b, N, x0, schedule, k, lam, beta, form)
    return math.exp(lv) if lv < 709 else math.inf


def curve_report(ledger, curve, ks, deltas):
    """JSON-ready {"constants", "admissible", "curve_samples"}."""
    d = ledger.to_dict()
    return {"constants": d["constants"], "admissible": d["admissible"], "inputs": d["inputs"],
            "curve_samples": curve.samples(ks, deltas)}
