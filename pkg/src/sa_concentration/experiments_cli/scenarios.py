"""Built-in scenarios and the JSON config format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..bound_calculator import (
    StepSchedule,
    admissible_schedule,
    check_admissible,
    constants_ledger,
    ledger_factory,
    sign_of_D,
)
from ..errors import ConfigError, SAError
from ..lyapunov_envelope import envelope_for
from ..markov_core import MarkovChain
from ..noise_models import NoiseModel, quantile_B
from ..problem_specs import LinearSAProblem, affine_problem, contraction_demo, scalar_counterexample, stationary_mean
from ..simulation_engine import RunPlan

BOUNDS = ("hp", "unbounded", "polyak", "almost_sure", "none")


def build_problem(obj):
    """ProblemSpec from {"builder": name, **args}."""
    obj = dict(obj)
    name = obj.pop("builder", None)
    try:
        if name == "stationary_mean":
            return stationary_mean(obj["P"], obj["f"])
        if name == "linear_sa":
            return LinearSAProblem(MarkovChain(obj["P"]), obj["A"], obj["b"]).spec()
        if name == "contraction_demo":
            return contraction_demo(obj.get("regime", "negative"), dim=int(obj.get("dim", 1)))
        if name == "scalar_counterexample":
            return scalar_counterexample(float(obj["a"]), float(obj["b"]), float(obj["N"]))
        if name == "affine":
            return affine_problem(obj.get("name", "affine"), MarkovChain(obj["P"]), obj["A"], obj["c"])
    except KeyError as exc:
        raise ConfigError("problem %r is missing %s" % (name, exc)) from None
    raise ConfigError("unknown problem builder %r" % name)


@dataclass(frozen=True)
class Scenario:
    """A problem, a noise law, a schedule, a horizon and a validation plan.

    ``schedule`` holds {"z", "alpha", "h"}; missing alpha/h are filled by
    ``admissible_schedule``.  ``bound`` picks the curve family: "hp" (bounded
    noise), "unbounded" (truncation argument, z = 1), "polyak" (averaged
    iterates), "almost_sure" (the deterministic envelope, valid at every delta)
    or "none".  ``kind`` selects counterexample oracles.
    """

    name: str
    problem: dict
    noise: dict
    schedule: dict
    horizon: int = 10_000
    x0: Optional[tuple] = None
    x0_offset: float = 1.0
    bound: str = "hp"
    bound_scale: float = 1.0
    deltas: tuple = (0.1, 0.01)
    rate_window: Optional[tuple] = None
    rate_quantile: float = 0.9
    rate_tol: float = 0.15
    kind: str = "sa"
    inadmissible_by_design: Optional[str] = None
    expected_regime: Optional[str] = None
    oracles: tuple = ()
    params: dict = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        if self.bound not in BOUNDS:
            raise ConfigError("bound must be one of %s" % ", ".join(BOUNDS))
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be positive")
        if not self.bound_scale > 0:
            raise ConfigError("bound_scale must be positive")
        for d in self.deltas:
            if not 0 < d < 1:
                raise ConfigError("deltas must lie in (0, 1)")

    # -------------------------------------------------------------- pieces

    def spec(self):
        return build_problem(self.problem)

    def noise_model(self, spec=None):
        spec = self.spec() if spec is None else spec
        obj = dict(self.noise)
        obj.setdefault("dim", spec.dim)
        try:
            return NoiseModel.from_config(obj, norm=spec.norm)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("bad noise config: %s" % exc) from None

    def x0_array(self, spec):
        if self.x0 is not None:
            return np.asarray(self.x0, dtype=float)
        e = np.ones(spec.dim)
        return spec.x_star + self.x0_offset * e / spec.norm(e)

    def effective_bounds(self, spec, model):
        """NoiseBounds with B2 set from the noise law.

        Bounded laws use their almost-sure bound.  Unbounded laws use the
        truncation level 2 B(delta / (2T)) at the smallest delta, the largest
        B2 the unbounded bound will ask for.
        """
        if model.bounded:
            return replace(spec.bounds, B2=model.sup_bound())
        gam = min(self.deltas) / (2.0 * self.horizon)
        return replace(spec.bounds, B2=2.0 * float(quantile_B(model, gam)))

    def envelope(self, spec):
        return envelope_for(spec.norm, spec.bounds.gamma_c)

    def step_schedule(self, spec=None, model=None):
        spec = self.spec() if spec is None else spec
        model = self.noise_model(spec) if model is None else model
        z = float(self.schedule.get("z", 1.0))
        alpha, h = self.schedule.get("alpha"), self.schedule.get("h")
        if alpha is not None and h is not None:
            return StepSchedule(float(alpha), float(h), z)
        sch = admissible_schedule(self.effective_bounds(spec, model), self.envelope(spec), z,
                                  float(spec.norm(spec.x_star)), alpha)
        return sch if h is None else StepSchedule(sch.alpha, float(h), z)

    def admissibility(self, spec=None, model=None):
        spec = self.spec() if spec is None else spec
        model = self.noise_model(spec) if model is None else model
        return check_admissible(self.step_schedule(spec, model), self.effective_bounds(spec, model),
                                self.envelope(spec), float(spec.norm(spec.x_star)))

    def ledger(self, spec=None, model=None):
        spec = self.spec() if spec is None else spec
        model = self.noise_model(spec) if model is None else model
        x0e = float(spec.norm(self.x0_array(spec) - spec.x_star))
        return constants_ledger(self.effective_bounds(spec, model), self.envelope(spec),
                                self.step_schedule(spec, model), x0e, float(spec.norm(spec.x_star)))

    def ledger_fn(self, spec, model):
        x0e = float(spec.norm(self.x0_array(spec) - spec.x_star))
        return ledger_factory(spec.bounds, self.envelope(spec), self.step_schedule(spec, model), x0e,
                              float(spec.norm(spec.x_star)))

    def plan(self, horizon=None):
        spec = self.spec()
        model = self.noise_model(spec)
        mode = "polyak" if self.bound == "polyak" else "plain"
        return RunPlan(spec, model, self.step_schedule(spec, model), int(horizon or self.horizon),
                       x0=self.x0_array(spec), mode=mode)

    def regime(self, spec=None):
        spec = self.spec() if spec is None else spec
        return {"D_sign": sign_of_D(spec.bounds.D), "z": float(self.schedule.get("z", 1.0))}

    def to_config(self):
        out = {
            "name": self.name,
            "problem": self.problem,
            "noise": self.noise,
            "schedule": self.schedule,
            "horizon": self.horizon,
            "x0_offset": self.x0_offset,
            "bound": self.bound,
            "bound_scale": self.bound_scale,
            "deltas": list(self.deltas),
            "kind": self.kind,
            "oracles": list(self.oracles),
            "params": self.params,
        }
        if self.x0 is not None:
            out["x0"] = list(self.x0)
        if self.rate_window is not None:
            out["rate_window"] = list(self.rate_window)
        if self.inadmissible_by_design:
            out["inadmissible_by_design"] = self.inadmissible_by_design
        if self.expected_regime:
            out["expected_regime"] = self.expected_regime
        return out


# ---------------------------------------------------------------- catalog

_BOUNDED = {"kind": "bounded_ball", "B2": 0.5}
_DSIGN = {"negative": "D<0", "zero": "D=0", "positive": "D>0"}


def _contraction(regime, z):
    tag = "z1" if z == 1.0 else "z075"
    return Scenario(
        name="contraction_bounded_%s_%s" % (regime, tag),
        problem={"builder": "contraction_demo", "regime": regime},
        noise=dict(_BOUNDED),
        schedule={"z": z},
        expected_regime=_DSIGN[regime],
        oracles=("as_envelope",),
        description="three-state contraction, %s, z = %g, bounded noise" % (_DSIGN[regime], z),
    )


def scenario_catalog():
    """All built-in scenarios, in a fixed order."""
    out = [
        Scenario(
            name="stationary_mean",
            problem={"builder": "stationary_mean", "P": [[0.9, 0.1], [0.2, 0.8]], "f": [1.0, -1.0]},
            noise={"kind": "point_mass"},
            schedule={"z": 1.0},
            x0=(0.0,),
            expected_regime="D<0",
            oracles=("as_envelope",),
            description="running mean of f(S_k) on a two-state chain",
        ),
        Scenario(
            name="linear_sa_markov",
            problem={"builder": "linear_sa", "P": [[0.7, 0.3], [0.4, 0.6]],
                     "A": [[[-1.5, 0.3], [0.0, -0.8]], [[-0.5, -0.2], [0.4, -1.4]]],
                     "b": [[1.0, 0.0], [-0.5, 1.0]]},
            noise={"kind": "point_mass"},
            schedule={"z": 1.0},
            oracles=("as_envelope", "lyapunov"),
            description="linear SA with Markov data in the Lyapunov-weighted norm",
        ),
    ]
    out += [_contraction(r, z) for z in (1.0, 0.75) for r in ("negative", "zero", "positive")]
    out += [
        Scenario(
            name="unbounded_subweibull",
            problem={"builder": "contraction_demo", "regime": "negative"},
            noise={"kind": "sub_weibull", "p": 2.0, "q": 1.0, "theta": 1.0},
            schedule={"z": 1.0},
            bound="unbounded",
            deltas=(0.1,),
            expected_regime="D<0",
            oracles=("truncation_shift",),
            description="sub-Weibull additive noise, truncation argument",
        ),
        Scenario(
            name="unbounded_subpareto",
            problem={"builder": "contraction_demo", "regime": "negative"},
            noise={"kind": "sub_pareto", "p": 1.0, "theta": 4.0},
            schedule={"z": 1.0},
            bound="unbounded",
            deltas=(0.1,),
            expected_regime="D<0",
            oracles=("truncation_shift",),
            description="sub-Pareto additive noise, truncation argument",
        ),
        Scenario(
            name="polyak_iid",
            problem={"builder": "affine", "name": "iid_affine", "P": [[0.5, 0.5], [0.5, 0.5]],
                     "A": [0.3, 0.7], "c": [1.0, -1.0]},
            noise=dict(_BOUNDED),
            schedule={"z": 0.75},
            bound="polyak",
            expected_regime="D<0",
            description="averaged iterates with i.i.d. operator noise",
        ),
        Scenario(
            name="counterexample_part1",
            problem={"builder": "scalar_counterexample", "a": 0.5, "b": 1.0, "N": 0.5},
            noise={"kind": "point_mass"},
            schedule={"z": 0.5, "alpha": 1.0, "h": 2.0},
            x0=(1.0,),
            bound="none",
            kind="counterexample",
            inadmissible_by_design="counterexample: small h so the expanding path shows at short horizons",
            oracles=("enumeration", "mgf_growth"),
            params={"k_grid": [10, 20, 40, 80], "lam": 1.0, "beta_offset": 0.1, "enum_k": 10},
            horizon=80,
            description="b = 1 and N = 1 - a: MGF of (k+h)^z x_k^2 at beta > 1/(2 - z)",
        ),
        Scenario(
            name="counterexample_part2",
            problem={"builder": "scalar_counterexample", "a": 0.5, "b": 0.0, "N": 2.0},
            noise={"kind": "point_mass"},
            schedule={"z": 0.5, "alpha": 1.0, "h": 2.0},
            x0=(1.0,),
            bound="none",
            kind="counterexample",
            inadmissible_by_design="counterexample: small h so the expanding path shows at short horizons",
            oracles=("enumeration", "mgf_growth"),
            params={"k_grid": [10, 20, 40, 80], "lam": 1.0, "beta_offset": 0.5, "enum_k": 8},
            horizon=80,
            description="b = 0 and N > 1 - a: MGF of log_+((k+h)^z x_k^2) at beta > 1/(1 - z)",
        ),
    ]
    for z, tag in ((1.0, "z1"), (0.75, "z075")):
        out.append(Scenario(
            name="rate_negative_%s" % tag,
            problem={"builder": "contraction_demo", "regime": "negative"},
            noise=dict(_BOUNDED),
            schedule={"z": z, "alpha": 2.5, "h": 8.0},
            horizon=100_000,
            bound="none",
            rate_window=(1e3, 1e5),
            expected_regime="D<0",
            inadmissible_by_design="rate check only: h = 8 puts k in [1e3, 1e5] in the asymptotic range",
            description="empirical rate of the 0.9-quantile, D < 0, z = %g" % z,
        ))
    return out


def catalog_by_name():
    return {s.name: s for s in scenario_catalog()}


_FIELDS = {f for f in Scenario.__dataclass_fields__}


def scenario_from_config(obj):
    """Scenario from a config dict.

    Either {"scenario": catalog name, **overrides} or a full description with
    at least name, problem, noise and schedule.
    """
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    obj = dict(obj)
    unknown = set(obj) - _FIELDS - {"scenario"}
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
    for key in ("deltas", "rate_window", "oracles", "x0"):
        if obj.get(key) is not None:
            obj[key] = tuple(obj[key])
    if "scenario" in obj:
        base = catalog_by_name().get(obj.pop("scenario"))
        if base is None:
            raise ConfigError("unknown scenario; run `catalog` for the list")
        try:
            return replace(base, **obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    missing = {"name", "problem", "noise", "schedule"} - set(obj)
    if missing:
        raise ConfigError("config is missing %s" % ", ".join(sorted(missing)))
    try:
        return Scenario(**obj)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError("cannot read %s: %s" % (path, exc.strerror)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError("%s is not valid JSON: %s" % (path, exc)) from None
    return scenario_from_config(obj)


def check_scenario(s):
    """(admissible_or_flagged, regime_consistent) for a scenario."""
    spec = s.spec()
    try:
        ok = s.admissibility(spec).ok
    except SAError:
        ok = False
    flagged = bool(s.inadmissible_by_design)
    regime = s.regime(spec)
    tag = {-1: "D<0", 0: "D=0", 1: "D>0"}[regime["D_sign"]]
    consistent = s.expected_regime is None or s.expected_regime == tag
    return ok or flagged, consistent and math.isfinite(regime["z"])
