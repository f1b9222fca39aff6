"""Reference population-based malaria simulator.

Single population node, seasonal forcing, 5-day timesteps. Every random
draw flows through the client SDK, so hijacking this model exercises the
full pipeline: one global latent (transmission_scale) makes inference over
it well-posed, and per-human draws give the trace its population texture.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from ._wiretypes import Bernoulli, Normal, Poisson, Tensor, Uniform

__all__ = [
    "ScenarioError", "ParseError", "ValidationError",
    "ScenarioConfig", "Human", "PopulationState",
    "load_scenario", "load_observations",
    "eir_per_step", "forward_scenario", "make_forward",
    "ADDRESS_INTERPRETATIONS", "interpret_address",
]

LIFESPAN_DAYS = 70 * 365
CHILD_AGE_DAYS = 5 * 365
SEASON_DAYS = 360  # 12 months x 30 days of seasonal forcing


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    """File unreadable, not JSON, or structurally wrong (missing/mistyped field)."""


class ValidationError(ScenarioError):
    """A field parsed but its value is out of range."""

    def __init__(self, fieldname: str, reason: str):
        super().__init__(f"{fieldname}: {reason}")
        self.field = fieldname


@dataclass(slots=True)
class ScenarioConfig:
    population_size: int
    years: int
    timestep_days: int
    monthly_eir: list
    transmission_scale_prior: tuple
    p_child_mortality_per_step: float
    parasite_density_mean: float
    parasite_density_sd: float
    p_recovery_per_step: float
    severe_threshold: float
    reporting_rate: float

    def num_steps(self) -> int:
        return self.years * 365 // self.timestep_days

    def num_months(self) -> int:
        return 12 * self.years

    def validate(self) -> None:
        if self.population_size < 1:
            raise ValidationError("population_size", "must be >= 1")
        if self.years < 1:
            raise ValidationError("years", "must be >= 1")
        if self.timestep_days < 1 or 30 % self.timestep_days != 0:
            raise ValidationError("timestep_days", "must divide 30")
        if len(self.monthly_eir) != 12:
            raise ValidationError("monthly_eir", "needs exactly 12 entries")
        for v in self.monthly_eir:
            if not (math.isfinite(v) and v >= 0.0):
                raise ValidationError("monthly_eir", f"entry {v!r} must be finite and >= 0")
        lo, hi = self.transmission_scale_prior
        if not (math.isfinite(lo) and math.isfinite(hi) and 0.0 <= lo < hi):
            raise ValidationError("transmission_scale_prior",
                                  "bounds must satisfy 0 <= low < high")
        for name in ("p_child_mortality_per_step", "p_recovery_per_step"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValidationError(name, "must be a probability in [0, 1]")
        if not (math.isfinite(self.parasite_density_mean)):
            raise ValidationError("parasite_density_mean", "must be finite")
        if not (math.isfinite(self.parasite_density_sd) and self.parasite_density_sd > 0):
            raise ValidationError("parasite_density_sd", "must be > 0")
        if not math.isfinite(self.severe_threshold):
            raise ValidationError("severe_threshold", "must be finite")
        if not (math.isfinite(self.reporting_rate) and 0.0 < self.reporting_rate <= 1.0):
            raise ValidationError("reporting_rate", "must be in (0, 1]")


_FIELD_TYPES = {
    "population_size": int,
    "years": int,
    "timestep_days": int,
    "monthly_eir": list,
    "transmission_scale_prior": list,
    "p_child_mortality_per_step": (int, float),
    "parasite_density_mean": (int, float),
    "parasite_density_sd": (int, float),
    "p_recovery_per_step": (int, float),
    "severe_threshold": (int, float),
    "reporting_rate": (int, float),
}


def scenario_from_dict(doc: dict) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ParseError(f"scenario must be a JSON object, got {type(doc).__name__}")
    kwargs = {}
    for name, want in _FIELD_TYPES.items():
        if name not in doc:
            raise ParseError(f"missing field {name}")
        v = doc[name]
        if isinstance(v, bool) or not isinstance(v, want):
            raise ParseError(f"field {name} has wrong type {type(v).__name__}")
        kwargs[name] = v
    eir = kwargs["monthly_eir"]
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in eir):
        raise ParseError("monthly_eir entries must be numbers")
    kwargs["monthly_eir"] = [float(x) for x in eir]
    bounds = kwargs["transmission_scale_prior"]
    if len(bounds) != 2 or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in bounds):
        raise ParseError("transmission_scale_prior must be [low, high]")
    kwargs["transmission_scale_prior"] = (float(bounds[0]), float(bounds[1]))
    for name in ("p_child_mortality_per_step", "parasite_density_mean",
                 "parasite_density_sd", "p_recovery_per_step",
                 "severe_threshold", "reporting_rate"):
        kwargs[name] = float(kwargs[name])
    cfg = ScenarioConfig(**kwargs)
    cfg.validate()
    return cfg


def load_scenario(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read scenario {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"scenario {path} is not valid JSON: {e}") from None
    return scenario_from_dict(doc)


def load_observations(path, cfg: ScenarioConfig) -> list:
    """Reported monthly case counts: a JSON list of 12*years non-negative ints."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read observations {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"observations {path} is not valid JSON: {e}") from None
    if not isinstance(doc, list):
        raise ParseError("observations must be a JSON list")
    if len(doc) != cfg.num_months():
        raise ValidationError("observations",
                              f"need {cfg.num_months()} entries, got {len(doc)}")
    out = []
    for v in doc:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0 or v != int(v):
            raise ValidationError("observations", f"entry {v!r} must be a non-negative integer")
        out.append(int(v))
    return out


@dataclass(slots=True)
class Human:
    age_days: int
    infected: bool = False
    log_parasite_density: float | None = None  # defined iff infected
    immunity: float = 0.0


@dataclass(slots=True)
class PopulationState:
    humans: list
    day: int = 0
    infected_counts: list = field(default_factory=list)
    new_infections: list = field(default_factory=list)
    clinical_cases: list = field(default_factory=list)
    severe_cases: list = field(default_factory=list)
    deaths: list = field(default_factory=list)


def eir_per_step(cfg: ScenarioConfig, day: int) -> float:
    """Infectious bites per person per timestep; 30-day piecewise-constant
    seasonality repeating every 360 days."""
    return cfg.monthly_eir[(day % SEASON_DAYS) // 30] * cfg.timestep_days / 30.0


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def initial_ages(n: int) -> list:
    """Deterministic age spread across the lifespan; ages are not latent."""
    return [(i * LIFESPAN_DAYS) // n for i in range(n)]


def forward_scenario(ctx, cfg: ScenarioConfig, observations=None) -> Tensor:
    """One forward run; outcome is per-step infected counts followed by
    monthly case counts."""
    sample = ctx.sample
    ts = cfg.timestep_days
    n_steps = cfg.num_steps()
    n_months = cfg.num_months()

    ctx.push_frame("forward")
    scale = sample(Uniform(*cfg.transmission_scale_prior), "transmission_scale").values[0]
    init_immunity = Uniform(0.0, 0.5)
    humans = []
    for age in initial_ages(cfg.population_size):
        imm = sample(init_immunity, "init_human").values[0]
        humans.append(Human(age_days=age, immunity=imm))
    state = PopulationState(humans)

    density_dist = Normal(cfg.parasite_density_mean, cfg.parasite_density_sd)
    shock_dist = Normal(0.0, 0.25)
    mortality_dist = Bernoulli(cfg.p_child_mortality_per_step)
    recovery_dist = Bernoulli(cfg.p_recovery_per_step)
    severe_dist = Bernoulli(0.5)
    threshold = cfg.severe_threshold

    monthly_cases = [0.0] * n_months
    month_cases = 0
    for t in range(n_steps):
        state.day = t * ts
        eir = eir_per_step(cfg, state.day)
        new_inf = clinical = severe = deaths = 0
        dead: list = []
        ctx.push_frame("update_human")
        for idx, h in enumerate(humans):
            lam = scale * eir * (1.0 - h.immunity)
            infect = sample(Bernoulli(-math.expm1(-lam)), "infect").values[0]
            if h.age_days < CHILD_AGE_DAYS:
                if sample(mortality_dist, "child_mortality").values[0] == 1.0:
                    dead.append(idx)
                    deaths += 1
                    continue
            if infect == 1.0 and not h.infected:
                h.infected = True
                h.log_parasite_density = sample(density_dist, "parasite_density").values[0]
                new_inf += 1
            if h.infected:
                h.log_parasite_density += sample(shock_dist, "within_host").values[0]
                ld = h.log_parasite_density
                if ld > threshold:
                    if sample(severe_dist, "clinical_severe").values[0] == 1.0:
                        severe += 1
                        month_cases += 1
                elif sample(Bernoulli(_sigmoid(ld)), "clinical").values[0] == 1.0:
                    clinical += 1
                    month_cases += 1
            if sample(recovery_dist, "recover").values[0] == 1.0 and h.infected:
                h.infected = False
                h.log_parasite_density = None
            h.age_days += ts
        ctx.pop_frame()
        for idx in reversed(dead):
            del humans[idx]
        state.infected_counts.append(float(sum(1 for h in humans if h.infected)))
        state.new_infections.append(new_inf)
        state.clinical_cases.append(clinical)
        state.severe_cases.append(severe)
        state.deaths.append(deaths)
        elapsed = (t + 1) * ts
        if elapsed % 30 == 0:
            month = elapsed // 30
            if month <= n_months:
                monthly_cases[month - 1] = float(month_cases)
                if observations is not None:
                    rate = cfg.reporting_rate * month_cases + 0.1
                    ctx.observe(Poisson(rate), float(observations[month - 1]),
                                "reported_cases")
                month_cases = 0
    ctx.pop_frame()
    return Tensor.vector(state.infected_counts + monthly_cases)


def make_forward(cfg: ScenarioConfig, observations=None):
    def forward(ctx):
        return forward_scenario(ctx, cfg, observations)
    return forward


ADDRESS_INTERPRETATIONS = {
    "transmission_scale": "global transmission multiplier (the inferable latent)",
    "init_human": "initial immunity of one population member",
    "infect": "infectious-bite exposure outcome for one member this step",
    "child_mortality": "under-5 background mortality this step",
    "parasite_density": "initial log parasite density on new infection",
    "within_host": "within-host log-density progression shock",
    "clinical_severe": "severe-case outcome at high parasite density",
    "clinical": "clinical-case outcome at moderate parasite density",
    "recover": "infection clearance this step",
    "reported_cases": "reported monthly case count (observed)",
}


def interpret_address(address: str) -> str | None:
    """Human-readable meaning of an address, keyed on its innermost tag."""
    head, sep, _ = address.rpartition("]__")
    if not sep:
        return None
    tag = head.rsplit("; ", 1)[-1].lstrip("[")
    return ADDRESS_INTERPRETATIONS.get(tag)
