"""Reference malaria simulator: scenario parsing, draw structure, determinism."""

import importlib.resources
import inspect
import json
import math

import pytest
import scipy.special

import simhijack.malaria as malaria
from conftest import ScriptCtx, SMALL_SCENARIO, serving, small_scenario
from simhijack.controller import Session, SessionConfig
from simhijack.distributions import Rng
from simhijack.malaria import (
    CHILD_AGE_DAYS,
    LIFESPAN_DAYS,
    ADDRESS_INTERPRETATIONS,
    ParseError,
    ValidationError,
    _sigmoid,
    eir_per_step,
    forward_scenario,
    initial_ages,
    interpret_address,
    load_observations,
    load_scenario,
    make_forward,
    scenario_from_dict,
)
from simhijack.wire import Bernoulli


def ifakara_path():
    return importlib.resources.files("simhijack") / "scenarios" / "ifakara.json"


# ---------------------------------------------------------------------------
# Scenario loading and validation

def test_ifakara_scenario_loads():
    cfg = load_scenario(ifakara_path())
    assert cfg.population_size == 100
    assert cfg.years == 3
    assert cfg.timestep_days == 5
    assert len(cfg.monthly_eir) == 12
    assert cfg.num_steps() == 219
    assert cfg.num_months() == 36
    lo, hi = cfg.transmission_scale_prior
    assert 0.0 <= lo < hi


@pytest.mark.parametrize("field,value,err", [
    ("population_size", 0, ValidationError),
    ("years", 0, ValidationError),
    ("timestep_days", 7, ValidationError),
    ("timestep_days", 0, ValidationError),
    ("monthly_eir", [0.1] * 11, ValidationError),
    ("monthly_eir", [-0.1] + [0.1] * 11, ValidationError),
    ("transmission_scale_prior", [2.0, 0.5], ValidationError),
    ("transmission_scale_prior", [-1.0, 0.5], ValidationError),
    ("p_child_mortality_per_step", 1.5, ValidationError),
    ("p_recovery_per_step", -0.2, ValidationError),
    ("parasite_density_sd", 0.0, ValidationError),
    ("reporting_rate", 0.0, ValidationError),
    ("reporting_rate", 1.5, ValidationError),
    ("population_size", True, ParseError),
    ("population_size", "5", ParseError),
    ("monthly_eir", "dry", ParseError),
    ("transmission_scale_prior", [1.0], ParseError),
])
def test_scenario_field_validation(field, value, err):
    doc = dict(SMALL_SCENARIO)
    doc[field] = value
    with pytest.raises(err):
        scenario_from_dict(doc)


def test_missing_field_is_parse_error():
    doc = dict(SMALL_SCENARIO)
    del doc["monthly_eir"]
    with pytest.raises(ParseError):
        scenario_from_dict(doc)


def test_validation_error_carries_field():
    doc = dict(SMALL_SCENARIO)
    doc["population_size"] = 0
    with pytest.raises(ValidationError) as exc:
        scenario_from_dict(doc)
    assert exc.value.field == "population_size"


def test_load_scenario_errors(tmp_path):
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ParseError):
        load_scenario(bad)


def test_load_observations(tmp_path):
    cfg = small_scenario()
    path = tmp_path / "obs.json"
    path.write_text(json.dumps([3] * 12))
    assert load_observations(path, cfg) == [3] * 12
    path.write_text(json.dumps([3.0] * 12))
    assert load_observations(path, cfg) == [3] * 12
    path.write_text(json.dumps([3] * 11))
    with pytest.raises(ValidationError):
        load_observations(path, cfg)
    path.write_text(json.dumps([2.5] + [3] * 11))
    with pytest.raises(ValidationError):
        load_observations(path, cfg)
    path.write_text(json.dumps([-1] + [3] * 11))
    with pytest.raises(ValidationError):
        load_observations(path, cfg)
    path.write_text(json.dumps({"m": 1}))
    with pytest.raises(ParseError):
        load_observations(path, cfg)


# ---------------------------------------------------------------------------
# Deterministic structure

def test_initial_ages_spread():
    ages = initial_ages(100)
    assert ages == [(i * LIFESPAN_DAYS) // 100 for i in range(100)]
    assert ages[0] == 0
    assert all(0 <= a < LIFESPAN_DAYS for a in ages)
    assert sorted(ages) == ages
    assert sum(1 for a in ages if a < CHILD_AGE_DAYS) > 0


def test_eir_per_step_identities():
    cfg = small_scenario(timestep_days=5, monthly_eir=[1.0] * 12)
    assert eir_per_step(cfg, 0) == pytest.approx(1 / 6)
    season = load_scenario(ifakara_path())
    assert eir_per_step(season, 0) == eir_per_step(season, 360)
    assert eir_per_step(season, 29) == eir_per_step(season, 0)
    assert eir_per_step(season, 30) == season.monthly_eir[1] * 5 / 30
    # Step values over one 30-day month sum back to the monthly EIR.
    total = sum(eir_per_step(season, d) for d in range(0, 30, 5))
    assert total == pytest.approx(season.monthly_eir[0])


def test_sigmoid_guarded():
    assert _sigmoid(-800.0) == 0.0
    assert _sigmoid(800.0) == 1.0
    for x in (-5.0, -0.5, 0.0, 0.5, 5.0):
        assert _sigmoid(x) == pytest.approx(float(scipy.special.expit(x)), rel=1e-12)


def test_outcome_shape_small():
    cfg = small_scenario()  # 12 monthly steps, 12 months
    ctx = ScriptCtx(1)
    out = forward_scenario(ctx, cfg)
    assert out.dims == (24,)
    assert ctx.frames == []  # balanced push/pop
    assert ctx.observes == []  # no observations configured


def test_outcome_shape_ifakara():
    cfg = load_scenario(ifakara_path())
    out = forward_scenario(ScriptCtx(3), cfg)
    assert out.dims == (255,)  # 219 per-step counts + 36 monthly counts


def test_deterministic_under_seed():
    cfg = small_scenario()
    a = forward_scenario(ScriptCtx(9), cfg)
    b = forward_scenario(ScriptCtx(9), cfg)
    c = forward_scenario(ScriptCtx(10), cfg)
    assert a == b
    assert a != c


def test_zero_eir_means_no_infections():
    cfg = small_scenario(monthly_eir=[0.0] * 12)
    for seed in (0, 1, 2):
        out = forward_scenario(ScriptCtx(seed), cfg)
        assert all(v == 0.0 for v in out.values)


def test_no_module_level_randomness():
    src = inspect.getsource(malaria)
    assert "import random" not in src
    assert "numpy" not in src


# ---------------------------------------------------------------------------
# Draw inventory

EXPECTED_TAGS = {
    "transmission_scale": "Uniform",
    "init_human": "Uniform",
    "infect": "Bernoulli",
    "child_mortality": "Bernoulli",
    "parasite_density": "Normal",
    "within_host": "Normal",
    "clinical_severe": "Bernoulli",
    "clinical": "Bernoulli",
    "recover": "Bernoulli",
}


def saturating_ctx(seed=5):
    cfg = small_scenario()
    ctx = ScriptCtx(seed)
    forward_scenario(ctx, cfg, observations=[2] * 12)
    return cfg, ctx


def test_address_inventory():
    _, ctx = saturating_ctx()
    addrs = {a for a, _, _ in ctx.draws}
    step_tags = set(EXPECTED_TAGS) - {"transmission_scale", "init_human"}
    expected = {f"[forward; {t}]__{EXPECTED_TAGS[t]}"
                for t in ("transmission_scale", "init_human")}
    expected |= {f"[forward; update_human; {t}]__{EXPECTED_TAGS[t]}"
                 for t in step_tags}
    assert addrs == expected
    assert {a for a, _, _ in ctx.observes} == {"[forward; reported_cases]__Poisson"}
    assert "[forward; update_human; within_host]__Normal" in addrs


def test_draw_order_prefix():
    cfg, ctx = saturating_ctx()
    n = cfg.population_size
    addrs = [a for a, _, _ in ctx.draws]
    assert addrs[0] == "[forward; transmission_scale]__Uniform"
    assert addrs[1:1 + n] == ["[forward; init_human]__Uniform"] * n
    assert addrs[1 + n].endswith("infect]__Bernoulli")


def test_infection_probability_wiring():
    cfg, ctx = saturating_ctx()
    n = cfg.population_size
    scale = ctx.draws[0][2]
    imms = [v for _, _, v in ctx.draws[1:1 + n]]
    eir = eir_per_step(cfg, 0)
    infect_dists = [d for a, d, _ in ctx.draws if a.endswith("infect]__Bernoulli")]
    for j in range(n):
        lam = scale * eir * (1.0 - imms[j])
        assert infect_dists[j].p == -math.expm1(-lam)


def test_monthly_observe_cadence():
    cfg = load_scenario(ifakara_path())
    ctx = ScriptCtx(4)
    forward_scenario(ctx, cfg, observations=[1] * cfg.num_months())
    assert len(ctx.observes) == cfg.num_months() == 36
    assert all(d.rate >= 0.1 for _, d, _ in ctx.observes)
    assert all(v == 1.0 for _, _, v in ctx.observes)


def test_death_skips_remaining_draws():
    # One child (member 0); certain death ends their update immediately and
    # no one else ever enters the child age band.
    cfg = small_scenario(p_child_mortality_per_step=1.0)
    ctx = ScriptCtx(6)
    forward_scenario(ctx, cfg)
    tags = [a.rsplit("; ", 1)[-1].split("]")[0] for a, _, _ in ctx.draws]
    mort = [i for i, t in enumerate(tags) if t == "child_mortality"]
    assert len(mort) == 1
    assert tags[mort[0] + 1] == "infect"  # straight to the next member
    # After the death, steps cover one fewer member: 4 members with at least
    # infect and recover each.
    assert tags.count("infect") == cfg.population_size + 11 * 4


def test_interpret_address():
    assert interpret_address("[forward; update_human; within_host]__Normal") == \
        ADDRESS_INTERPRETATIONS["within_host"]
    assert interpret_address("[forward; transmission_scale]__Uniform") == \
        ADDRESS_INTERPRETATIONS["transmission_scale"]
    assert interpret_address("[forward; nonsense]__Normal") is None
    assert interpret_address("no brackets") is None


# ---------------------------------------------------------------------------
# Remote execution equivalence

def test_remote_run_matches_local_mirror(tmp_path):
    cfg = small_scenario()
    ep = f"ipc://{tmp_path}/mal.sock"
    seed = 31337
    with serving(ep, make_forward(cfg), model_name="malaria"):
        with Session(SessionConfig(ep, master_seed=seed)) as s:
            trace = s.run_forward(trace_id=0)
    local = ScriptCtx(seed)  # controller seeds trace 0 with the master seed
    out = forward_scenario(local, cfg)
    assert trace.outcome == out
    assert [(a, v) for a, _, v in local.draws] == \
           [(e.address, e.value.values[0]) for e in trace.events]
