"""Shared test helpers: in-thread model servers, micro models, tiny scenarios."""

import contextlib
import socket
import threading

import pytest

from simhijack.client import serve_loop
from simhijack.distributions import Rng, sample
from simhijack.malaria import scenario_from_dict
from simhijack.trace import format_address
from simhijack.wire import (
    Bernoulli,
    Categorical,
    Exponential,
    Normal,
    Poisson,
    Tensor,
    Uniform,
)


@pytest.fixture
def ipc_endpoint(tmp_path):
    return f"ipc://{tmp_path}/model.sock"


def free_tcp_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextlib.contextmanager
def serving(endpoint, forward, model_name="micro", sessions=1):
    """Run the model server in a thread; yields a list collecting its errors."""
    ready = threading.Event()
    errors = []

    def run():
        try:
            serve_loop(endpoint, model_name, forward, sessions=sessions,
                       on_ready=lambda _l: ready.set())
        except BaseException as e:
            errors.append(e)

    t = threading.Thread(target=run, daemon=True)
    t.start()
    if not ready.wait(5.0):
        raise RuntimeError("model server did not bind")
    try:
        yield errors
    finally:
        # Leave the daemon thread behind if a broken test never connected.
        t.join(5.0)


_TEXT = "abz XYZ_0/;]()栗🎲λéü"


def rand_string(r, min_len=0):
    return "".join(r.choices(_TEXT, k=r.randrange(min_len, 12)))


def rand_f64(r):
    pick = r.random()
    if pick < 0.1:
        return float(r.randrange(-5, 6))
    if pick < 0.2:
        return r.uniform(-1.0, 1.0) * 1e-300
    return r.uniform(-1e9, 1e9)


def rand_tensor(r):
    dims = tuple(r.randrange(0, 4) for _ in range(r.randrange(0, 4)))
    n = 1
    for d in dims:
        n *= d
    return Tensor(dims, tuple(rand_f64(r) for _ in range(n)))


def rand_dist(r):
    kind = r.randrange(6)
    if kind == 0:
        return Normal(rand_f64(r), abs(rand_f64(r)) + 1e-3)
    if kind == 1:
        a = rand_f64(r)
        return Uniform(a, a + abs(rand_f64(r)) + 1e-3)
    if kind == 2:
        return Bernoulli(r.random())
    if kind == 3:
        raw = [r.random() + 1e-9 for _ in range(r.randrange(1, 6))]
        total = sum(raw)
        return Categorical(Tensor.vector([p / total for p in raw]))
    if kind == 4:
        return Poisson(r.uniform(1e-3, 50.0))
    return Exponential(r.uniform(1e-3, 50.0))


def gauss_forward(ctx):
    return ctx.sample(Normal(0.0, 1.0), "x")


def two_site_forward(ctx):
    x = ctx.sample(Normal(0.0, 1.0), "x")
    y = ctx.sample(Normal(x.item(), 1.0), "y")
    return y


def conjugate_forward(ctx):
    """Normal(0,1) latent with one unit-variance observation at 1.0.

    Exact posterior: Normal(0.5, 0.5); log marginal: log N(1; 0, 2).
    """
    x = ctx.sample(Normal(0.0, 1.0), "x")
    ctx.observe(Normal(x.item(), 1.0), 1.0, "obs")
    return x


SMALL_SCENARIO = {
    "population_size": 5,
    "years": 1,
    "timestep_days": 30,
    "monthly_eir": [2.0] * 12,
    "transmission_scale_prior": [0.5, 1.5],
    "p_child_mortality_per_step": 0.05,
    "parasite_density_mean": 6.0,
    "parasite_density_sd": 1.5,
    "p_recovery_per_step": 0.3,
    "severe_threshold": 5.5,
    "reporting_rate": 0.3,
}


def small_scenario(**overrides):
    doc = dict(SMALL_SCENARIO)
    doc.update(overrides)
    return scenario_from_dict(doc)


class ScriptCtx:
    """Transport-free stand-in for the model SDK context.

    Draws from a seeded stream with the same address semantics, recording
    every event, so simulator behavior can be checked without a controller.
    """

    def __init__(self, seed):
        self.rng = Rng(seed)
        self.frames = []
        self.draws = []     # (address, dist, value)
        self.observes = []  # (address, dist, value)

    def push_frame(self, name):
        self.frames.append(name)

    def pop_frame(self):
        self.frames.pop()

    @contextlib.contextmanager
    def frame(self, name):
        self.push_frame(name)
        try:
            yield self
        finally:
            self.pop_frame()

    def sample(self, dist, tag):
        addr = format_address(self.frames + [tag], type(dist).__name__)
        v = sample(dist, self.rng)
        self.draws.append((addr, dist, v.values[0]))
        return v

    def observe(self, dist, value, tag):
        addr = format_address(self.frames + [tag], type(dist).__name__)
        self.observes.append((addr, dist, float(value)))
