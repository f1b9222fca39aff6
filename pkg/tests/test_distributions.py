"""Distribution kernels: seeded streams, exact densities, normalization, moments."""

import math
import random

import numpy as np
import pytest
import scipy.integrate
import scipy.special
import scipy.stats

from conftest import rand_dist
from simhijack._backend import impl
from simhijack.distributions import (
    MAX_POISSON_RATE,
    InvalidSpec,
    Rng,
    log_prob,
    sample,
    spec_roundtrip,
)
from simhijack.wire import (
    Bernoulli,
    Categorical,
    Exponential,
    Normal,
    Poisson,
    Tensor,
    Uniform,
)

NEG_INF = float("-inf")


def draw_many(d, n, seed):
    rng = Rng(seed)
    return np.fromiter((sample(d, rng).values[0] for _ in range(n)),
                       dtype=float, count=n)


# ---------------------------------------------------------------------------
# Seeded stream

def test_splitmix64_reference_vector():
    # First outputs of the well-known stream for seed 0.
    rng = Rng(0)
    assert [rng.next_u64() for _ in range(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_uniform01_construction():
    a, b = Rng(123), Rng(123)
    for _ in range(100):
        u = a.uniform01()
        assert u == (b.next_u64() >> 11) * 2.0 ** -53
        assert 0.0 <= u < 1.0


def test_same_seed_same_stream():
    dists = [Normal(0, 1), Uniform(-2, 5), Bernoulli(0.4),
             Categorical(Tensor.vector([0.5, 0.25, 0.25])), Poisson(3.0),
             Exponential(2.0)]
    a, b = Rng(99), Rng(99)
    xs = [sample(d, a).values[0] for d in dists for _ in range(50)]
    ys = [sample(d, b).values[0] for d in dists for _ in range(50)]
    assert xs == ys


def test_trace_seed_derivation():
    assert Rng.for_trace(10, 7).seed == 17
    # Addition wraps modulo 2^64.
    assert Rng.for_trace(2**64 - 1, 1).seed == 0
    assert Rng.for_trace(5, 0).next_u64() == Rng(5).next_u64()


def test_unknown_algorithm_rejected():
    with pytest.raises(InvalidSpec):
        Rng(0, algorithm="mersenne")


# ---------------------------------------------------------------------------
# Exact densities

def test_log_prob_normal_standard_at_zero():
    assert log_prob(Normal(0.0, 1.0), 0.0) == -0.9189385332046727


@pytest.mark.parametrize("d,x,want", [
    (Normal(0.0, 1.0), 0.0, -0.5 * math.log(2 * math.pi)),
    (Normal(2.0, 3.0), 4.5,
     -0.5 * (2.5 / 3.0) ** 2 - math.log(3.0) - 0.5 * math.log(2 * math.pi)),
    (Uniform(0.0, 1.0), 0.25, 0.0),
    (Uniform(-2.0, 6.0), 0.0, -math.log(8.0)),
    (Bernoulli(0.3), 1.0, math.log(0.3)),
    (Bernoulli(0.3), 0.0, math.log(0.7)),
    (Categorical(Tensor.vector([0.2, 0.8])), 1.0, math.log(0.8)),
    (Poisson(2.0), 3.0, 3 * math.log(2.0) - 2.0 - math.log(6.0)),
    (Exponential(1.5), 2.0, math.log(1.5) - 3.0),
    (Exponential(1.5), 0.0, math.log(1.5)),
])
def test_log_prob_analytic(d, x, want):
    assert log_prob(d, x) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("d,x", [
    (Uniform(0.0, 1.0), 2.0),
    (Uniform(0.0, 1.0), -0.5),
    (Uniform(0.0, 1.0), 1.0),          # support is the half-open interval
    (Bernoulli(0.5), 0.5),
    (Bernoulli(0.5), 2.0),
    (Categorical(Tensor.vector([0.2, 0.8])), 2.0),
    (Categorical(Tensor.vector([0.2, 0.8])), -1.0),
    (Categorical(Tensor.vector([0.2, 0.8])), 0.5),
    (Categorical(Tensor.vector([0.0, 1.0])), 0.0),  # zero-probability index
    (Poisson(2.0), -1.0),
    (Poisson(2.0), 2.5),
    (Exponential(1.0), -0.1),
])
def test_log_prob_outside_support_is_neg_inf(d, x):
    assert log_prob(d, x) == NEG_INF


def test_log_prob_uniform_includes_low_edge():
    assert log_prob(Uniform(0.0, 2.0), 0.0) == -math.log(2.0)


def test_log_prob_never_raises_for_float_input():
    dists = [Normal(0, 1), Uniform(0, 1), Bernoulli(0.5),
             Categorical(Tensor.vector([0.5, 0.5])), Poisson(3.0),
             Exponential(1.0)]
    probes = [0.0, -0.0, 1.0, -1.0, 1e308, -1e308, float("inf"),
              float("-inf"), float("nan"), 2.0**53 + 2.0]
    for d in dists:
        for x in probes:
            v = log_prob(d, x)
            assert isinstance(v, float)


def test_log_prob_poisson_large_rate_allowed():
    # The sampling cap does not restrict density evaluation.
    lam = 1000.0
    got = log_prob(Poisson(lam), 990.0)
    assert got == pytest.approx(scipy.stats.poisson(lam).logpmf(990), rel=1e-12)


def test_log_prob_scalar_tensor_input():
    assert log_prob(Normal(0, 1), Tensor.scalar(0.0)) == -0.9189385332046727
    with pytest.raises(InvalidSpec):
        log_prob(Normal(0, 1), Tensor.vector([1.0, 2.0]))


# ---------------------------------------------------------------------------
# Normalization

@pytest.mark.parametrize("d,lo,hi", [
    (Normal(0.0, 1.0), -12.0, 12.0),
    (Normal(3.0, 0.5), -3.0, 9.0),
    (Normal(-2.0, 2.5), -32.0, 28.0),
    (Uniform(0.0, 1.0), 0.0, 1.0),
    (Uniform(-3.0, -1.0), -3.0, -1.0),
    (Uniform(2.5, 7.0), 2.5, 7.0),
    (Exponential(0.5), 0.0, 80.0),
    (Exponential(1.0), 0.0, 40.0),
    (Exponential(3.0), 0.0, 14.0),
])
def test_continuous_normalization(d, lo, hi):
    total, _ = scipy.integrate.quad(lambda x: math.exp(log_prob(d, x)), lo, hi,
                                    limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("d,support", [
    (Bernoulli(0.3), [0.0, 1.0]),
    (Bernoulli(0.5), [0.0, 1.0]),
    (Bernoulli(0.99), [0.0, 1.0]),
    (Categorical(Tensor.vector([1.0])), [0.0]),
    (Categorical(Tensor.vector([0.25, 0.75])), [0.0, 1.0]),
    (Categorical(Tensor.vector([0.1, 0.2, 0.3, 0.4])), [0.0, 1.0, 2.0, 3.0]),
    (Poisson(0.5), range(0, 40)),
    (Poisson(4.0), range(0, 80)),
    (Poisson(25.0), range(0, 300)),
])
def test_discrete_normalization(d, support):
    total = math.fsum(math.exp(log_prob(d, float(x))) for x in support)
    assert total == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# Sample moments

def _categorical_stats(probs):
    idx = np.arange(len(probs))
    p = np.asarray(probs)
    mean = float(idx @ p)
    var = float(((idx - mean) ** 2) @ p)
    mu4 = float(((idx - mean) ** 4) @ p)
    g2 = mu4 / var**2 - 3.0
    return mean, var, g2


MOMENT_CASES = [
    (Normal(0.5, 2.0), scipy.stats.norm(0.5, 2.0)),
    (Uniform(-1.0, 3.0), scipy.stats.uniform(loc=-1.0, scale=4.0)),
    (Bernoulli(0.3), scipy.stats.bernoulli(0.3)),
    (Categorical(Tensor.vector([0.1, 0.2, 0.3, 0.4])), None),
    (Poisson(4.0), scipy.stats.poisson(4.0)),
    (Poisson(25.0), scipy.stats.poisson(25.0)),
    (Exponential(1.5), scipy.stats.expon(scale=1 / 1.5)),
]


@pytest.mark.parametrize("d,frozen", MOMENT_CASES,
                         ids=lambda c: type(c).__name__ if c and not hasattr(c, "dist") else None)
def test_sample_moments(d, frozen):
    n = 20000
    if frozen is None:
        mean, var, g2 = _categorical_stats(d.probs.values)
    else:
        mean, var, g2 = (float(v) for v in frozen.stats(moments="mvk"))
    xs = draw_many(d, n, seed=0xD15C0)
    mu4 = (g2 + 3.0) * var * var
    se_mean = math.sqrt(var / n)
    se_var = math.sqrt(max(mu4 - var * var, 0.0) / n)
    assert abs(xs.mean() - mean) <= 4 * se_mean
    assert abs(xs.var(ddof=1) - var) <= 4 * se_var


def test_uniform_mean_bound_100k():
    n = 100_000
    xs = draw_many(Uniform(0.0, 1.0), n, seed=2024)
    bound = 3 * (1 / math.sqrt(12)) / math.sqrt(n)
    assert abs(xs.mean() - 0.5) <= bound


def test_degenerate_bernoulli_every_draw():
    rng = Rng(31)
    assert all(sample(Bernoulli(1.0), rng).values[0] == 1.0 for _ in range(100))
    assert all(sample(Bernoulli(0.0), rng).values[0] == 0.0 for _ in range(100))


def test_degenerate_categorical_every_draw():
    d = Categorical(Tensor.vector([0.0, 0.0, 1.0]))
    rng = Rng(32)
    assert all(sample(d, rng).values[0] == 2.0 for _ in range(100))


def test_categorical_returns_integer_floats():
    d = Categorical(Tensor.vector([0.3, 0.3, 0.4]))
    rng = Rng(33)
    for _ in range(200):
        v = sample(d, rng).values[0]
        assert v in (0.0, 1.0, 2.0)
        assert v == int(v)


def test_samples_land_in_support():
    rng = Rng(34)
    for _ in range(500):
        u = sample(Uniform(2.0, 3.0), rng).values[0]
        assert 2.0 <= u < 3.0
        e = sample(Exponential(0.5), rng).values[0]
        assert e >= 0.0
        p = sample(Poisson(6.0), rng).values[0]
        assert p >= 0.0 and p == int(p)


# ---------------------------------------------------------------------------
# Spec validation and round trip

@pytest.mark.parametrize("bad", [
    Normal(0.0, 0.0),
    Normal(0.0, -1.0),
    Normal(float("nan"), 1.0),
    Uniform(2.0, 2.0),
    Uniform(3.0, 1.0),
    Bernoulli(-0.1),
    Bernoulli(1.5),
    Categorical(Tensor.vector([])),
    Categorical(Tensor.vector([0.2, 0.2])),
    Categorical(Tensor.vector([-0.5, 1.5])),
    Categorical(Tensor((2, 1), (0.5, 0.5))),
    Poisson(0.0),
    Poisson(-2.0),
    Exponential(0.0),
])
def test_invalid_specs_rejected(bad):
    rng = Rng(1)
    with pytest.raises(InvalidSpec):
        sample(bad, rng)
    with pytest.raises(InvalidSpec):
        log_prob(bad, 0.0)


def test_poisson_sampling_rate_cap():
    assert MAX_POISSON_RATE == 30.0
    rng = Rng(2)
    sample(Poisson(30.0), rng)  # at the cap: allowed
    with pytest.raises(InvalidSpec):
        sample(Poisson(30.0 + 1e-9), rng)


def test_spec_roundtrip_each_kind():
    for d in [Normal(1.5, 0.25), Uniform(-4.0, 4.0), Bernoulli(0.75),
              Categorical(Tensor.vector([0.125, 0.875])), Poisson(9.0),
              Exponential(0.125)]:
        assert spec_roundtrip(d) == d


def test_spec_roundtrip_randomized_1000():
    r = random.Random(515)
    for _ in range(1000):
        d = rand_dist(r)
        assert spec_roundtrip(d) == d


# ---------------------------------------------------------------------------
# Normal inverse CDF accuracy

def test_ndtri_matches_scipy():
    for u in np.linspace(1e-9, 1.0 - 1e-9, 2001):
        got = impl.ndtri(float(u))
        want = float(scipy.special.ndtri(u))
        assert got == pytest.approx(want, abs=2e-9, rel=2e-9)
