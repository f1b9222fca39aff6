"""Shared distribution semantics: sampling, log-density, and the seeded RNG.

The controller draws and scores with these; reference clients use the same
spec types to declare draws. All scalar math lives in the selected backend
so both sides of a session agree bit-for-bit.
"""

from __future__ import annotations

import math

from ._backend import impl
from ._wiretypes import (
    DIST_TAGS,
    MASK64,
    Bernoulli,
    Categorical,
    Exponential,
    Normal,
    Poisson,
    Tensor,
    Uniform,
    dist_invariant_error,
    kind_name,
)
from .wire import decode_distribution, encode_distribution

__all__ = [
    "InvalidSpec", "Rng", "RNG_ALGORITHM", "MAX_POISSON_RATE",
    "sample", "log_prob", "spec_roundtrip", "dist_params", "validate_spec",
]

RNG_ALGORITHM = "splitmix64"

# Inversion sampling is exact only for bounded rates; larger rates are out
# of scope for v1 (log_prob stays unrestricted).
MAX_POISSON_RATE = 30.0


class InvalidSpec(ValueError):
    """Parameters violate the distribution family's invariants."""


class Rng:
    """Named, seedable pseudo-random stream.

    Streams for parallel trace collection are derived arithmetically:
    seed = master_seed + trace_id (mod 2^64).
    """

    __slots__ = ("_impl", "seed", "algorithm")

    def __init__(self, seed: int, algorithm: str = RNG_ALGORITHM):
        if algorithm != RNG_ALGORITHM:
            raise InvalidSpec(f"unknown rng algorithm {algorithm!r}")
        self.seed = seed & MASK64
        self.algorithm = algorithm
        self._impl = impl.Rng(self.seed)

    @classmethod
    def for_trace(cls, master_seed: int, trace_id: int) -> "Rng":
        return cls((master_seed + trace_id) & MASK64)

    def next_u64(self) -> int:
        return self._impl.next_u64()

    def uniform01(self) -> float:
        return self._impl.uniform01()

    @property
    def raw(self):
        """Backend stream object, for hot loops that bypass this wrapper."""
        return self._impl


def validate_spec(d) -> None:
    err = dist_invariant_error(d)
    if err:
        raise InvalidSpec(err)


def dist_params(d):
    """Unpack a spec into backend kernel arguments (kind, a, b, probs)."""
    kind = DIST_TAGS[type(d)]
    if kind == 1:
        return kind, d.mean, d.stddev, None
    if kind == 2:
        return kind, d.low, d.high, None
    if kind == 3:
        return kind, d.p, 0.0, None
    if kind == 4:
        return kind, 0.0, 0.0, d.probs.values
    return kind, d.rate, 0.0, None


def sample(d, rng: Rng) -> Tensor:
    """Draw a rank-0 tensor from d, advancing rng deterministically.

    Categorical draws return the category index as an exact-integer float.
    """
    validate_spec(d)
    kind, a, b, probs = dist_params(d)
    if kind == 5 and a > MAX_POISSON_RATE:
        raise InvalidSpec(f"Poisson sampling limited to rate <= {MAX_POISSON_RATE}")
    value = impl.sample_value(rng.raw if isinstance(rng, Rng) else rng, kind, a, b, probs)
    return Tensor((), (value,))


def log_prob(d, x) -> float:
    """Exact log-density (continuous) or log-mass (discrete) of x under d.

    Returns -inf for x outside the support. x may be a rank-0 Tensor or a
    float.
    """
    validate_spec(d)
    if isinstance(x, Tensor):
        if len(x.values) != 1:
            raise InvalidSpec(f"log_prob needs a scalar, got shape {x.dims}")
        x = x.values[0]
    kind, a, b, probs = dist_params(d)
    return impl.log_prob_value(kind, a, b, probs, float(x))


def spec_roundtrip(d):
    """Wire-encode then wire-decode d; the result compares equal to d."""
    validate_spec(d)
    return decode_distribution(encode_distribution(d))
