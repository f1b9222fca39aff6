"""Hijack stochastic simulators over a socket: trace every draw, build
execution graphs, and run inference against the unmodified model."""

from ._backend import BACKEND
from ._wiretypes import (
    PROTOCOL_VERSION,
    Bernoulli,
    Categorical,
    Endpoint,
    Exponential,
    Normal,
    Poisson,
    Tensor,
    Uniform,
)
from .client import ClientContext, serve_forward, serve_loop
from .controller import (
    Forced,
    Prior,
    Replay,
    Session,
    SessionConfig,
    likelihood_weighting,
    posterior_query,
)
from .distributions import Rng, log_prob, sample
from .trace import AddressTable, TraceAggregator, TraceGraph, format_address

__version__ = "0.1.0"

__all__ = [
    "__version__", "BACKEND", "PROTOCOL_VERSION",
    "Tensor", "Normal", "Uniform", "Bernoulli", "Categorical", "Poisson",
    "Exponential", "Endpoint",
    "Rng", "sample", "log_prob",
    "format_address", "AddressTable", "TraceGraph", "TraceAggregator",
    "SessionConfig", "Session", "Prior", "Forced", "Replay",
    "likelihood_weighting", "posterior_query",
    "ClientContext", "serve_forward", "serve_loop",
]
