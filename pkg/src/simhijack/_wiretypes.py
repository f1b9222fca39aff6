"""Protocol data types shared by the codec backends and the public wire API."""

from __future__ import annotations

import math
from dataclasses import dataclass

MASK64 = 0xFFFFFFFFFFFFFFFF
U32_MAX = 0xFFFFFFFF

PROTOCOL_VERSION = 1


class WireError(Exception):
    """Base class for wire-level failures."""


class InvalidMessage(WireError):
    """Message violates a type invariant and cannot be encoded."""


class DecodeError(WireError):
    pass


class Truncated(DecodeError):
    """Byte sequence ends before the declared content does."""


class UnknownTag(DecodeError):
    """Variant or distribution tag outside the defined set."""


class MalformedField(DecodeError):
    """Field content is invalid: bad UTF-8, tensor shape mismatch, bad parameters."""


class ChannelError(WireError):
    pass


class ConnectionRefused(ChannelError):
    """No listener reachable after the configured retries."""


class BindFailed(ChannelError):
    pass


class ChannelClosed(ChannelError):
    """Peer closed the connection mid-conversation."""


class RemoteError(WireError):
    """Peer reported a failure via an Error message."""


class EndpointError(WireError):
    pass


@dataclass(slots=True)
class Tensor:
    """Rank + shape + row-major f64 payload; the unit of value exchange."""

    dims: tuple
    values: tuple

    def __post_init__(self):
        if type(self.dims) is not tuple:
            self.dims = tuple(self.dims)
        if type(self.values) is not tuple:
            self.values = tuple(self.values)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @classmethod
    def scalar(cls, v) -> "Tensor":
        return cls((), (float(v),))

    @classmethod
    def vector(cls, vals) -> "Tensor":
        vals = tuple(float(v) for v in vals)
        return cls((len(vals),), vals)

    def item(self) -> float:
        if len(self.values) != 1:
            raise ValueError(f"item() on tensor with {len(self.values)} elements")
        return self.values[0]


def numel(dims) -> int:
    n = 1
    for d in dims:
        n *= d
    return n


def tensor_invariant_error(t) -> str | None:
    if not isinstance(t, Tensor):
        return f"expected Tensor, got {type(t).__name__}"
    for d in t.dims:
        if not isinstance(d, int) or d < 0 or d > U32_MAX:
            return f"bad tensor dim {d!r}"
    if len(t.values) != numel(t.dims):
        return f"tensor carries {len(t.values)} values for shape {t.dims}"
    return None


@dataclass(slots=True)
class Normal:
    mean: float
    stddev: float


@dataclass(slots=True)
class Uniform:
    low: float
    high: float


@dataclass(slots=True)
class Bernoulli:
    p: float


@dataclass(slots=True)
class Categorical:
    probs: Tensor

    def __post_init__(self):
        if not isinstance(self.probs, Tensor):
            self.probs = Tensor.vector(self.probs)


@dataclass(slots=True)
class Poisson:
    rate: float


@dataclass(slots=True)
class Exponential:
    rate: float


DIST_TAGS = {
    Normal: 1,
    Uniform: 2,
    Bernoulli: 3,
    Categorical: 4,
    Poisson: 5,
    Exponential: 6,
}
DIST_BY_TAG = {tag: cls for cls, tag in DIST_TAGS.items()}

# Sum-to-one slack for Categorical probability vectors.
CATEGORICAL_TOL = 1e-9


def kind_name(d) -> str:
    return type(d).__name__


def dist_invariant_error(d) -> str | None:
    """Return a description of the violated invariant, or None if valid."""
    kind = type(d)
    if kind is Normal:
        if not (math.isfinite(d.mean) and math.isfinite(d.stddev) and d.stddev > 0):
            return f"Normal requires finite mean and stddev > 0, got {d}"
    elif kind is Uniform:
        if not (math.isfinite(d.low) and math.isfinite(d.high) and d.low < d.high):
            return f"Uniform requires low < high, got {d}"
    elif kind is Bernoulli:
        if not (math.isfinite(d.p) and 0.0 <= d.p <= 1.0):
            return f"Bernoulli requires p in [0, 1], got {d}"
    elif kind is Categorical:
        t = d.probs
        err = tensor_invariant_error(t)
        if err:
            return err
        if t.rank != 1 or len(t.values) == 0:
            return f"Categorical probs must be a non-empty rank-1 tensor, got shape {t.dims}"
        total = 0.0
        for p in t.values:
            if not (math.isfinite(p) and p >= 0.0):
                return f"Categorical prob {p!r} out of range"
            total += p
        if abs(total - 1.0) > CATEGORICAL_TOL:
            return f"Categorical probs sum to {total!r}, not 1"
    elif kind is Poisson:
        if not (math.isfinite(d.rate) and d.rate > 0):
            return f"Poisson requires rate > 0, got {d}"
    elif kind is Exponential:
        if not (math.isfinite(d.rate) and d.rate > 0):
            return f"Exponential requires rate > 0, got {d}"
    else:
        return f"not a distribution spec: {d!r}"
    return None


@dataclass(slots=True)
class Handshake:
    system_name: str
    protocol_version: int


@dataclass(slots=True)
class HandshakeResult:
    model_name: str
    protocol_version: int


@dataclass(slots=True)
class Run:
    trace_id: int


@dataclass(slots=True)
class Sample:
    address: str
    dist: object
    control: bool = True


@dataclass(slots=True)
class SampleResult:
    value: Tensor


@dataclass(slots=True)
class Observe:
    address: str
    dist: object
    value: Tensor


@dataclass(slots=True)
class ObserveResult:
    pass


@dataclass(slots=True)
class RunResult:
    outcome: Tensor


@dataclass(slots=True)
class Shutdown:
    pass


@dataclass(slots=True)
class Error:
    message: str


MESSAGE_TAGS = {
    Handshake: 1,
    HandshakeResult: 2,
    Run: 3,
    Sample: 4,
    SampleResult: 5,
    Observe: 6,
    ObserveResult: 7,
    RunResult: 8,
    Shutdown: 9,
    Error: 10,
}
MESSAGE_BY_TAG = {tag: cls for cls, tag in MESSAGE_TAGS.items()}

Message = (
    Handshake
    | HandshakeResult
    | Run
    | Sample
    | SampleResult
    | Observe
    | ObserveResult
    | RunResult
    | Shutdown
    | Error
)


def _u32_error(name, v) -> str | None:
    if not isinstance(v, int) or v < 0 or v > U32_MAX:
        return f"{name} must be an unsigned 32-bit int, got {v!r}"
    return None


def message_invariant_error(m) -> str | None:
    kind = type(m)
    if kind not in MESSAGE_TAGS:
        return f"not a protocol message: {m!r}"
    if kind in (Handshake, HandshakeResult):
        name = m.system_name if kind is Handshake else m.model_name
        if not isinstance(name, str):
            return f"name must be a string, got {name!r}"
        return _u32_error("protocol_version", m.protocol_version)
    if kind is Run:
        if not isinstance(m.trace_id, int) or m.trace_id < 0 or m.trace_id > MASK64:
            return f"trace_id must be an unsigned 64-bit int, got {m.trace_id!r}"
        return None
    if kind in (Sample, Observe):
        if not isinstance(m.address, str) or not m.address:
            return "address must be a non-empty string"
        err = dist_invariant_error(m.dist)
        if err:
            return err
        if kind is Observe:
            return tensor_invariant_error(m.value)
        return None
    if kind is SampleResult:
        return tensor_invariant_error(m.value)
    if kind is RunResult:
        return tensor_invariant_error(m.outcome)
    if kind is Error:
        if not isinstance(m.message, str):
            return f"error message must be a string, got {m.message!r}"
    return None


@dataclass(slots=True)
class Endpoint:
    """tcp://host:port or ipc:///absolute/path transport address."""

    scheme: str
    host: str | None = None
    port: int | None = None
    path: str | None = None

    @classmethod
    def parse(cls, uri: str) -> "Endpoint":
        if uri.startswith("tcp://"):
            rest = uri[len("tcp://"):]
            host, sep, port_s = rest.rpartition(":")
            if not sep or not host:
                raise EndpointError(f"expected tcp://host:port, got {uri!r}")
            try:
                port = int(port_s)
            except ValueError:
                raise EndpointError(f"bad port in {uri!r}") from None
            if not 0 < port < 65536:
                raise EndpointError(f"port out of range in {uri!r}")
            return cls("tcp", host=host, port=port)
        if uri.startswith("ipc://"):
            path = uri[len("ipc://"):]
            if not path.startswith("/"):
                raise EndpointError(f"ipc path must be absolute, got {uri!r}")
            return cls("ipc", path=path)
        raise EndpointError(f"unsupported endpoint scheme in {uri!r}")

    def __str__(self) -> str:
        if self.scheme == "tcp":
            return f"tcp://{self.host}:{self.port}"
        return f"ipc://{self.path}"
