"""Pure-Python codec and sampling kernels (fallback backend).

Byte-for-byte and bit-for-bit equivalent to the compiled backend in
``_speedups``; keep the two in lockstep when editing either.
"""

from __future__ import annotations

import math
import struct

from ._wiretypes import (
    DIST_BY_TAG,
    DIST_TAGS,
    MASK64,
    MESSAGE_TAGS,
    Bernoulli,
    Categorical,
    Error,
    Exponential,
    Handshake,
    HandshakeResult,
    InvalidMessage,
    MalformedField,
    Normal,
    Observe,
    ObserveResult,
    Poisson,
    Run,
    RunResult,
    Sample,
    SampleResult,
    Shutdown,
    Tensor,
    Truncated,
    Uniform,
    UnknownTag,
    dist_invariant_error,
    message_invariant_error,
    numel,
)

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_BDD = struct.Struct("<Bdd")
_BD = struct.Struct("<Bd")
_SAMPLE_RESULT_FRAME = struct.Struct("<IBId")  # frame len, tag, rank, value

MAX_POISSON_RATE = 30.0


# ---------------------------------------------------------------------------
# Encoding

def _encode_tensor(t) -> bytes:
    dims = t.dims
    values = t.values
    parts = [_U32.pack(len(dims))]
    for d in dims:
        parts.append(_U32.pack(d))
    parts.append(struct.pack(f"<{len(values)}d", *values))
    return b"".join(parts)


def encode_dist(d) -> bytes:
    err = dist_invariant_error(d)
    if err:
        raise InvalidMessage(err)
    tag = DIST_TAGS[type(d)]
    if tag == 1:
        return _BDD.pack(1, d.mean, d.stddev)
    if tag == 2:
        return _BDD.pack(2, d.low, d.high)
    if tag == 3:
        return _BD.pack(3, d.p)
    if tag == 4:
        return b"\x04" + _encode_tensor(d.probs)
    if tag == 5:
        return _BD.pack(5, d.rate)
    return _BD.pack(6, d.rate)


def encode_payload(m) -> bytes:
    err = message_invariant_error(m)
    if err:
        raise InvalidMessage(err)
    tag = MESSAGE_TAGS[type(m)]
    if tag == 4:  # Sample
        addr = m.address.encode()
        return b"".join(
            (b"\x04", _U32.pack(len(addr)), addr, encode_dist(m.dist),
             b"\x01" if m.control else b"\x00")
        )
    if tag == 5:
        return b"\x05" + _encode_tensor(m.value)
    if tag == 6:
        addr = m.address.encode()
        return b"".join(
            (b"\x06", _U32.pack(len(addr)), addr, encode_dist(m.dist),
             _encode_tensor(m.value))
        )
    if tag == 8:
        return b"\x08" + _encode_tensor(m.outcome)
    if tag == 1:
        name = m.system_name.encode()
        return b"".join((b"\x01", _U32.pack(len(name)), name,
                         _U32.pack(m.protocol_version)))
    if tag == 2:
        name = m.model_name.encode()
        return b"".join((b"\x02", _U32.pack(len(name)), name,
                         _U32.pack(m.protocol_version)))
    if tag == 3:
        return b"\x03" + _U64.pack(m.trace_id)
    if tag == 7:
        return b"\x07"
    if tag == 9:
        return b"\x09"
    msg = m.message.encode()
    return b"".join((b"\x0a", _U32.pack(len(msg)), msg))


def sample_result_frame(value: float) -> bytes:
    """Complete frame for a rank-0 SampleResult (controller hot path)."""
    return _SAMPLE_RESULT_FRAME.pack(13, 5, 0, value)


# ---------------------------------------------------------------------------
# Decoding

def _need(buf, pos, n):
    if pos + n > len(buf):
        raise Truncated(f"need {n} bytes at offset {pos}, have {len(buf) - pos}")


def _read_u32(buf, pos):
    _need(buf, pos, 4)
    return _U32.unpack_from(buf, pos)[0], pos + 4


def _read_f64(buf, pos):
    _need(buf, pos, 8)
    return _F64.unpack_from(buf, pos)[0], pos + 8


def _read_string(buf, pos):
    n, pos = _read_u32(buf, pos)
    _need(buf, pos, n)
    try:
        s = bytes(buf[pos:pos + n]).decode()
    except UnicodeDecodeError as e:
        raise MalformedField(f"string is not valid UTF-8: {e}") from None
    return s, pos + n


def _read_tensor(buf, pos):
    rank, pos = _read_u32(buf, pos)
    dims = []
    for _ in range(rank):
        d, pos = _read_u32(buf, pos)
        dims.append(d)
    n = numel(dims)
    _need(buf, pos, 8 * n)
    values = struct.unpack_from(f"<{n}d", buf, pos)
    return Tensor(tuple(dims), values), pos + 8 * n


def _read_dist(buf, pos):
    _need(buf, pos, 1)
    tag = buf[pos]
    pos += 1
    if tag == 1:
        a, pos = _read_f64(buf, pos)
        b, pos = _read_f64(buf, pos)
        d = Normal(a, b)
    elif tag == 2:
        a, pos = _read_f64(buf, pos)
        b, pos = _read_f64(buf, pos)
        d = Uniform(a, b)
    elif tag == 3:
        a, pos = _read_f64(buf, pos)
        d = Bernoulli(a)
    elif tag == 4:
        t, pos = _read_tensor(buf, pos)
        d = Categorical(t)
    elif tag == 5:
        a, pos = _read_f64(buf, pos)
        d = Poisson(a)
    elif tag == 6:
        a, pos = _read_f64(buf, pos)
        d = Exponential(a)
    else:
        raise UnknownTag(f"unknown distribution tag {tag}")
    err = dist_invariant_error(d)
    if err:
        raise MalformedField(err)
    return d, pos


def read_dist(buf, pos):
    """Decode one DistributionSpec starting at pos; returns (dist, new pos)."""
    return _read_dist(buf, pos)


def decode_payload(buf):
    if len(buf) < 1:
        raise Truncated("empty payload")
    tag = buf[0]
    pos = 1
    if tag == 4:
        addr, pos = _read_string(buf, pos)
        dist, pos = _read_dist(buf, pos)
        _need(buf, pos, 1)
        flag = buf[pos]
        pos += 1
        if flag > 1:
            raise MalformedField(f"bad bool byte {flag}")
        m = Sample(addr, dist, flag == 1)
    elif tag == 5:
        value, pos = _read_tensor(buf, pos)
        m = SampleResult(value)
    elif tag == 6:
        addr, pos = _read_string(buf, pos)
        dist, pos = _read_dist(buf, pos)
        value, pos = _read_tensor(buf, pos)
        m = Observe(addr, dist, value)
    elif tag == 8:
        outcome, pos = _read_tensor(buf, pos)
        m = RunResult(outcome)
    elif tag == 1:
        name, pos = _read_string(buf, pos)
        ver, pos = _read_u32(buf, pos)
        m = Handshake(name, ver)
    elif tag == 2:
        name, pos = _read_string(buf, pos)
        ver, pos = _read_u32(buf, pos)
        m = HandshakeResult(name, ver)
    elif tag == 3:
        _need(buf, pos, 8)
        m = Run(_U64.unpack_from(buf, pos)[0])
        pos += 8
    elif tag == 7:
        m = ObserveResult()
    elif tag == 9:
        m = Shutdown()
    elif tag == 10:
        msg, pos = _read_string(buf, pos)
        m = Error(msg)
    else:
        raise UnknownTag(f"unknown message tag {tag}")
    if pos != len(buf):
        raise MalformedField(f"{len(buf) - pos} trailing bytes after message")
    err = message_invariant_error(m)
    if err:
        raise MalformedField(err)
    return m


def decode_sample_parts(buf):
    """Fast-path Sample decode: (addr, kind, a, b, probs, control, dist_lo, dist_hi).

    Returns None when the payload is not a Sample; raises the same codec
    errors as decode_payload for a malformed one.
    """
    if len(buf) < 1 or buf[0] != 4:
        return None
    addr, pos = _read_string(buf, 1)
    if not addr:
        raise MalformedField("address must be a non-empty string")
    dist_lo = pos
    _need(buf, pos, 1)
    tag = buf[pos]
    pos += 1
    a = 0.0
    b = 0.0
    probs = None
    if tag == 1 or tag == 2:
        a, pos = _read_f64(buf, pos)
        b, pos = _read_f64(buf, pos)
        if tag == 1:
            if not (math.isfinite(a) and math.isfinite(b) and b > 0):
                raise MalformedField(f"Normal requires finite mean and stddev > 0")
        elif not (math.isfinite(a) and math.isfinite(b) and a < b):
            raise MalformedField(f"Uniform requires low < high")
    elif tag == 3:
        a, pos = _read_f64(buf, pos)
        if not (math.isfinite(a) and 0.0 <= a <= 1.0):
            raise MalformedField(f"Bernoulli requires p in [0, 1]")
    elif tag == 4:
        t, pos = _read_tensor(buf, pos)
        d = Categorical(t)
        err = dist_invariant_error(d)
        if err:
            raise MalformedField(err)
        probs = t.values
    elif tag == 5 or tag == 6:
        a, pos = _read_f64(buf, pos)
        if not (math.isfinite(a) and a > 0):
            raise MalformedField("rate must be > 0")
    else:
        raise UnknownTag(f"unknown distribution tag {tag}")
    dist_hi = pos
    _need(buf, pos, 1)
    flag = buf[pos]
    pos += 1
    if flag > 1:
        raise MalformedField(f"bad bool byte {flag}")
    if pos != len(buf):
        raise MalformedField(f"{len(buf) - pos} trailing bytes after message")
    return addr, tag, a, b, probs, flag == 1, dist_lo, dist_hi


def decode_scalar_result(buf):
    """Value of a rank-0 SampleResult, or None for anything else."""
    if len(buf) == 13 and buf[0] == 5 and buf[1] == 0 and buf[2] == 0 \
            and buf[3] == 0 and buf[4] == 0:
        return _F64.unpack_from(buf, 5)[0]
    return None


# ---------------------------------------------------------------------------
# RNG: splitmix64, chosen for its published reference sequence.

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV53 = 2.0 ** -53


class Rng:
    """splitmix64 stream; identical seed gives an identical sequence."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = s = (self._state + _GAMMA) & MASK64
        s = ((s ^ (s >> 30)) * _MIX1) & MASK64
        s = ((s ^ (s >> 27)) * _MIX2) & MASK64
        return s ^ (s >> 31)

    def uniform01(self) -> float:
        """Uniform draw in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * _INV53

    def state(self) -> int:
        return self._state


# Acklam's rational approximation to the standard normal inverse CDF.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425
_P_HIGH = 1.0 - _P_LOW


def ndtri(p: float) -> float:
    """Standard normal inverse CDF for p in (0, 1)."""
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p <= _P_HIGH:
        q = p - 0.5
        r = q * q
        return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
                / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    q = math.sqrt(-2.0 * math.log(1.0 - p))
    return -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))


# ---------------------------------------------------------------------------
# Scalar draw / log-density kernels, dispatched on the wire kind tag.

_NEG_INF = float("-inf")
_HALF_LOG_2PI = 0.9189385332046727
_TWO_PI = 6.283185307179586
_TWO53 = 9007199254740992.0


def sample_value(rng, kind, a, b, probs) -> float:
    if kind == 1:  # Normal: inverse CDF on a (0, 1) uniform
        u = ((rng.next_u64() >> 11) + 0.5) * _INV53
        return a + b * ndtri(u)
    if kind == 2:  # Uniform
        return a + (b - a) * rng.uniform01()
    if kind == 3:  # Bernoulli
        return 1.0 if rng.uniform01() < a else 0.0
    if kind == 4:  # Categorical: CDF scan
        u = rng.uniform01()
        acc = 0.0
        i = 0
        last = len(probs) - 1
        for p in probs:
            acc += p
            if u < acc:
                return float(i)
            i += 1
        return float(last)
    if kind == 5:  # Poisson by inversion, exact for bounded rates
        if a > MAX_POISSON_RATE:
            raise ValueError(f"Poisson sampling limited to rate <= {MAX_POISSON_RATE}")
        u = rng.uniform01()
        p = math.exp(-a)
        acc = p
        k = 0
        while u > acc and k < 10000:
            k += 1
            p *= a / k
            acc += p
        return float(k)
    if kind == 6:  # Exponential
        return -math.log1p(-rng.uniform01()) / a
    raise ValueError(f"unknown distribution kind {kind}")


def log_prob_value(kind, a, b, probs, x) -> float:
    if kind == 1:
        if x != x:
            return _NEG_INF
        d = (x - a) / b
        return -_HALF_LOG_2PI - math.log(b) - 0.5 * d * d
    if kind == 2:
        # Half-open support, matching the attainable sample range.
        if a <= x < b:
            return -math.log(b - a)
        return _NEG_INF
    if kind == 3:
        if x == 1.0:
            return math.log(a) if a > 0.0 else _NEG_INF
        if x == 0.0:
            return math.log1p(-a) if a < 1.0 else _NEG_INF
        return _NEG_INF
    if kind == 4:
        if not math.isfinite(x):
            return _NEG_INF
        i = int(x)
        if x == i and 0 <= i < len(probs):
            p = probs[i]
            return math.log(p) if p > 0.0 else _NEG_INF
        return _NEG_INF
    if kind == 5:
        if not math.isfinite(x) or x < 0.0:
            return _NEG_INF
        if x > _TWO53:
            # Every double above 2^53 is an integer. Stirling keeps this
            # finite where lgamma would overflow; its error is < 1/(12x).
            return x * (math.log(a) - math.log(x) + 1.0) - a \
                - 0.5 * math.log(_TWO_PI * x)
        k = int(x)
        if x == k:
            return k * math.log(a) - a - math.lgamma(k + 1.0)
        return _NEG_INF
    if kind == 6:
        if x >= 0.0:
            return math.log(a) - a * x
        return _NEG_INF
    raise ValueError(f"unknown distribution kind {kind}")
