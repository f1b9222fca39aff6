# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled codec and sampling kernels (hot-path backend).

Byte-for-byte and bit-for-bit equivalent to ``_pycodec``; keep the two in
lockstep when editing either. Cold paths (full message encode/decode)
delegate to the pure implementation; only the per-draw path is native.
"""

from libc.math cimport INFINITY, exp, isfinite, log, log1p, sqrt

# CPython ships its own lgamma that differs from libm's by ~1 ulp; the pure
# backend uses math.lgamma, so this backend must too for bit parity.
from math import lgamma
from libc.stdint cimport int64_t, uint8_t, uint32_t, uint64_t
from libc.string cimport memcpy

from cpython.bytes cimport (
    PyBytes_AS_STRING,
    PyBytes_Check,
    PyBytes_FromStringAndSize,
    PyBytes_GET_SIZE,
)

from ._wiretypes import (
    Bernoulli,
    Categorical,
    Exponential,
    InvalidMessage,
    MalformedField,
    Normal,
    Poisson,
    Tensor,
    Truncated,
    Uniform,
    UnknownTag,
    dist_invariant_error,
)
from ._pycodec import decode_payload, encode_payload

MAX_POISSON_RATE = 30.0

cdef double _MAX_POISSON_RATE_C = 30.0
cdef double _INV53 = 1.0 / 9007199254740992.0  # 2^-53
cdef double _HALF_LOG_2PI = 0.9189385332046727
cdef double _TWO_PI = 6.283185307179586
cdef double _TWO53 = 9007199254740992.0

cdef uint64_t _GAMMA = 0x9E3779B97F4A7C15UL
cdef uint64_t _MIX1 = 0xBF58476D1CE4E5B9UL
cdef uint64_t _MIX2 = 0x94D049BB133111EBUL


# ---------------------------------------------------------------------------
# RNG: splitmix64

cdef class Rng:
    """splitmix64 stream; identical seed gives an identical sequence."""

    cdef uint64_t _state

    def __init__(self, seed):
        self._state = <uint64_t>(seed & 0xFFFFFFFFFFFFFFFF)

    cdef inline uint64_t _next(self):
        cdef uint64_t s
        self._state += _GAMMA
        s = self._state
        s = (s ^ (s >> 30)) * _MIX1
        s = (s ^ (s >> 27)) * _MIX2
        return s ^ (s >> 31)

    def next_u64(self):
        return self._next()

    def uniform01(self):
        """Uniform draw in [0, 1) with 53-bit resolution."""
        return <double>(self._next() >> 11) * _INV53

    def state(self):
        return self._state


# ---------------------------------------------------------------------------
# Acklam's rational approximation to the standard normal inverse CDF.

cdef double _A0 = -3.969683028665376e+01
cdef double _A1 = 2.209460984245205e+02
cdef double _A2 = -2.759285104469687e+02
cdef double _A3 = 1.383577518672690e+02
cdef double _A4 = -3.066479806614716e+01
cdef double _A5 = 2.506628277459239e+00
cdef double _B0 = -5.447609879822406e+01
cdef double _B1 = 1.615858368580409e+02
cdef double _B2 = -1.556989798598866e+02
cdef double _B3 = 6.680131188771972e+01
cdef double _B4 = -1.328068155288572e+01
cdef double _C0 = -7.784894002430293e-03
cdef double _C1 = -3.223964580411365e-01
cdef double _C2 = -2.400758277161838e+00
cdef double _C3 = -2.549732539343734e+00
cdef double _C4 = 4.374664141464968e+00
cdef double _C5 = 2.938163982698783e+00
cdef double _D0 = 7.784695709041462e-03
cdef double _D1 = 3.224671290700398e-01
cdef double _D2 = 2.445134137142996e+00
cdef double _D3 = 3.754408661907416e+00
cdef double _P_LOW = 0.02425
cdef double _P_HIGH = 1.0 - 0.02425


cdef inline double _ndtri(double p):
    cdef double q, r
    if p < _P_LOW:
        q = sqrt(-2.0 * log(p))
        return ((((((_C0 * q + _C1) * q + _C2) * q + _C3) * q + _C4) * q + _C5)
                / ((((_D0 * q + _D1) * q + _D2) * q + _D3) * q + 1.0))
    if p <= _P_HIGH:
        q = p - 0.5
        r = q * q
        return ((((((_A0 * r + _A1) * r + _A2) * r + _A3) * r + _A4) * r + _A5) * q
                / (((((_B0 * r + _B1) * r + _B2) * r + _B3) * r + _B4) * r + 1.0))
    q = sqrt(-2.0 * log(1.0 - p))
    return -((((((_C0 * q + _C1) * q + _C2) * q + _C3) * q + _C4) * q + _C5)
             / ((((_D0 * q + _D1) * q + _D2) * q + _D3) * q + 1.0))


def ndtri(double p):
    """Standard normal inverse CDF for p in (0, 1)."""
    return _ndtri(p)


# ---------------------------------------------------------------------------
# Scalar draw / log-density kernels, dispatched on the wire kind tag.

def sample_value(Rng rng, int kind, double a, double b, probs):
    cdef double u, p, acc, lam
    cdef Py_ssize_t i, last
    cdef int k
    if kind == 1:  # Normal: inverse CDF on a (0, 1) uniform
        u = (<double>(rng._next() >> 11) + 0.5) * _INV53
        return a + b * _ndtri(u)
    if kind == 2:  # Uniform
        return a + (b - a) * (<double>(rng._next() >> 11) * _INV53)
    if kind == 3:  # Bernoulli
        return 1.0 if (<double>(rng._next() >> 11) * _INV53) < a else 0.0
    if kind == 4:  # Categorical: CDF scan
        u = <double>(rng._next() >> 11) * _INV53
        acc = 0.0
        last = len(probs) - 1
        for i in range(last + 1):
            acc += <double>probs[i]
            if u < acc:
                return <double>i
        return <double>last
    if kind == 5:  # Poisson by inversion, exact for bounded rates
        if a > _MAX_POISSON_RATE_C:
            raise ValueError(f"Poisson sampling limited to rate <= {MAX_POISSON_RATE}")
        u = <double>(rng._next() >> 11) * _INV53
        p = exp(-a)
        acc = p
        k = 0
        while u > acc and k < 10000:
            k += 1
            p *= a / k
            acc += p
        return <double>k
    if kind == 6:  # Exponential
        return -log1p(-(<double>(rng._next() >> 11) * _INV53)) / a
    raise ValueError(f"unknown distribution kind {kind}")


def log_prob_value(int kind, double a, double b, probs, double x):
    cdef double d, p
    cdef int64_t i
    cdef Py_ssize_t n
    if kind == 1:
        if x != x:
            return -INFINITY
        d = (x - a) / b
        return -_HALF_LOG_2PI - log(b) - 0.5 * d * d
    if kind == 2:
        # Half-open support, matching the attainable sample range.
        if a <= x < b:
            return -log(b - a)
        return -INFINITY
    if kind == 3:
        if x == 1.0:
            return log(a) if a > 0.0 else -INFINITY
        if x == 0.0:
            return log1p(-a) if a < 1.0 else -INFINITY
        return -INFINITY
    if kind == 4:
        if not isfinite(x):
            return -INFINITY
        n = len(probs)
        if x < 0.0 or x >= <double>n:
            return -INFINITY
        i = <int64_t>x
        if x == <double>i:
            p = <double>probs[i]
            return log(p) if p > 0.0 else -INFINITY
        return -INFINITY
    if kind == 5:
        if not isfinite(x) or x < 0.0:
            return -INFINITY
        if x > _TWO53:
            # Every double above 2^53 is an integer. Stirling keeps this
            # finite where lgamma would overflow; its error is < 1/(12x).
            return x * (log(a) - log(x) + 1.0) - a - 0.5 * log(_TWO_PI * x)
        i = <int64_t>x
        if x == <double>i:
            return <double>i * log(a) - a - lgamma(<double>i + 1.0)
        return -INFINITY
    if kind == 6:
        if x >= 0.0:
            return log(a) - a * x
        return -INFINITY
    raise ValueError(f"unknown distribution kind {kind}")


# ---------------------------------------------------------------------------
# Hot-path codec pieces

def sample_result_frame(double value):
    """Complete frame for a rank-0 SampleResult (controller hot path)."""
    cdef bytes out = PyBytes_FromStringAndSize(NULL, 17)
    cdef char* o = PyBytes_AS_STRING(out)
    cdef uint32_t flen = 13
    cdef uint32_t rank = 0
    memcpy(o, &flen, 4)
    o[4] = 5
    memcpy(o + 5, &rank, 4)
    memcpy(o + 9, &value, 8)
    return out


def decode_scalar_result(buf):
    """Value of a rank-0 SampleResult, or None for anything else."""
    if not PyBytes_Check(buf):
        buf = bytes(buf)
    cdef const unsigned char* d = <const unsigned char*>PyBytes_AS_STRING(buf)
    cdef double v
    if PyBytes_GET_SIZE(buf) == 13 and d[0] == 5 and d[1] == 0 and d[2] == 0 \
            and d[3] == 0 and d[4] == 0:
        memcpy(&v, d + 5, 8)
        return v
    return None


cdef inline uint32_t _get_u32(const unsigned char* d, Py_ssize_t pos):
    cdef uint32_t v
    memcpy(&v, d + pos, 4)
    return v


cdef inline double _get_f64(const unsigned char* d, Py_ssize_t pos):
    cdef double v
    memcpy(&v, d + pos, 8)
    return v


cdef inline int _need(Py_ssize_t total, Py_ssize_t pos, Py_ssize_t n) except -1:
    if pos + n > total:
        raise Truncated(f"need {n} bytes at offset {pos}, have {total - pos}")
    return 0


def encode_dist(d):
    cdef bytes out
    cdef char* o
    cdef double a, b
    err = dist_invariant_error(d)
    if err:
        raise InvalidMessage(err)
    tp = type(d)
    if tp is Normal or tp is Uniform:
        out = PyBytes_FromStringAndSize(NULL, 17)
        o = PyBytes_AS_STRING(out)
        if tp is Normal:
            o[0] = 1
            a = d.mean
            b = d.stddev
        else:
            o[0] = 2
            a = d.low
            b = d.high
        memcpy(o + 1, &a, 8)
        memcpy(o + 9, &b, 8)
        return out
    if tp is Bernoulli or tp is Poisson or tp is Exponential:
        out = PyBytes_FromStringAndSize(NULL, 9)
        o = PyBytes_AS_STRING(out)
        if tp is Bernoulli:
            o[0] = 3
            a = d.p
        elif tp is Poisson:
            o[0] = 5
            a = d.rate
        else:
            o[0] = 6
            a = d.rate
        memcpy(o + 1, &a, 8)
        return out
    # Categorical
    return b"\x04" + _encode_tensor_py(d.probs)


cdef bytes _encode_tensor_py(t):
    cdef tuple dims = t.dims
    cdef tuple values = t.values
    cdef Py_ssize_t rank = len(dims)
    cdef Py_ssize_t n = len(values)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, 4 + 4 * rank + 8 * n)
    cdef char* o = PyBytes_AS_STRING(out)
    cdef uint32_t u
    cdef double v
    cdef Py_ssize_t i, pos
    u = <uint32_t>rank
    memcpy(o, &u, 4)
    pos = 4
    for i in range(rank):
        u = <uint32_t>dims[i]
        memcpy(o + pos, &u, 4)
        pos += 4
    for i in range(n):
        v = <double>values[i]
        memcpy(o + pos, &v, 8)
        pos += 8
    return out


cdef _read_tensor_at(const unsigned char* d, Py_ssize_t total, Py_ssize_t pos):
    """(Tensor, new pos); mirrors the pure decoder including error text."""
    cdef uint32_t rank, dim
    cdef Py_ssize_t i, n
    cdef list dims = []
    cdef list values = []
    _need(total, pos, 4)
    rank = _get_u32(d, pos)
    pos += 4
    n = 1
    for i in range(rank):
        _need(total, pos, 4)
        dim = _get_u32(d, pos)
        pos += 4
        dims.append(dim)
        n *= dim
    _need(total, pos, 8 * n)
    for i in range(n):
        values.append(_get_f64(d, pos))
        pos += 8
    return Tensor(tuple(dims), tuple(values)), pos


def read_dist(buf, Py_ssize_t pos=0):
    """Decode one DistributionSpec starting at pos; returns (dist, new pos)."""
    if not PyBytes_Check(buf):
        buf = bytes(buf)
    cdef const unsigned char* d = <const unsigned char*>PyBytes_AS_STRING(buf)
    cdef Py_ssize_t total = PyBytes_GET_SIZE(buf)
    cdef unsigned char tag
    cdef double a, b
    _need(total, pos, 1)
    tag = d[pos]
    pos += 1
    if tag == 1 or tag == 2:
        _need(total, pos, 8)
        a = _get_f64(d, pos)
        pos += 8
        _need(total, pos, 8)
        b = _get_f64(d, pos)
        pos += 8
        dist = Normal(a, b) if tag == 1 else Uniform(a, b)
    elif tag == 3 or tag == 5 or tag == 6:
        _need(total, pos, 8)
        a = _get_f64(d, pos)
        pos += 8
        if tag == 3:
            dist = Bernoulli(a)
        elif tag == 5:
            dist = Poisson(a)
        else:
            dist = Exponential(a)
    elif tag == 4:
        t, pos = _read_tensor_at(d, total, pos)
        dist = Categorical(t)
    else:
        raise UnknownTag(f"unknown distribution tag {tag}")
    err = dist_invariant_error(dist)
    if err:
        raise MalformedField(err)
    return dist, pos


def decode_sample_parts(buf):
    """Fast-path Sample decode: (addr, kind, a, b, probs, control, dist_lo, dist_hi).

    Returns None when the payload is not a Sample; raises the same codec
    errors as decode_payload for a malformed one.
    """
    if not PyBytes_Check(buf):
        buf = bytes(buf)
    cdef const unsigned char* d = <const unsigned char*>PyBytes_AS_STRING(buf)
    cdef Py_ssize_t total = PyBytes_GET_SIZE(buf)
    cdef Py_ssize_t pos, dist_lo, dist_hi
    cdef uint32_t alen
    cdef unsigned char tag, flag
    cdef double a = 0.0
    cdef double b = 0.0
    cdef double s
    cdef Py_ssize_t i
    if total < 1 or d[0] != 4:
        return None
    _need(total, 1, 4)
    alen = _get_u32(d, 1)
    pos = 5
    _need(total, pos, alen)
    try:
        addr = (<bytes>buf[pos:pos + alen]).decode()
    except UnicodeDecodeError as e:
        raise MalformedField(f"string is not valid UTF-8: {e}") from None
    pos += alen
    if alen == 0:
        raise MalformedField("address must be a non-empty string")
    dist_lo = pos
    _need(total, pos, 1)
    tag = d[pos]
    pos += 1
    probs = None
    if tag == 1 or tag == 2:
        _need(total, pos, 8)
        a = _get_f64(d, pos)
        pos += 8
        _need(total, pos, 8)
        b = _get_f64(d, pos)
        pos += 8
        if tag == 1:
            if not (isfinite(a) and isfinite(b) and b > 0):
                raise MalformedField(f"Normal requires finite mean and stddev > 0")
        elif not (isfinite(a) and isfinite(b) and a < b):
            raise MalformedField(f"Uniform requires low < high")
    elif tag == 3:
        _need(total, pos, 8)
        a = _get_f64(d, pos)
        pos += 8
        if not (isfinite(a) and 0.0 <= a <= 1.0):
            raise MalformedField(f"Bernoulli requires p in [0, 1]")
    elif tag == 4:
        t, pos = _read_tensor_at(d, total, pos)
        cat = Categorical(t)
        err = dist_invariant_error(cat)
        if err:
            raise MalformedField(err)
        probs = t.values
    elif tag == 5 or tag == 6:
        _need(total, pos, 8)
        a = _get_f64(d, pos)
        pos += 8
        if not (isfinite(a) and a > 0):
            raise MalformedField("rate must be > 0")
    else:
        raise UnknownTag(f"unknown distribution tag {tag}")
    dist_hi = pos
    _need(total, pos, 1)
    flag = d[pos]
    pos += 1
    if flag > 1:
        raise MalformedField(f"bad bool byte {flag}")
    if pos != total:
        raise MalformedField(f"{total - pos} trailing bytes after message")
    return addr, tag, a, b, probs, flag == 1, dist_lo, dist_hi
