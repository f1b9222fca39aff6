"""Inference-engine side of the protocol.

Connects to a hijacked simulator, drives forward executions, serves every
Sample request under a sampling policy (prior, forced, replay), scores
Observe events, streams everything into the trace aggregator, and runs
likelihood-weighting inference over the collected traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ._backend import impl
from ._wiretypes import (
    MASK64,
    PROTOCOL_VERSION,
    Error,
    Handshake,
    HandshakeResult,
    Observe,
    ObserveResult,
    RemoteError,
    Run,
    RunResult,
    Sample,
    Shutdown,
    Tensor,
)
from .distributions import dist_params
from .trace import (
    OBSERVE,
    SAMPLE,
    Trace,
    TraceAggregator,
    TraceEvent,
)
from .wire import Channel, connect, encode_distribution, encode_message

__all__ = [
    "ControllerError", "ConfigError", "ProtocolViolation", "SupportViolation",
    "Divergence", "AllWeightsZero", "AddressNeverSampled",
    "CONDITION", "INTERVENE", "FALLBACK_PRIOR", "ABORT",
    "Prior", "Forced", "Replay",
    "SessionConfig", "Session",
    "WeightedTrace", "PosteriorEstimate", "InferenceResult",
    "logsumexp", "effective_sample_size",
    "likelihood_weighting", "posterior_query", "inference_report",
]


class ControllerError(Exception):
    pass


class ConfigError(ControllerError, ValueError):
    pass


class ProtocolViolation(ControllerError):
    """Message arrived outside the legal state-machine order."""


class SupportViolation(ControllerError):
    """Condition-mode forced value has zero density under the proposed dist."""


class Divergence(ControllerError):
    """Replay hit an address the source trace cannot answer (abort mode)."""


class AllWeightsZero(ControllerError):
    pass


class AddressNeverSampled(ControllerError):
    pass


# ---------------------------------------------------------------------------
# Sampling policies

CONDITION = "condition"
INTERVENE = "intervene"
FALLBACK_PRIOR = "fallback_prior"
ABORT = "abort"


@dataclass(slots=True)
class Prior:
    pass


def _as_scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


@dataclass(slots=True)
class Forced:
    """Pin draws by base address; only the first occurrence per trace is forced.

    Each assignment is (value, mode); condition mode contributes the value's
    log-density to the trace weight, intervene mode contributes nothing.
    """

    assignments: dict

    def __post_init__(self):
        cleaned = {}
        for addr, (value, mode) in self.assignments.items():
            if mode not in (CONDITION, INTERVENE):
                raise ConfigError(f"forced mode must be condition or intervene, got {mode!r}")
            cleaned[addr] = (_as_scalar(value), mode)
        self.assignments = cleaned


@dataclass(slots=True)
class Replay:
    """Feed back a recorded trace's values, positionally per base address."""

    source: Trace
    on_divergence: str = FALLBACK_PRIOR

    def __post_init__(self):
        if self.on_divergence not in (FALLBACK_PRIOR, ABORT):
            raise ConfigError(
                f"on_divergence must be fallback_prior or abort, got {self.on_divergence!r}")


@dataclass(slots=True)
class SessionConfig:
    endpoint: object
    num_traces: int = 1
    master_seed: int = 0
    trace_log_path: object = None
    policy: object = field(default_factory=Prior)
    # Base address -> scalar (every occurrence) or list (positional) that
    # replaces the simulator-supplied observe value.
    observe_overrides: dict = field(default_factory=dict)
    system_name: str = "simhijack"

    def __post_init__(self):
        if self.num_traces < 1:
            raise ConfigError(f"num_traces must be >= 1, got {self.num_traces}")
        if not 0 <= self.master_seed <= MASK64:
            raise ConfigError(f"master_seed must fit in 64 bits, got {self.master_seed}")


@dataclass(slots=True)
class WeightedTrace:
    trace: Trace
    log_weight: float


@dataclass(slots=True)
class PosteriorEstimate:
    address: str
    mean: float
    variance: float
    ess: float
    num_traces: int


@dataclass(slots=True)
class InferenceResult:
    weighted_traces: list
    log_marginal: float
    ess: float
    num_traces: int
    divergent_count: int


# ---------------------------------------------------------------------------
# Log-space helpers

_NEG_INF = float("-inf")


def logsumexp(values) -> float:
    m = _NEG_INF
    for v in values:
        if v > m:
            m = v
    if m == _NEG_INF:
        return _NEG_INF
    if m == math.inf:
        return math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def effective_sample_size(log_weights) -> float:
    """(Sum w)^2 / Sum w^2, computed with max-shift stability."""
    l1 = logsumexp(log_weights)
    if l1 == _NEG_INF:
        raise AllWeightsZero("every trace weight is zero")
    l2 = logsumexp([2.0 * w for w in log_weights])
    return math.exp(2.0 * l1 - l2)


# ---------------------------------------------------------------------------
# Session

class Session:
    """One connection-scoped conversation with a simulator.

    Strictly sequential request/reply; owns the trace aggregator for its
    run and leaves the log valid even when a run aborts mid-trace.
    """

    def __init__(self, config: SessionConfig):
        self.config = config
        self.aggregator = TraceAggregator(log_path=config.trace_log_path)
        self.model_name = None
        self._channel = connect(config.endpoint)
        self._closed = False
        try:
            self._channel.send_message(Handshake(config.system_name, PROTOCOL_VERSION))
            reply = self._channel.recv_message()
            if isinstance(reply, Error):
                raise RemoteError(f"simulator rejected handshake: {reply.message}")
            if not isinstance(reply, HandshakeResult):
                raise ProtocolViolation(
                    f"expected HandshakeResult, got {type(reply).__name__}")
            if reply.protocol_version != PROTOCOL_VERSION:
                self._fail(f"protocol version mismatch: ours {PROTOCOL_VERSION}, "
                           f"theirs {reply.protocol_version}")
                raise ProtocolViolation(
                    f"simulator speaks protocol {reply.protocol_version}, "
                    f"need {PROTOCOL_VERSION}")
            self.model_name = reply.model_name
        except Exception:
            self.aggregator.close()
            self._channel.close()
            self._closed = True
            raise

    def _fail(self, message: str) -> None:
        """Best-effort Error + Shutdown so the peer can exit cleanly."""
        try:
            self._channel.send_message(Error(message))
            self._channel.send_message(Shutdown())
        except OSError:
            pass

    # -- single forward execution

    def run_forward(self, policy=None, trace_id: int = 0,
                    keep_events: bool = True) -> Trace:
        """Drive one forward run under the policy and record its trace."""
        if policy is None:
            policy = self.config.policy
        agg = self.aggregator
        try:
            return self._run_one(policy, trace_id, keep_events)
        except Exception as e:
            agg.abort_open_trace()
            if isinstance(e, (ControllerError, RemoteError)):
                self._fail(str(e))
                raise
            if isinstance(e, ValueError):
                # e.g. a Sample request with an unsupported Poisson rate
                self._fail(str(e))
                raise ControllerError(str(e)) from e
            raise

    def _run_one(self, policy, trace_id: int, keep_events: bool) -> Trace:
        config = self.config
        agg = self.aggregator
        ch = self._channel
        recv_payload = ch.recv_payload
        send_raw = ch.send_raw
        decode_sample_parts = impl.decode_sample_parts
        sample_value = impl.sample_value
        log_prob_value = impl.log_prob_value
        sample_result_frame = impl.sample_result_frame
        rng = impl.Rng((config.master_seed + trace_id) & MASK64)

        forced = policy.assignments if type(policy) is Forced else None
        forced_done = set()
        replay_values = None
        replay_pos = None
        replay_abort = False
        if type(policy) is Replay:
            replay_values = {}
            for ev in policy.source.events:
                if ev.kind == SAMPLE:
                    replay_values.setdefault(ev.address, []).append(ev.value.values[0])
            replay_pos = {}
            replay_abort = policy.on_divergence == ABORT
        overrides = config.observe_overrides
        override_pos: dict = {}

        events = [] if keep_events else None
        extra_lw = 0.0
        divergent = False
        observe_result_frame = encode_message(ObserveResult())

        agg.begin_trace(trace_id)
        self._channel.send_message(Run(trace_id))
        while True:
            payload = recv_payload()
            parts = decode_sample_parts(payload)
            if parts is not None:
                addr, kind, a, b, probs, control, lo, hi = parts
                if not control:
                    value = sample_value(rng, kind, a, b, probs)
                elif replay_values is not None:
                    recorded = replay_values.get(addr)
                    pos = replay_pos.get(addr, 0)
                    if recorded is not None and pos < len(recorded):
                        value = recorded[pos]
                        replay_pos[addr] = pos + 1
                    elif replay_abort:
                        raise Divergence(
                            f"no recorded value for occurrence {pos} of {addr}")
                    else:
                        divergent = True
                        value = sample_value(rng, kind, a, b, probs)
                elif forced is not None and addr in forced and addr not in forced_done:
                    forced_done.add(addr)
                    value, mode = forced[addr]
                    if mode == CONDITION:
                        flp = log_prob_value(kind, a, b, probs, value)
                        if flp == _NEG_INF:
                            raise SupportViolation(
                                f"conditioned value {value} has zero density at {addr}")
                        extra_lw += flp
                else:
                    value = sample_value(rng, kind, a, b, probs)
                lp = log_prob_value(kind, a, b, probs, value)
                agg.ingest_sample(addr, payload[lo:hi], value, lp)
                if events is not None:
                    dist, _ = impl.read_dist(payload, lo)
                    events.append(TraceEvent(SAMPLE, addr, dist, Tensor((), (value,)),
                                             lp, len(events)))
                send_raw(sample_result_frame(value))
                continue
            m = impl.decode_payload(payload)
            t = type(m)
            if t is Observe:
                value_t = m.value
                ov = overrides.get(m.address) if overrides else None
                if ov is not None:
                    if isinstance(ov, list):
                        pos = override_pos.get(m.address, 0)
                        if pos >= len(ov):
                            raise ConfigError(
                                f"observe override list for {m.address} exhausted "
                                f"at occurrence {pos}")
                        override_pos[m.address] = pos + 1
                        value_t = Tensor.scalar(ov[pos])
                    else:
                        value_t = Tensor.scalar(ov)
                if len(value_t.values) != 1:
                    raise ProtocolViolation(
                        f"observe at {m.address} carries a non-scalar value "
                        f"of shape {value_t.dims}")
                kind, a, b, probs = dist_params(m.dist)
                lp = log_prob_value(kind, a, b, probs, value_t.values[0])
                agg.ingest_observe(m.address, encode_distribution(m.dist),
                                   value_t.values[0], lp)
                if events is not None:
                    events.append(TraceEvent(OBSERVE, m.address, m.dist, value_t,
                                             lp, len(events)))
                send_raw(observe_result_frame)
                continue
            if t is RunResult:
                summary = agg.finalize_trace(m.outcome, extra_log_weight=extra_lw)
                return Trace(trace_id, tuple(events) if events is not None else (),
                             m.outcome, summary.log_joint, summary.log_weight,
                             divergent)
            if t is Error:
                raise RemoteError(f"simulator error during run {trace_id}: {m.message}")
            raise ProtocolViolation(
                f"unexpected {t.__name__} while serving run {trace_id}")

    # -- batch collection

    def collect_traces(self, keep_events: bool = True,
                       progress=None):
        """Run num_traces forwards, yield each trace, then send Shutdown.

        progress, when given, is called as progress(done, resident_keys)
        every 100 traces.
        """
        config = self.config
        try:
            for trace_id in range(config.num_traces):
                yield self.run_forward(config.policy, trace_id, keep_events)
                if progress is not None and (trace_id + 1) % 100 == 0:
                    progress(trace_id + 1, self.aggregator.resident_key_count())
        finally:
            self.close()

    def shutdown(self) -> None:
        if not self._closed:
            try:
                self._channel.send_message(Shutdown())
            except OSError:
                pass

    def close(self) -> None:
        if self._closed:
            return
        self.shutdown()
        self.aggregator.abort_open_trace()
        self.aggregator.close()
        self._channel.close()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Likelihood weighting

def likelihood_weighting(session: Session, keep_events: bool = True) -> InferenceResult:
    """Importance sampling from the prior: N traces weighted by their observes
    (plus any condition-mode forced terms)."""
    weighted = []
    divergent = 0
    for trace in session.collect_traces(keep_events=keep_events):
        weighted.append(WeightedTrace(trace, trace.log_weight))
        if trace.divergent:
            divergent += 1
    lws = [wt.log_weight for wt in weighted]
    n = len(lws)
    l1 = logsumexp(lws)
    if l1 == _NEG_INF:
        raise AllWeightsZero("every trace weight is zero")
    ess = effective_sample_size(lws)
    return InferenceResult(weighted, l1 - math.log(n), ess, n, divergent)


def _first_value_at(trace: Trace, address: str):
    for ev in trace.events:
        if ev.address == address:
            return ev.value.values[0]
    return None


def posterior_query(weighted_traces, address: str) -> PosteriorEstimate:
    """Self-normalized posterior mean/variance of the first value recorded at
    the address, over the traces that contain it."""
    xs = []
    lws = []
    for wt in weighted_traces:
        x = _first_value_at(wt.trace, address)
        if x is not None:
            xs.append(x)
            lws.append(wt.log_weight)
    if not xs:
        raise AddressNeverSampled(f"no trace records address {address!r}")
    m = max(lws)
    if m == _NEG_INF:
        raise AllWeightsZero(f"all traces containing {address!r} have zero weight")
    ws = [math.exp(lw - m) for lw in lws]
    total = math.fsum(ws)
    mean = math.fsum(w * x for w, x in zip(ws, xs)) / total
    var = math.fsum(w * (x - mean) * (x - mean) for w, x in zip(ws, xs)) / total
    return PosteriorEstimate(address, mean, var, effective_sample_size(lws), len(xs))


def inference_report(result: InferenceResult, addresses) -> dict:
    """JSON-ready inference summary for the given query addresses."""
    estimates = []
    for addr in addresses:
        est = posterior_query(result.weighted_traces, addr)
        estimates.append({
            "address": est.address,
            "mean": est.mean,
            "variance": est.variance,
            "ess": est.ess,
            "num_traces": est.num_traces,
        })
    return {
        "estimates": estimates,
        "log_marginal": result.log_marginal,
        "ess": result.ess,
        "num_traces": result.num_traces,
        "divergent_count": result.divergent_count,
    }
