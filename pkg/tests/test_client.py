"""Model-side SDK: addresses from frame stacks, run lifecycle, error paths."""

import threading

import pytest

from conftest import serving
from simhijack.client import ClientContext, UsageError, serve_forward
from simhijack.controller import Session, SessionConfig
from simhijack.trace import IllegalFrameCharacter
from simhijack.wire import (
    PROTOCOL_VERSION,
    ChannelClosed,
    Error,
    Handshake,
    HandshakeResult,
    Normal,
    RemoteError,
    Tensor,
    connect,
)


def nested_forward(ctx):
    with ctx.frame("update"):
        v = ctx.sample(Normal(0.0, 1.0), "gauss")
    return v


def deep_forward(ctx):
    ctx.push_frame("outer")
    ctx.push_frame("inner")
    v = ctx.sample(Normal(0.0, 1.0), "x")
    ctx.pop_frame()
    w = ctx.sample(Normal(0.0, 1.0), "y")
    ctx.pop_frame()
    return v.values[0] + w.values[0]


def constant_forward(ctx):
    return 7.0


def vector_outcome_forward(ctx):
    return [1.0, 2.0, 3.0]


def occurrence_forward(ctx):
    ctx.sample(Normal(0.0, 1.0), "x")
    ctx.sample(Normal(0.0, 1.0), "x")
    return float(ctx.occurrences["[x]__Normal"])


def unbalanced_forward(ctx):
    ctx.push_frame("leaky")
    return 0.0


def bad_tag_forward(ctx):
    return ctx.sample(Normal(0.0, 1.0), "bad;tag")


# ---------------------------------------------------------------------------
# Address construction

def test_nested_frame_address(ipc_endpoint):
    with serving(ipc_endpoint, nested_forward):
        with Session(SessionConfig(ipc_endpoint)) as s:
            trace = s.run_forward()
    assert trace.events[0].address == "[update; gauss]__Normal"


def test_explicit_push_pop_addresses(ipc_endpoint):
    with serving(ipc_endpoint, deep_forward):
        with Session(SessionConfig(ipc_endpoint)) as s:
            trace = s.run_forward()
    assert [e.address for e in trace.events] == [
        "[outer; inner; x]__Normal", "[outer; y]__Normal"]


def test_same_site_draws_share_address(ipc_endpoint):
    with serving(ipc_endpoint, occurrence_forward):
        with Session(SessionConfig(ipc_endpoint)) as s:
            trace = s.run_forward()
    a, b = trace.events
    assert a.address == b.address == "[x]__Normal"


# ---------------------------------------------------------------------------
# Context rules without a connection

def test_sample_outside_forward_raises():
    ctx = ClientContext(None, "m")
    with pytest.raises(UsageError):
        ctx.sample(Normal(0.0, 1.0), "x")
    with pytest.raises(UsageError):
        ctx.observe(Normal(0.0, 1.0), 0.0, "x")


def test_frame_tag_hygiene():
    ctx = ClientContext(None, "m")
    for bad in ["a;b", "a]b", ""]:
        with pytest.raises(UsageError):
            ctx.push_frame(bad)
    with pytest.raises(UsageError):
        ctx.pop_frame()
    ctx.push_frame("ok")
    ctx.pop_frame()


# ---------------------------------------------------------------------------
# Run lifecycle over a live session

def test_constant_outcome(ipc_endpoint):
    with serving(ipc_endpoint, constant_forward):
        with Session(SessionConfig(ipc_endpoint)) as s:
            trace = s.run_forward()
    assert trace.events == ()
    assert trace.outcome == Tensor((), (7.0,))
    assert trace.log_joint == 0.0


def test_vector_outcome(ipc_endpoint):
    with serving(ipc_endpoint, vector_outcome_forward):
        with Session(SessionConfig(ipc_endpoint)) as s:
            trace = s.run_forward()
    assert trace.outcome == Tensor((3,), (1.0, 2.0, 3.0))


def test_occurrence_counters_reset_each_run(ipc_endpoint):
    with serving(ipc_endpoint, occurrence_forward):
        cfg = SessionConfig(ipc_endpoint, num_traces=2)
        with Session(cfg) as s:
            outcomes = [s.run_forward(trace_id=i).outcome.values[0]
                        for i in range(2)]
    assert outcomes == [2.0, 2.0]


def test_unbalanced_frames_fail_the_run(ipc_endpoint):
    with serving(ipc_endpoint, unbalanced_forward) as errors:
        with Session(SessionConfig(ipc_endpoint)) as s:
            with pytest.raises(RemoteError):
                s.run_forward()
    assert len(errors) == 1 and isinstance(errors[0], UsageError)


def test_bad_sample_tag_fails_the_run(ipc_endpoint):
    with serving(ipc_endpoint, bad_tag_forward) as errors:
        with Session(SessionConfig(ipc_endpoint)) as s:
            with pytest.raises(RemoteError):
                s.run_forward()
    assert len(errors) == 1 and isinstance(errors[0], IllegalFrameCharacter)


# ---------------------------------------------------------------------------
# Handshake handling on the model side

def test_model_rejects_version_mismatch(ipc_endpoint):
    with serving(ipc_endpoint, constant_forward):
        with connect(ipc_endpoint) as ch:
            ch.send_message(Handshake("sys", PROTOCOL_VERSION + 1))
            reply = ch.recv_message()
            assert isinstance(reply, Error)
            assert "version" in reply.message
            # The model side gives up on this session afterwards.
            with pytest.raises(ChannelClosed):
                ch.recv_message()


def test_model_handshake_reports_name(ipc_endpoint):
    with serving(ipc_endpoint, constant_forward, model_name="my-model"):
        with Session(SessionConfig(ipc_endpoint, system_name="sys")) as s:
            assert s.model_name == "my-model"


def test_serve_forward_one_session(tmp_path):
    ep = f"ipc://{tmp_path}/one.sock"
    done = []

    def run():
        serve_forward(ep, "one", constant_forward)
        done.append(True)

    t = threading.Thread(target=run, daemon=True)
    t.start()
    with Session(SessionConfig(ep)) as s:
        assert s.run_forward().outcome.values[0] == 7.0
    t.join(5.0)
    assert done == [True]
