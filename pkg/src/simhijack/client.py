"""Simulator-side SDK: the drop-in replacement for built-in RNG calls.

A model registers a forward function; every random draw inside it becomes a
Sample request answered by the controller, observations become Observe
requests, and the process entry point becomes a serve loop that the
controller drives run by run.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

from ._backend import impl
from ._wiretypes import (
    PROTOCOL_VERSION,
    Error,
    Handshake,
    HandshakeResult,
    Observe,
    ObserveResult,
    RemoteError,
    Run,
    RunResult,
    SampleResult,
    Shutdown,
    Tensor,
    kind_name,
)
from .trace import format_address
from .wire import Channel, Listener, encode_message

__all__ = [
    "UsageError", "ClientContext",
    "serve_forward", "serve_loop",
]

_U32 = struct.Struct("<I")


class UsageError(Exception):
    """SDK call outside its legal context (e.g. sample outside a forward)."""


def _as_outcome(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        return Tensor.scalar(value)
    return Tensor.vector(value)


class ClientContext:
    """Per-connection model context: channel, frame stack, draw counters.

    The frame stack holds explicit call-site tags the model pushes and pops;
    an address is a pure function of (frame stack, tag, distribution kind).
    """

    def __init__(self, channel: Channel, model_name: str):
        self.channel = channel
        self.model_name = model_name
        self.frame_stack: list[str] = []
        self.occurrences: dict[str, int] = {}
        self._in_forward = False
        # (frames, tag, dist kind) -> (address, length-prefixed utf-8 bytes)
        self._addr_cache: dict = {}

    # -- frame tags

    def push_frame(self, name: str) -> None:
        if ";" in name or "]" in name or not name:
            raise UsageError(f"illegal frame tag {name!r}")
        self.frame_stack.append(name)

    def pop_frame(self) -> None:
        if not self.frame_stack:
            raise UsageError("pop_frame on an empty frame stack")
        self.frame_stack.pop()

    @contextmanager
    def frame(self, name: str):
        self.push_frame(name)
        try:
            yield self
        finally:
            self.frame_stack.pop()

    # -- randomness

    def _address(self, tag: str, kind: str):
        key = (tuple(self.frame_stack), tag, kind)
        entry = self._addr_cache.get(key)
        if entry is None:
            addr = format_address(self.frame_stack + [tag], kind)
            raw = addr.encode()
            entry = (addr, _U32.pack(len(raw)) + raw)
            self._addr_cache[key] = entry
        return entry

    def sample(self, dist, tag: str) -> Tensor:
        """Request one draw from the controller; blocks for the value."""
        if not self._in_forward:
            raise UsageError("sample called outside a forward execution")
        addr, addr_bytes = self._address(tag, type(dist).__name__)
        n = self.occurrences.get(addr)
        self.occurrences[addr] = 1 if n is None else n + 1
        payload = b"".join((b"\x04", addr_bytes, impl.encode_dist(dist), b"\x01"))
        self.channel.send_raw(_U32.pack(len(payload)) + payload)
        reply = self.channel.recv_payload()
        value = impl.decode_scalar_result(reply)
        if value is not None:
            return Tensor((), (value,))
        m = impl.decode_payload(reply)
        if isinstance(m, SampleResult):
            return m.value
        if isinstance(m, Error):
            raise RemoteError(f"controller error: {m.message}")
        raise UsageError(f"expected SampleResult, got {type(m).__name__}")

    def observe(self, dist, value, tag: str) -> None:
        """Report an observed value for the controller to score."""
        if not self._in_forward:
            raise UsageError("observe called outside a forward execution")
        addr, _ = self._address(tag, type(dist).__name__)
        n = self.occurrences.get(addr)
        self.occurrences[addr] = 1 if n is None else n + 1
        if not isinstance(value, Tensor):
            value = Tensor.scalar(value)
        self.channel.send_message(Observe(addr, dist, value))
        m = self.channel.recv_message()
        if isinstance(m, ObserveResult):
            return
        if isinstance(m, Error):
            raise RemoteError(f"controller error: {m.message}")
        raise UsageError(f"expected ObserveResult, got {type(m).__name__}")

    def _begin_run(self) -> None:
        self.occurrences.clear()
        self._in_forward = True

    def _end_run(self) -> None:
        self._in_forward = False
        if self.frame_stack:
            self.frame_stack.clear()
            raise UsageError("frame stack not empty at end of forward")


def _serve_session(channel: Channel, model_name: str, forward_fn) -> None:
    """Answer one controller conversation on an accepted channel."""
    m = channel.recv_message()
    if isinstance(m, Shutdown):
        return
    if not isinstance(m, Handshake):
        channel.send_message(Error(f"expected Handshake, got {type(m).__name__}"))
        return
    if m.protocol_version != PROTOCOL_VERSION:
        channel.send_message(Error(
            f"protocol version mismatch: controller {m.protocol_version}, "
            f"model {PROTOCOL_VERSION}"))
        return
    channel.send_message(HandshakeResult(model_name, PROTOCOL_VERSION))
    ctx = ClientContext(channel, model_name)
    while True:
        m = channel.recv_message()
        if isinstance(m, Shutdown):
            return
        if isinstance(m, Error):
            raise RemoteError(f"controller error: {m.message}")
        if not isinstance(m, Run):
            channel.send_message(Error(f"expected Run, got {type(m).__name__}"))
            raise UsageError(f"protocol violation: {type(m).__name__} while idle")
        ctx._begin_run()
        try:
            outcome = forward_fn(ctx)
            ctx._end_run()
        except RemoteError:
            raise
        except Exception as e:
            try:
                channel.send_message(Error(f"forward execution failed: {e}"))
            except OSError:
                pass
            raise
        channel.send_message(RunResult(_as_outcome(outcome)))


def serve_forward(endpoint, model_name: str, forward_fn) -> None:
    """Listen, serve one controller session, return cleanly on Shutdown."""
    with Listener(endpoint) as listener:
        with listener.accept() as channel:
            _serve_session(channel, model_name, forward_fn)


def serve_loop(endpoint, model_name: str, forward_fn, sessions: int | None = None,
               on_ready=None) -> None:
    """Serve controller sessions back to back until killed.

    sessions bounds how many to accept (None = forever); on_ready fires once
    the listener is bound, for process supervisors.
    """
    with Listener(endpoint) as listener:
        if on_ready is not None:
            on_ready(listener)
        served = 0
        while sessions is None or served < sessions:
            with listener.accept() as channel:
                _serve_session(channel, model_name, forward_fn)
            served += 1
