"""Binary message format, framing, and transport between simulator and controller.

Frame layout: u32 little-endian payload length, then payload (u8 variant tag
followed by the variant's fields). All integers little-endian, all floats f64.
"""

from __future__ import annotations

import errno
import os
import socket
import struct
import time

from ._backend import BACKEND, impl
from ._wiretypes import (
    PROTOCOL_VERSION,
    Bernoulli,
    BindFailed,
    Categorical,
    ChannelClosed,
    ChannelError,
    ConnectionRefused,
    DecodeError,
    Endpoint,
    EndpointError,
    Error,
    Exponential,
    Handshake,
    HandshakeResult,
    InvalidMessage,
    MalformedField,
    Message,
    Normal,
    Observe,
    ObserveResult,
    Poisson,
    RemoteError,
    Run,
    RunResult,
    Sample,
    SampleResult,
    Shutdown,
    Tensor,
    Truncated,
    Uniform,
    UnknownTag,
    WireError,
    kind_name,
)

__all__ = [
    "BACKEND", "PROTOCOL_VERSION",
    "Tensor", "Normal", "Uniform", "Bernoulli", "Categorical", "Poisson",
    "Exponential", "kind_name",
    "Handshake", "HandshakeResult", "Run", "Sample", "SampleResult",
    "Observe", "ObserveResult", "RunResult", "Shutdown", "Error", "Message",
    "Endpoint", "EndpointError",
    "WireError", "InvalidMessage", "DecodeError", "Truncated", "UnknownTag",
    "MalformedField", "ChannelError", "ConnectionRefused", "BindFailed",
    "ChannelClosed", "RemoteError",
    "encode_message", "decode_message", "iter_frames",
    "encode_distribution", "decode_distribution",
    "Channel", "Listener", "listen", "connect", "open_channel",
]

_U32 = struct.Struct("<I")

CONNECT_ATTEMPTS = 10
CONNECT_DELAY = 0.2


def encode_message(m) -> bytes:
    """One complete frame: length prefix plus tagged payload."""
    payload = impl.encode_payload(m)
    return _U32.pack(len(payload)) + payload


def decode_message(b):
    """Inverse of encode_message; b must be exactly one frame."""
    if len(b) < 4:
        raise Truncated(f"frame header needs 4 bytes, have {len(b)}")
    n = _U32.unpack_from(b, 0)[0]
    if len(b) - 4 < n:
        raise Truncated(f"frame declares {n} payload bytes, carries {len(b) - 4}")
    if len(b) - 4 > n:
        raise MalformedField(f"{len(b) - 4 - n} bytes after frame end")
    return impl.decode_payload(b[4:])


def iter_frames(b):
    """Decode a concatenation of frames in order."""
    pos = 0
    end = len(b)
    while pos < end:
        if end - pos < 4:
            raise Truncated("trailing partial frame header")
        n = _U32.unpack_from(b, pos)[0]
        pos += 4
        if end - pos < n:
            raise Truncated(f"frame declares {n} payload bytes, carries {end - pos}")
        yield impl.decode_payload(b[pos:pos + n])
        pos += n


def encode_distribution(d) -> bytes:
    return impl.encode_dist(d)


def decode_distribution(b):
    d, pos = impl.read_dist(b, 0)
    if pos != len(b):
        raise MalformedField(f"{len(b) - pos} trailing bytes after distribution")
    return d


class Channel:
    """Bidirectional ordered frame channel over a connected socket.

    Owned by one logical session at a time; not safe for concurrent use
    from two threads.
    """

    def __init__(self, sock: socket.socket):
        if sock.family == socket.AF_INET:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._rbuf = bytearray()

    def send_message(self, m) -> None:
        self._sock.sendall(encode_message(m))

    def send_raw(self, frame: bytes) -> None:
        """Send a pre-encoded frame (hot path)."""
        self._sock.sendall(frame)

    def recv_payload(self) -> bytes:
        buf = self._rbuf
        recv = self._sock.recv
        while len(buf) < 4:
            chunk = recv(65536)
            if not chunk:
                raise ChannelClosed("connection closed while reading frame header")
            buf += chunk
        total = 4 + _U32.unpack_from(buf, 0)[0]
        while len(buf) < total:
            chunk = recv(65536)
            if not chunk:
                raise ChannelClosed("connection closed mid-frame")
            buf += chunk
        payload = bytes(buf[4:total])
        del buf[:total]
        return payload

    def recv_message(self):
        return impl.decode_payload(self.recv_payload())

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Listener:
    """Bound listening socket producing Channels, one per accepted peer."""

    def __init__(self, endpoint: Endpoint):
        if isinstance(endpoint, str):
            endpoint = Endpoint.parse(endpoint)
        self.endpoint = endpoint
        try:
            if endpoint.scheme == "ipc":
                # Stale socket files from crashed peers block bind.
                try:
                    os.unlink(endpoint.path)
                except FileNotFoundError:
                    pass
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.bind(endpoint.path)
            else:
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                sock.bind((endpoint.host, endpoint.port))
            sock.listen(8)
        except OSError as e:
            raise BindFailed(f"cannot listen on {endpoint}: {e}") from None
        self._sock = sock

    def accept(self) -> Channel:
        sock, _ = self._sock.accept()
        return Channel(sock)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
        if self.endpoint.scheme == "ipc":
            try:
                os.unlink(self.endpoint.path)
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def listen(endpoint) -> Listener:
    return Listener(endpoint)


def connect(endpoint, attempts: int = CONNECT_ATTEMPTS, delay: float = CONNECT_DELAY) -> Channel:
    """Connect to a listener, retrying while it comes up."""
    if isinstance(endpoint, str):
        endpoint = Endpoint.parse(endpoint)
    last = None
    for attempt in range(attempts):
        if attempt:
            time.sleep(delay)
        try:
            if endpoint.scheme == "ipc":
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.connect(endpoint.path)
            else:
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                sock.connect((endpoint.host, endpoint.port))
            return Channel(sock)
        except (ConnectionRefusedError, FileNotFoundError, ConnectionResetError) as e:
            last = e
        except OSError as e:
            if e.errno not in (errno.ECONNREFUSED, errno.ENOENT):
                raise ChannelError(f"cannot connect to {endpoint}: {e}") from None
            last = e
    raise ConnectionRefused(f"no listener at {endpoint} after {attempts} attempts: {last}")


def open_channel(endpoint, mode: str) -> Channel:
    """listen: bind and wait for one peer; connect: dial with retries."""
    if mode == "listen":
        listener = Listener(endpoint)
        try:
            return listener.accept()
        finally:
            listener.close()
    if mode == "connect":
        return connect(endpoint)
    raise ValueError(f"mode must be 'listen' or 'connect', got {mode!r}")
