"""Generate the golden wire vectors the TypeScript client tests pin against.

Everything here is produced by the installed simhijack package (the protocol's
source of truth): fixed per-variant frame encodings, plus a full canned
session recorded from the real Python client talking to a scripted
controller over a socket pair.

Run from the repository root:  python3 ts-client/tools/gen_golden.py
"""

import json
import socket
import struct
import threading
from pathlib import Path

from simhijack.client import _serve_session
from simhijack.wire import (
    Bernoulli,
    Categorical,
    Channel,
    Error,
    Handshake,
    HandshakeResult,
    Normal,
    Observe,
    ObserveResult,
    Poisson,
    Exponential,
    Run,
    RunResult,
    Sample,
    SampleResult,
    Shutdown,
    Tensor,
    Uniform,
    encode_message,
)

OUT = Path(__file__).resolve().parent.parent / "test" / "golden" / "vectors.json"

MODEL_NAME = "golden-model"
SYSTEM_NAME = "golden-controller"

FIXED_MESSAGES = [
    ("handshake", Handshake(SYSTEM_NAME, 1)),
    ("handshake_result", HandshakeResult(MODEL_NAME, 1)),
    ("run", Run(7)),
    ("run_large_trace_id", Run(2**64 - 2)),
    ("sample_normal", Sample("[x]__Normal", Normal(0.0, 1.0), True)),
    ("sample_uniform", Sample("[u]__Uniform", Uniform(-1.5, 2.5), False)),
    ("sample_bernoulli", Sample("[step; flip]__Bernoulli", Bernoulli(0.25), True)),
    ("sample_categorical",
     Sample("[c]__Categorical", Categorical(Tensor((3,), (0.2, 0.3, 0.5))), True)),
    ("sample_poisson", Sample("[p]__Poisson", Poisson(4.5), True)),
    ("sample_exponential", Sample("[e]__Exponential", Exponential(0.75), True)),
    ("sample_result_scalar", SampleResult(Tensor((), (0.125,)))),
    ("sample_result_matrix",
     SampleResult(Tensor((2, 2), (1.0, -2.0, 3.5, 0.0)))),
    ("observe", Observe("[y]__Normal", Normal(0.125, 1.0), Tensor((), (1.5,)))),
    ("observe_result", ObserveResult()),
    ("run_result_scalar_one", RunResult(Tensor((), (1.0,)))),
    ("run_result_vector", RunResult(Tensor((2,), (0.125, 1.0)))),
    ("shutdown", Shutdown()),
    ("error", Error("boom: é栗")),
]


def canned_forward(ctx):
    x = ctx.sample(Normal(0.0, 1.0), "x")
    with ctx.frame("step"):
        y = ctx.sample(Bernoulli(0.25), "flip")
    ctx.observe(Normal(x.item(), 1.0), 1.5, "y")
    return [x.item(), y.item()]


def record_canned_session():
    """Drive the real client through handshake, one run, shutdown."""
    a, b = socket.socketpair()
    client_ch, controller_ch = Channel(a), Channel(b)
    server = threading.Thread(
        target=_serve_session, args=(client_ch, MODEL_NAME, canned_forward))
    server.start()

    sent = []
    received = []

    def send(m):
        frame = encode_message(m)
        sent.append({"message": type(m).__name__, "hex": frame.hex()})
        controller_ch.send_raw(frame)

    def recv(expected):
        payload = controller_ch.recv_payload()
        frame = struct.pack("<I", len(payload)) + payload
        received.append({"message": expected, "hex": frame.hex()})

    send(Handshake(SYSTEM_NAME, 1))
    recv("HandshakeResult")
    send(Run(7))
    recv("Sample")
    send(SampleResult(Tensor((), (0.125,))))
    recv("Sample")
    send(SampleResult(Tensor((), (1.0,))))
    recv("Observe")
    send(ObserveResult())
    recv("RunResult")
    send(Shutdown())
    server.join(timeout=5)
    if server.is_alive():
        raise RuntimeError("client session did not shut down")
    client_ch.close()
    controller_ch.close()
    return {"model_name": MODEL_NAME, "system_name": SYSTEM_NAME,
            "trace_id": 7, "controller_sends": sent, "client_sends": received}


def main():
    doc = {
        "protocol_version": 1,
        "frames": [{"name": name, "hex": encode_message(m).hex()}
                   for name, m in FIXED_MESSAGES],
        "canned_session": record_canned_session(),
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {OUT} ({OUT.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
