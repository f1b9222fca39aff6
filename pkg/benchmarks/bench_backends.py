"""Compare the compiled codec against the pure-Python fallback.

Kernel table (default): per-call timings for both backends, in-process.
--traces additionally runs a small end-to-end tracing session under each
backend in a subprocess, since the backend is chosen at import time.

Usage: python3 benchmarks/bench_backends.py [--traces] [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import simhijack._pycodec as pure

try:
    import simhijack._speedups as comp
except ImportError:
    comp = None

from simhijack.wire import Normal, Sample, Tensor


def _sample_payload():
    return pure.encode_payload(Sample("[forward; update_human; infect]__Bernoulli",
                                      Normal(0.0, 1.0), False))


def kernel_cases(mod):
    rng = mod.Rng(1)
    payload = _sample_payload()
    result = mod.sample_result_frame(0.25)[4:]
    return [
        ("rng.next_u64", rng.next_u64),
        ("rng.uniform01", rng.uniform01),
        ("ndtri(0.3)", lambda: mod.ndtri(0.3)),
        ("sample Normal", lambda: mod.sample_value(rng, 1, 0.0, 1.0, None)),
        ("sample Poisson(5)", lambda: mod.sample_value(rng, 5, 5.0, 0.0, None)),
        ("log_prob Normal", lambda: mod.log_prob_value(1, 0.0, 1.0, None, 0.3)),
        ("log_prob Poisson", lambda: mod.log_prob_value(5, 5.0, 0.0, None, 4.0)),
        ("encode Sample", lambda: mod.encode_payload(
            Sample("[forward; x]__Normal", Normal(0.0, 1.0), False))),
        ("decode Sample", lambda: mod.decode_payload(payload)),
        ("decode_sample_parts", lambda: mod.decode_sample_parts(payload)),
        ("sample_result_frame", lambda: mod.sample_result_frame(0.25)),
        ("decode_scalar_result", lambda: mod.decode_scalar_result(result)),
    ]


def time_ns(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number * 1e9


def run_kernels(repeat):
    mods = [("python", pure)] + ([("compiled", comp)] if comp else [])
    tables = {name: {label: time_ns(fn, repeat)
                     for label, fn in kernel_cases(mod)}
              for name, mod in mods}
    width = max(len(label) for label, _ in kernel_cases(pure))
    header = f"{'kernel':<{width}}  {'python':>10}"
    if comp:
        header += f"  {'compiled':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, _ in kernel_cases(pure):
        py = tables["python"][label]
        line = f"{label:<{width}}  {py:>8.0f}ns"
        if comp:
            cn = tables["compiled"][label]
            line += f"  {cn:>8.0f}ns  {py / cn:>7.1f}x"
        print(line)
    if not comp:
        print("\ncompiled backend not built; showing the fallback only")


TRACE_WORKER = "--trace-worker"


def run_trace_worker(num_traces):
    """Serve the bundled scenario in a thread and trace against it."""
    import tempfile
    import threading
    import time

    from simhijack._backend import BACKEND
    from simhijack.client import serve_loop
    from simhijack.controller import Session, SessionConfig
    from simhijack.malaria import load_scenario, make_forward
    from simhijack.trace import END, START
    from importlib import resources

    cfg = load_scenario(resources.files("simhijack") / "scenarios" / "ifakara.json")
    with tempfile.TemporaryDirectory() as d:
        ep = f"ipc://{d}/bench.sock"
        server = threading.Thread(target=serve_loop,
                                  args=(ep, "bench", make_forward(cfg)),
                                  kwargs={"sessions": 1}, daemon=True)
        server.start()
        session = Session(SessionConfig(ep, num_traces=num_traces))
        t0 = time.perf_counter()
        for _ in session.collect_traces(keep_events=False):
            pass
        elapsed = time.perf_counter() - t0
        g = session.aggregator.graph
        events = sum(c for node, c in g.node_visits.items()
                     if node not in (START, END))
    print(json.dumps({"backend": BACKEND, "traces": num_traces,
                      "seconds": elapsed, "events": events}))


def run_traces(num_traces):
    print(f"\nend-to-end: {num_traces} traces of the bundled scenario "
          "(controller + simulator in one process per backend)")
    for env_val in (None, "1"):
        env = dict(os.environ)
        env.pop("SIMHIJACK_PURE_PYTHON", None)
        if env_val:
            env["SIMHIJACK_PURE_PYTHON"] = env_val
        out = subprocess.run([sys.executable, __file__, TRACE_WORKER,
                              str(num_traces)],
                             env=env, capture_output=True, text=True, check=True)
        stats = json.loads(out.stdout.strip().splitlines()[-1])
        rate = stats["traces"] / stats["seconds"]
        per_event = stats["seconds"] / stats["events"] * 1e6
        print(f"  {stats['backend']:>8}: {stats['seconds']:6.2f}s, "
              f"{rate:6.2f} traces/s, {per_event:5.1f} us/event "
              f"({stats['events']} events)")


def main():
    if len(sys.argv) > 1 and sys.argv[1] == TRACE_WORKER:
        run_trace_worker(int(sys.argv[2]))
        return
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--traces", action="store_true",
                        help="also run the end-to-end tracing comparison")
    parser.add_argument("--num-traces", type=int, default=5,
                        help="traces per backend for --traces (default 5)")
    parser.add_argument("--repeat", type=int, default=5,
                        help="timeit repeats per kernel (default 5)")
    args = parser.parse_args()
    run_kernels(args.repeat)
    if args.traces:
        run_traces(args.num_traces)


if __name__ == "__main__":
    main()
