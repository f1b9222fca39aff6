"""Drive the unmodified Python controller against a model server.

Two modes back the cross-language tests:

  --endpoint E --out R.json   run likelihood weighting against a server that
                              is already listening on E (the TypeScript client
                              under test) and write the posterior report
  --reference-log PATH        serve the same conjugate model from the Python
                              client in-process and record its trace log, as
                              the byte-for-byte reference for the TS run

The conjugate model is Normal(0,1) with one unit-variance observation at 1.0,
so the exact posterior is Normal(0.5, 0.5).
"""

import argparse
import json
import sys
import threading

from simhijack.client import serve_loop
from simhijack.controller import (
    Session,
    SessionConfig,
    likelihood_weighting,
    posterior_query,
)
from simhijack.wire import Normal

LATENT = "[x]__Normal"


def conjugate_forward(ctx):
    x = ctx.sample(Normal(0.0, 1.0), "x")
    ctx.observe(Normal(x.item(), 1.0), 1.0, "obs")
    return x


def run_inference(endpoint, num_traces, seed, log_path):
    config = SessionConfig(
        endpoint,
        num_traces=num_traces,
        master_seed=seed,
        trace_log_path=log_path,
    )
    session = Session(config)
    result = likelihood_weighting(session)
    est = posterior_query(result.weighted_traces, LATENT)
    return {
        "address": est.address,
        "mean": est.mean,
        "variance": est.variance,
        "ess": est.ess,
        "log_marginal": result.log_marginal,
        "num_traces": result.num_traces,
        "divergent_count": result.divergent_count,
    }


def write_reference_log(log_path, num_traces, seed, endpoint):
    ready = threading.Event()
    server = threading.Thread(
        target=serve_loop,
        args=(endpoint, "conjugate-model", conjugate_forward),
        kwargs={"sessions": 1, "on_ready": lambda _l: ready.set()},
    )
    server.start()
    if not ready.wait(10.0):
        raise RuntimeError("reference model server did not bind")
    try:
        return run_inference(endpoint, num_traces, seed, log_path)
    finally:
        server.join(10.0)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--endpoint", help="endpoint of a listening model server")
    parser.add_argument("--num-traces", type=int, default=10_000)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--out", help="write the posterior report here as JSON")
    parser.add_argument("--log", help="record the trace log at this path")
    parser.add_argument(
        "--reference-log",
        help="serve the Python client in-process and record its log here",
    )
    args = parser.parse_args(argv)

    if args.reference_log:
        endpoint = args.reference_log + ".sock"
        report = write_reference_log(
            args.reference_log, args.num_traces, args.seed, f"ipc://{endpoint}"
        )
    elif args.endpoint:
        report = run_inference(args.endpoint, args.num_traces, args.seed, args.log)
    else:
        parser.error("need --endpoint or --reference-log")

    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)
    json.dump(report, sys.stdout)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
