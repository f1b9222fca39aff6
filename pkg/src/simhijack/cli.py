"""Operator command line.

Subcommands: serve the reference simulator, collect traces into log + graph
artifacts, rebuild graphs from logs, run likelihood-weighting inference,
replay a logged trace, and compare two graphs under an id mapping.

Exit codes: 0 success, 1 usage/config error, 2 runtime or protocol error.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from importlib import resources
from pathlib import Path

from .client import UsageError, serve_loop
from .controller import (
    CONDITION,
    INTERVENE,
    ConfigError,
    ControllerError,
    Forced,
    Prior,
    Replay,
    Session,
    SessionConfig,
    inference_report,
    likelihood_weighting,
)
from .malaria import (
    ParseError,
    ScenarioError,
    load_observations,
    load_scenario,
    make_forward,
)
from .trace import (
    TraceError,
    compare_graphs,
    export_graph,
    import_graph,
    merge_graphs,
    parse_mapping,
    read_traces,
    reaggregate_log,
)
from .wire import WireError

MODEL_NAME = "simhijack-malaria"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for runtime
    # errors, so route usage failures through exit code 1.
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _default_scenario() -> str:
    return str(resources.files("simhijack").joinpath("scenarios/ifakara.json"))


# ---------------------------------------------------------------------------
# Commands

def _cmd_serve(args) -> int:
    cfg = load_scenario(args.scenario)
    observations = None
    if args.observations:
        observations = load_observations(args.observations, cfg)
    try:
        serve_loop(args.listen, MODEL_NAME, make_forward(cfg, observations))
    except KeyboardInterrupt:
        pass
    return 0


def _write_graph_artifacts(out: Path, graph, table) -> None:
    (out / "graph.json").write_bytes(export_graph(graph, table, "json"))
    (out / "addresses.tsv").write_bytes(export_graph(graph, table, "tsv"))
    (out / "graph.dot").write_bytes(export_graph(graph, table, "dot"))


def _progress_printer():
    started = time.monotonic()

    def report(done, resident_keys):
        rate = done / max(time.monotonic() - started, 1e-9)
        print(f"{done} traces, {rate:.1f} traces/s, resident keys {resident_keys}",
              file=sys.stderr, flush=True)

    return report


def _split_traces(total: int, k: int) -> list:
    base, rem = divmod(total, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


def _cmd_trace(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    endpoints = list(args.connect)
    k = args.parallel
    if k < 1:
        raise _UsageError("--parallel must be >= 1")
    if len(endpoints) == 1 and k > 1:
        endpoints = endpoints * k
    if len(endpoints) != k:
        raise _UsageError(f"--parallel {k} needs 1 or {k} --connect endpoints, "
                          f"got {len(endpoints)}")
    progress = _progress_printer() if args.progress else None

    if k == 1:
        config = SessionConfig(endpoint=endpoints[0], num_traces=args.num_traces,
                               master_seed=args.seed,
                               trace_log_path=out / "traces.sjtl")
        session = Session(config)
        for _ in session.collect_traces(keep_events=False, progress=progress):
            pass
        graph, table = session.aggregator.graph, session.aggregator.table
    else:
        counts = _split_traces(args.num_traces, k)
        results: list = [None] * k
        failures: list = [None] * k

        def run(i):
            if counts[i] == 0:
                return
            try:
                cfg = SessionConfig(endpoint=endpoints[i], num_traces=counts[i],
                                    master_seed=(args.seed + (i << 32)) & ((1 << 64) - 1),
                                    trace_log_path=out / f"traces.{i}.sjtl")
                s = Session(cfg)
                for _ in s.collect_traces(keep_events=False,
                                          progress=progress if i == 0 else None):
                    pass
                results[i] = (s.aggregator.graph, s.aggregator.table)
            except BaseException as e:
                failures[i] = e

        threads = [threading.Thread(target=run, args=(i,)) for i in range(k)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for e in failures:
            if e is not None:
                raise e
        parts = [r for r in results if r is not None]
        graph, table = parts[0]
        for other in parts[1:]:
            graph, table = merge_graphs((graph, table), other)
    _write_graph_artifacts(out, graph, table)
    return 0


def _cmd_graph(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    agg = reaggregate_log(args.log)
    _write_graph_artifacts(out, agg.graph, agg.table)
    return 0


def _parse_force(items) -> dict:
    assignments = {}
    for item in items:
        addr, sep, rest = item.rpartition("=")
        if not sep or not addr:
            raise _UsageError(f"--force needs addr=value[:intervene], got {item!r}")
        mode = CONDITION
        if rest.endswith(":intervene"):
            mode = INTERVENE
            rest = rest[: -len(":intervene")]
        elif rest.endswith(":condition"):
            rest = rest[: -len(":condition")]
        try:
            value = float(rest)
        except ValueError:
            raise _UsageError(f"--force value must be a number, got {rest!r}") from None
        assignments[addr] = (value, mode)
    return assignments


def _load_observe_overrides(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise _UsageError(f"cannot read observe overrides {path}: {e}") from None
    if not isinstance(doc, dict):
        raise _UsageError("observe overrides must be a JSON object of address -> value|list")
    out = {}
    for addr, v in doc.items():
        if isinstance(v, list):
            out[addr] = [float(x) for x in v]
        else:
            out[addr] = float(v)
    return out


def _cmd_infer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = Forced(_parse_force(args.force)) if args.force else Prior()
    overrides = _load_observe_overrides(args.observe_file) if args.observe_file else {}
    config = SessionConfig(endpoint=args.connect, num_traces=args.num_traces,
                           master_seed=args.seed,
                           trace_log_path=out / "traces.sjtl",
                           policy=policy, observe_overrides=overrides)
    result = likelihood_weighting(Session(config))
    report = inference_report(result, args.query or [])
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"log_marginal {report['log_marginal']:.6f}  ess {report['ess']:.1f}  "
          f"num_traces {report['num_traces']}", file=sys.stderr)
    return 0


def _cmd_replay(args) -> int:
    traces, _ = read_traces(args.log)
    if not 0 <= args.index < len(traces):
        raise _UsageError(f"--index {args.index} out of range, log holds {len(traces)} traces")
    source = traces[args.index]
    config = SessionConfig(endpoint=args.connect, num_traces=1,
                           master_seed=args.seed,
                           policy=Replay(source))
    with Session(config) as session:
        replayed = session.run_forward(trace_id=source.trace_id)
    reproduced = len(replayed.events) == len(source.events) and all(
        a.kind == b.kind and a.address == b.address and a.value == b.value
        for a, b in zip(replayed.events, source.events))
    info = {
        "index": args.index,
        "trace_id": source.trace_id,
        "num_events": len(replayed.events),
        "reproduced": reproduced,
        "divergent": replayed.divergent,
    }
    text = json.dumps(info, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "replay.json").write_text(text)
    sys.stdout.write(text)
    return 0


def _cmd_compare(args) -> int:
    graph_a = import_graph(Path(args.a).read_bytes())
    graph_b = import_graph(Path(args.b).read_bytes())
    mapping = parse_mapping(Path(args.map).read_text())
    report = compare_graphs(graph_a, graph_b, mapping)
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parsers

def _add_serve(sub) -> None:
    p = sub.add_parser("serve", help="run the reference malaria simulator server")
    p.add_argument("--scenario", default=_default_scenario(),
                   help="scenario JSON (default: shipped ifakara.json)")
    p.add_argument("--listen", required=True, help="endpoint to bind, tcp:// or ipc://")
    p.add_argument("--observations", help="JSON list of reported monthly case counts")
    p.set_defaults(func=_cmd_serve)


def _build_parser() -> _Parser:
    parser = _Parser(prog="simhijack",
                     description="Execution-protocol tracing and inference "
                                 "for hijacked stochastic simulators.")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_serve(sub)

    p = sub.add_parser("trace", help="collect traces and export graph artifacts")
    p.add_argument("--connect", action="append", required=True,
                   help="simulator endpoint (repeat for --parallel sessions)")
    p.add_argument("--num-traces", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--progress", action="store_true",
                   help="print traces/sec and resident key count every 100 traces")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=_cmd_trace)

    p = sub.add_parser("graph", help="rebuild graph artifacts from a trace log")
    p.add_argument("--log", required=True, help="trace log (.sjtl)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_graph)

    p = sub.add_parser("infer", help="likelihood-weighting inference")
    p.add_argument("--connect", required=True)
    p.add_argument("--num-traces", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="append", default=[],
                   metavar="ADDR=VALUE[:intervene]",
                   help="pin a draw; weighted as a condition unless :intervene")
    p.add_argument("--observe-file",
                   help="JSON object address -> value|list overriding observe values")
    p.add_argument("--query", action="append", default=[],
                   help="address to estimate a posterior for (repeatable)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("replay", help="re-execute one logged trace")
    p.add_argument("--log", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--connect", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("compare", help="compare two graph exports under an id map")
    p.add_argument("--a", required=True, help="first graph.json")
    p.add_argument("--b", required=True, help="second graph.json")
    p.add_argument("--map", required=True, help="two-column TSV of id pairs")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=_cmd_compare)
    return parser


def _dispatch(parser, argv) -> int:
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ScenarioError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (WireError, ControllerError, TraceError, UsageError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


def main(argv=None) -> int:
    return _dispatch(_build_parser(), argv)


def malaria_main(argv=None) -> int:
    parser = _Parser(prog="simhijack-malaria",
                     description="Reference malaria simulator server.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_serve(sub)
    return _dispatch(parser, argv)


if __name__ == "__main__":
    sys.exit(main())
