"""Trace data model, stack-style addressing, and streaming trace-graph aggregation.

The aggregator keeps bounded state (unique addresses, edges, running stats)
no matter how many traces stream through it; raw events spill to an
append-only binary log with dictionary-compressed addresses.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

from ._backend import impl
from ._wiretypes import Tensor, WireError
from .wire import encode_distribution

__all__ = [
    "START", "END", "SAMPLE", "OBSERVE",
    "TraceError", "IllegalFrameCharacter", "OutOfOrder", "NoOpenTrace",
    "OpenTrace", "UnknownId", "DuplicateMapping", "LogFormatError",
    "format_address", "TraceEvent", "Trace", "TraceSummary",
    "AddressTable", "TraceGraph", "TraceAggregator",
    "LOG_MAGIC", "LOG_VERSION", "iter_log_records", "read_traces",
    "reaggregate_log",
    "export_graph", "import_graph", "compare_graphs", "parse_mapping",
    "merge_graphs",
]

# Virtual node ids; address nodes are 1-based dense ints.
START = 0
END = -1

SAMPLE = "sample"
OBSERVE = "observe"


class TraceError(Exception):
    pass


class IllegalFrameCharacter(TraceError):
    pass


class OutOfOrder(TraceError):
    """Event arrived outside an open begin_trace/finalize_trace bracket."""


class NoOpenTrace(TraceError):
    pass


class OpenTrace(TraceError):
    """Operation requires a finalized aggregator."""


class UnknownId(TraceError):
    pass


class DuplicateMapping(TraceError):
    pass


class LogFormatError(TraceError):
    pass


def format_address(frames, dist_name: str) -> str:
    """Canonical draw identity: `[frame1; frame2; ...; frameN]__DistName`."""
    if not frames:
        raise IllegalFrameCharacter("address needs at least one frame")
    for f in frames:
        if not f:
            raise IllegalFrameCharacter("empty frame")
        if ";" in f or "]" in f:
            raise IllegalFrameCharacter(f"frame {f!r} contains ';' or ']'")
    return "[" + "; ".join(frames) + "]__" + dist_name


@dataclass(slots=True)
class TraceEvent:
    kind: str  # SAMPLE or OBSERVE
    address: str
    dist: object
    value: Tensor
    log_prob: float
    index_in_trace: int


@dataclass(slots=True)
class Trace:
    trace_id: int
    events: tuple
    outcome: Tensor | None
    log_joint: float
    log_weight: float
    divergent: bool = False


@dataclass(slots=True)
class TraceSummary:
    trace_id: int
    num_events: int
    log_joint: float
    log_weight: float
    outcome: Tensor


class AddressTable:
    """Full address string -> dense short id A1..AN, in first-seen order."""

    def __init__(self):
        self._ids: dict[str, int] = {}
        self._addresses: list[str] = []
        self._interpretations: dict[int, str] = {}

    def register(self, address: str) -> int:
        i = self._ids.get(address)
        if i is None:
            i = len(self._addresses) + 1
            self._ids[address] = i
            self._addresses.append(address)
        return i

    def id_of(self, address: str) -> int:
        try:
            return self._ids[address]
        except KeyError:
            raise UnknownId(f"unknown address {address!r}") from None

    def address_of(self, node_id: int) -> str:
        if not 1 <= node_id <= len(self._addresses):
            raise UnknownId(f"no address with id {node_id}")
        return self._addresses[node_id - 1]

    def set_interpretation(self, node_id: int, text: str) -> None:
        self.address_of(node_id)
        self._interpretations[node_id] = text

    def interpretation(self, node_id: int) -> str | None:
        return self._interpretations.get(node_id)

    def __len__(self) -> int:
        return len(self._addresses)

    def __contains__(self, address: str) -> bool:
        return address in self._ids

    def items(self):
        """(id, address) pairs in id order."""
        return enumerate(self._addresses, start=1)


def node_label(node_id: int) -> str:
    if node_id == START:
        return "START"
    if node_id == END:
        return "END"
    return f"A{node_id}"


def parse_node_label(label) -> int:
    if isinstance(label, int):
        return label
    if label == "START":
        return START
    if label == "END":
        return END
    if isinstance(label, str) and label.startswith("A"):
        try:
            i = int(label[1:])
        except ValueError:
            raise UnknownId(f"bad node id {label!r}") from None
        if i >= 1:
            return i
    raise UnknownId(f"bad node id {label!r}")


def _welford_update(st: list, x: float) -> None:
    st[0] = n = st[0] + 1
    d = x - st[1]
    st[1] += d / n
    st[2] += d * (x - st[1])
    if x < st[3]:
        st[3] = x
    if x > st[4]:
        st[4] = x


def _welford_merge(a: list, b: list) -> list:
    if a[0] == 0:
        return list(b)
    if b[0] == 0:
        return list(a)
    n = a[0] + b[0]
    delta = b[1] - a[1]
    mean = a[1] + delta * b[0] / n
    m2 = a[2] + b[2] + delta * delta * a[0] * b[0] / n
    return [n, mean, m2, min(a[3], b[3]), max(a[4], b[4])]


class TraceGraph:
    """Visit/transition counts over unique addresses plus virtual START/END.

    Stats entries are [count, mean, M2, min, max] per address node, over the
    scalar values recorded there (Welford single-pass).
    """

    def __init__(self):
        self.node_visits: dict[int, int] = {}
        self.edge_counts: dict[tuple[int, int], int] = {}
        self.stats: dict[int, list] = {}
        self.trace_count = 0

    def out_total(self, v: int) -> int:
        return sum(c for (s, _), c in self.edge_counts.items() if s == v)

    def out_edges(self, v: int) -> dict[int, int]:
        return {d: c for (s, d), c in self.edge_counts.items() if s == v}

    def edge_probability(self, v: int, w: int) -> float:
        total = self.out_total(v)
        if total == 0:
            return 0.0
        return self.edge_counts.get((v, w), 0) / total

    def path_log_probability(self, path) -> float:
        """Sum of log transition probabilities along START -> path -> END.

        -inf encodes an unseen edge; path entries are address ids ("A3" or 3).
        """
        nodes = [START] + [parse_node_label(p) for p in path] + [END]
        totals: dict[int, int] = {}
        acc = 0.0
        for v, w in zip(nodes, nodes[1:]):
            c = self.edge_counts.get((v, w), 0)
            if c == 0:
                return float("-inf")
            total = totals.get(v)
            if total is None:
                totals[v] = total = self.out_total(v)
            acc += math.log(c / total)
        return acc

    def stats_of(self, node_id: int):
        """(count, mean, variance, min, max); None when nothing recorded."""
        st = self.stats.get(node_id)
        if st is None or st[0] == 0:
            return None
        n, mean, m2, lo, hi = st
        var = m2 / (n - 1) if n > 1 else 0.0
        return n, mean, var, lo, hi


# ---------------------------------------------------------------------------
# On-disk trace log

LOG_MAGIC = b"SJTL"
LOG_VERSION = 1

REC_TRACE_HEADER = 0
REC_SAMPLE = 1
REC_OBSERVE = 2
REC_TRAILER = 3
REC_DICT = 4

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_BI = struct.Struct("<BI")     # record tag + addr id
_TENSOR0 = struct.Struct("<Id")  # rank-0 tensor


def _encode_tensor(t: Tensor) -> bytes:
    parts = [_U32.pack(len(t.dims))]
    for d in t.dims:
        parts.append(_U32.pack(d))
    parts.append(struct.pack(f"<{len(t.values)}d", *t.values))
    return b"".join(parts)


class TraceAggregator:
    """Single-writer streaming aggregator for one session's event stream.

    Resident state grows only with unique addresses and edges, never with
    trace count. Both log records and graph deltas are buffered per trace and
    applied at finalize, so an abort discards the trace completely: the log
    stays valid and the graph reflects finalized traces only.
    """

    def __init__(self, log_path=None):
        self.graph = TraceGraph()
        self.table = AddressTable()
        self._open = False
        self._prev = START
        self._trace_id = 0
        self._events_in_trace = 0
        self._log_joint = 0.0
        self._obs_log_weight = 0.0
        self._t_visits: dict[int, int] = {}  # open trace's graph deltas
        self._t_edges: dict[tuple[int, int], int] = {}
        self._t_stats: dict[int, list] = {}
        self._buf: list[bytes] = []          # records of the open trace
        self._dict_flushed: set[int] = set()  # addr ids durably written
        self._dict_in_buf: set[int] = set()
        self._file = None
        self.log_path = log_path
        if log_path is not None:
            self._file = open(log_path, "wb")
            self._file.write(LOG_MAGIC + _U16.pack(LOG_VERSION))

    # -- trace lifecycle

    def begin_trace(self, trace_id: int) -> None:
        if self._open:
            raise OutOfOrder(f"trace {self._trace_id} still open")
        self._open = True
        self._trace_id = trace_id
        self._events_in_trace = 0
        self._log_joint = 0.0
        self._obs_log_weight = 0.0
        self._prev = START
        if self._file is not None:
            self._buf.append(_U8_HEADER + _U64.pack(trace_id))

    def _touch(self, address: str, value: float, kind_tag: int,
               dist_bytes: bytes, log_prob: float) -> None:
        table = self.table
        aid = table._ids.get(address)
        if aid is None:
            aid = table.register(address)
        visits = self._t_visits
        visits[aid] = visits.get(aid, 0) + 1
        edges = self._t_edges
        key = (self._prev, aid)
        edges[key] = edges.get(key, 0) + 1
        st = self._t_stats.get(aid)
        if st is None:
            self._t_stats[aid] = [1, value, 0.0, value, value]
        else:
            _welford_update(st, value)
        self._prev = aid
        self._events_in_trace += 1
        if self._file is not None:
            if aid not in self._dict_flushed and aid not in self._dict_in_buf:
                ab = address.encode()
                self._buf.append(
                    _BI.pack(REC_DICT, aid) + _U32.pack(len(ab)) + ab)
                self._dict_in_buf.add(aid)
            self._buf.append(
                _BI.pack(kind_tag, aid) + dist_bytes
                + _TENSOR0.pack(0, value) + _F64.pack(log_prob))

    def ingest_sample(self, address: str, dist_bytes: bytes, value: float,
                      log_prob: float) -> None:
        """Hot path: record one sample event with its pre-encoded dist bytes."""
        if not self._open:
            raise OutOfOrder("sample event outside an open trace")
        self._log_joint += log_prob
        self._touch(address, value, REC_SAMPLE, dist_bytes, log_prob)

    def ingest_observe(self, address: str, dist_bytes: bytes, value: float,
                       log_prob: float) -> None:
        if not self._open:
            raise OutOfOrder("observe event outside an open trace")
        self._obs_log_weight += log_prob
        self._touch(address, value, REC_OBSERVE, dist_bytes, log_prob)

    def ingest_event(self, e: TraceEvent) -> None:
        """Record one event; trusts e.log_prob per the TraceEvent invariant."""
        if len(e.value.values) != 1:
            raise TraceError(f"scalar event values required, got shape {e.value.dims}")
        dist_bytes = encode_distribution(e.dist)
        if e.kind == SAMPLE:
            self.ingest_sample(e.address, dist_bytes, e.value.values[0], e.log_prob)
        elif e.kind == OBSERVE:
            self.ingest_observe(e.address, dist_bytes, e.value.values[0], e.log_prob)
        else:
            raise TraceError(f"unknown event kind {e.kind!r}")

    def finalize_trace(self, outcome: Tensor, extra_log_weight: float = 0.0) -> TraceSummary:
        """Close the open trace; extra_log_weight carries forced-draw terms."""
        if not self._open:
            raise NoOpenTrace("finalize_trace without an open trace")
        key = (self._prev, END)
        self._t_edges[key] = self._t_edges.get(key, 0) + 1
        g = self.graph
        g.node_visits[START] = g.node_visits.get(START, 0) + 1
        g.node_visits[END] = g.node_visits.get(END, 0) + 1
        for v, c in self._t_visits.items():
            g.node_visits[v] = g.node_visits.get(v, 0) + c
        for k, c in self._t_edges.items():
            g.edge_counts[k] = g.edge_counts.get(k, 0) + c
        stats = g.stats
        for v, st in self._t_stats.items():
            cur = stats.get(v)
            stats[v] = st if cur is None else _welford_merge(cur, st)
        self._t_visits = {}
        self._t_edges = {}
        self._t_stats = {}
        g.trace_count += 1
        log_weight = self._obs_log_weight + extra_log_weight
        if self._file is not None:
            self._buf.append(
                b"\x03" + _encode_tensor(outcome)
                + _F64.pack(self._log_joint) + _F64.pack(log_weight))
            self._file.write(b"".join(self._buf))
            self._buf.clear()
            self._dict_flushed |= self._dict_in_buf
            self._dict_in_buf.clear()
        self._open = False
        return TraceSummary(self._trace_id, self._events_in_trace,
                            self._log_joint, log_weight, outcome)

    def abort_open_trace(self) -> None:
        """Discard the open trace: buffered records and graph deltas alike."""
        if not self._open:
            return
        self._open = False
        self._buf.clear()
        self._dict_in_buf.clear()
        self._t_visits = {}
        self._t_edges = {}
        self._t_stats = {}

    def close(self) -> None:
        if self._file is not None:
            self._file.flush()
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.abort_open_trace()
        self.close()

    @property
    def open_trace(self) -> bool:
        return self._open

    def resident_key_count(self) -> int:
        """Aggregation-state size: addresses + node, edge, and stats entries."""
        g = self.graph
        return (len(self.table) + len(g.node_visits)
                + len(g.edge_counts) + len(g.stats)
                + len(self._t_visits) + len(self._t_edges) + len(self._t_stats))

    def export(self, fmt: str) -> bytes:
        """Render the aggregate graph; the current trace must be finalized."""
        if self._open:
            raise OpenTrace("cannot export while a trace is open")
        return export_graph(self.graph, self.table, fmt)


_U8_HEADER = bytes([REC_TRACE_HEADER])


# ---------------------------------------------------------------------------
# Log reading

class _LogReader:
    def __init__(self, path, chunk=1 << 20):
        self._f = open(path, "rb")
        self._chunk = chunk
        self._buf = b""
        self._pos = 0

    def _ensure(self, n) -> bool:
        avail = len(self._buf) - self._pos
        while avail < n:
            more = self._f.read(self._chunk)
            if not more:
                if avail == 0:
                    return False
                raise LogFormatError("log ends mid-record")
            self._buf = self._buf[self._pos:] + more
            self._pos = 0
            avail = len(self._buf)
        return True

    def take(self, n):
        if not self._ensure(n):
            return None
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def take_struct(self, s):
        raw = self.take(s.size)
        return None if raw is None else s.unpack(raw)

    def close(self):
        self._f.close()


def iter_log_records(path):
    """Yield parsed log records as tuples, first element the record name."""
    r = _LogReader(path)
    try:
        head = r.take(6)
        if head is None or head[:4] != LOG_MAGIC:
            raise LogFormatError(f"{path}: not a trace log (bad magic)")
        version = _U16.unpack(head[4:6])[0]
        if version != LOG_VERSION:
            raise LogFormatError(f"{path}: unsupported log version {version}")
        while True:
            tag_raw = r.take(1)
            if tag_raw is None:
                return
            tag = tag_raw[0]
            if tag == REC_TRACE_HEADER:
                (tid,) = r.take_struct(_U64)
                yield ("header", tid)
            elif tag in (REC_SAMPLE, REC_OBSERVE):
                (aid,) = r.take_struct(_U32)
                dist, value = _read_dist_and_tensor(r)
                (lp,) = r.take_struct(_F64)
                yield ("sample" if tag == REC_SAMPLE else "observe",
                       aid, dist, value, lp)
            elif tag == REC_TRAILER:
                outcome = _read_tensor_rec(r)
                (lj,) = r.take_struct(_F64)
                (lw,) = r.take_struct(_F64)
                yield ("trailer", outcome, lj, lw)
            elif tag == REC_DICT:
                (aid,) = r.take_struct(_U32)
                (n,) = r.take_struct(_U32)
                addr = r.take(n).decode()
                yield ("dict", aid, addr)
            else:
                raise LogFormatError(f"unknown record tag {tag}")
    finally:
        r.close()


def _read_tensor_rec(r: _LogReader) -> Tensor:
    (rank,) = r.take_struct(_U32)
    dims = []
    for _ in range(rank):
        (d,) = r.take_struct(_U32)
        dims.append(d)
    n = 1
    for d in dims:
        n *= d
    values = struct.unpack(f"<{n}d", r.take(8 * n))
    return Tensor(tuple(dims), values)


# Distribution payload sizes are self-describing; reuse the wire decoder on
# a rebuffered slice.
def _read_dist_and_tensor(r: _LogReader):
    tag_raw = r.take(1)
    kind = tag_raw[0]
    if kind in (1, 2):
        body = tag_raw + r.take(16)
    elif kind in (3, 5, 6):
        body = tag_raw + r.take(8)
    elif kind == 4:
        probs = _read_tensor_rec(r)
        body = tag_raw + _encode_tensor(probs)
    else:
        raise LogFormatError(f"unknown distribution tag {kind} in log")
    dist, _ = impl.read_dist(body, 0)
    value = _read_tensor_rec(r)
    return dist, value


def read_traces(path):
    """Materialize (traces, address table) from a log; oracle/replay path."""
    table = AddressTable()
    id_to_addr: dict[int, str] = {}
    traces: list[Trace] = []
    current: list[TraceEvent] | None = None
    tid = 0
    for rec in iter_log_records(path):
        kind = rec[0]
        if kind == "dict":
            _, aid, addr = rec
            # Ids may arrive out of dense order when an aborted trace consumed
            # table slots; they only need to stay coherent within the file.
            prev = id_to_addr.get(aid)
            if prev is not None and prev != addr:
                raise LogFormatError(f"address id {aid} redefined in log")
            id_to_addr[aid] = addr
            table.register(addr)
        elif kind == "header":
            if current is not None:
                raise LogFormatError("trace header inside an open trace")
            tid = rec[1]
            current = []
        elif kind in ("sample", "observe"):
            if current is None:
                raise LogFormatError("event record outside a trace")
            _, aid, dist, value, lp = rec
            addr = id_to_addr.get(aid)
            if addr is None:
                raise LogFormatError(f"event references unknown address id {aid}")
            current.append(TraceEvent(kind, addr, dist, value, lp, len(current)))
        elif kind == "trailer":
            if current is None:
                raise LogFormatError("trailer without a trace header")
            _, outcome, lj, lw = rec
            traces.append(Trace(tid, tuple(current), outcome, lj, lw))
            current = None
    # A trailing open trace means the writer died mid-trace; logs written by
    # TraceAggregator never contain one.
    if current is not None:
        raise LogFormatError("log ends inside an open trace")
    return traces, table


def reaggregate_log(path, log_path=None) -> TraceAggregator:
    """Stream a saved log back through a fresh aggregator."""
    agg = TraceAggregator(log_path=log_path)
    id_to_addr: dict[int, str] = {}
    for rec in iter_log_records(path):
        kind = rec[0]
        if kind == "dict":
            id_to_addr[rec[1]] = rec[2]
        elif kind == "header":
            agg.begin_trace(rec[1])
        elif kind in ("sample", "observe"):
            _, aid, dist, value, lp = rec
            ev = TraceEvent(kind, id_to_addr[aid], dist, value, lp, 0)
            agg.ingest_event(ev)
        else:
            _, outcome, lj, lw = rec
            # Preserve the recorded weight: trailer log_weight may include
            # forced-draw terms the events alone cannot reconstruct.
            agg.finalize_trace(outcome, extra_log_weight=lw - agg._obs_log_weight)
    if agg.open_trace:
        agg.abort_open_trace()
        raise LogFormatError("log ends inside an open trace")
    return agg


# ---------------------------------------------------------------------------
# Exports

def _node_sort_key(node_id: int):
    if node_id == START:
        return (0, 0)
    if node_id == END:
        return (2, 0)
    return (1, node_id)


def _sorted_nodes(g: TraceGraph):
    return sorted(g.node_visits, key=_node_sort_key)


def _sorted_edges(g: TraceGraph):
    return sorted(g.edge_counts.items(),
                  key=lambda kv: (_node_sort_key(kv[0][0]), _node_sort_key(kv[0][1])))


def export_graph(g: TraceGraph, table: AddressTable, fmt: str) -> bytes:
    """Render the graph as dot, tsv (address table), or json."""
    if fmt == "dot":
        lines = ["digraph trace {", "  rankdir=LR;"]
        for v in _sorted_nodes(g):
            if v in (START, END):
                lines.append(f"  {node_label(v)} [shape=point];")
            else:
                lines.append(f"  {node_label(v)} [label=\"{node_label(v)}\"];")
        totals = {v: g.out_total(v) for v in g.node_visits if v != END}
        for (v, w), c in _sorted_edges(g):
            p = c / totals[v]
            lines.append(f"  {node_label(v)} -> {node_label(w)} [label=\"{p:.3f}\"];")
        lines.append("}")
        return ("\n".join(lines) + "\n").encode()
    if fmt == "tsv":
        lines = ["id\taddress\tvisits\tmean\tvariance"]
        for i, addr in table.items():
            visits = g.node_visits.get(i, 0)
            st = g.stats_of(i)
            mean = repr(st[1]) if st else ""
            var = repr(st[2]) if st else ""
            lines.append(f"A{i}\t{addr}\t{visits}\t{mean}\t{var}")
        return ("\n".join(lines) + "\n").encode()
    if fmt == "json":
        nodes = []
        for v in _sorted_nodes(g):
            entry = {"id": node_label(v),
                     "address": node_label(v) if v in (START, END) else table.address_of(v),
                     "visits": g.node_visits[v],
                     "mean": None, "var": None, "min": None, "max": None}
            st = g.stats_of(v)
            if st is not None:
                entry.update(mean=st[1], var=st[2], min=st[3], max=st[4])
            nodes.append(entry)
        totals = {v: g.out_total(v) for v in g.node_visits if v != END}
        edges = [{"src": node_label(v), "dst": node_label(w), "count": c,
                  "prob": c / totals[v]}
                 for (v, w), c in _sorted_edges(g)]
        doc = {"trace_count": g.trace_count, "nodes": nodes, "edges": edges}
        return (json.dumps(doc, indent=2) + "\n").encode()
    raise ValueError(f"unknown export format {fmt!r}")


def import_graph(data) -> tuple[TraceGraph, AddressTable]:
    """Inverse of the json export."""
    if isinstance(data, bytes):
        data = data.decode()
    doc = json.loads(data)
    g = TraceGraph()
    table = AddressTable()
    g.trace_count = doc["trace_count"]
    addr_nodes = [n for n in doc["nodes"] if n["id"] not in ("START", "END")]
    addr_nodes.sort(key=lambda n: parse_node_label(n["id"]))
    for want, n in enumerate(addr_nodes, start=1):
        if parse_node_label(n["id"]) != want:
            raise LogFormatError(f"node ids not dense at {n['id']}")
        table.register(n["address"])
    for n in doc["nodes"]:
        v = parse_node_label(n["id"])
        g.node_visits[v] = n["visits"]
        if n["mean"] is not None:
            cnt = n["visits"]
            m2 = n["var"] * (cnt - 1) if cnt > 1 else 0.0
            g.stats[v] = [cnt, n["mean"], m2, n["min"], n["max"]]
    for e in doc["edges"]:
        g.edge_counts[(parse_node_label(e["src"]), parse_node_label(e["dst"]))] = e["count"]
    return g, table


# ---------------------------------------------------------------------------
# Cross-model comparison

def parse_mapping(text: str):
    """Two-column TSV (idA, idB); '#' starts a comment."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise TraceError(f"mapping line {lineno}: expected two tab-separated ids")
        pairs.append((cols[0].strip(), cols[1].strip()))
    return pairs


def compare_graphs(a, b, mapping):
    """Compare two (graph, table) pairs under an id mapping.

    Per mapped pair: visits per trace on each side and the total-variation
    distance between out-edge distributions restricted to mapped targets
    (unmapped mass lumped as "other"). Virtual START/END map to themselves.
    """
    ga, ta = a
    gb, tb = b
    a_to_b: dict[int, int] = {START: START, END: END}
    b_to_a: dict[int, int] = {START: START, END: END}
    pairs = []
    for la, lb in mapping:
        va, vb = parse_node_label(la), parse_node_label(lb)
        ta.address_of(va)
        tb.address_of(vb)
        if va in a_to_b or vb in b_to_a:
            raise DuplicateMapping(f"{la} or {lb} mapped twice")
        a_to_b[va] = vb
        b_to_a[vb] = va
        pairs.append((va, vb))

    report_pairs = []
    for va, vb in pairs:
        out_a = ga.out_edges(va)
        out_b = gb.out_edges(vb)
        tot_a = sum(out_a.values())
        tot_b = sum(out_b.values())
        buckets_a: dict[object, float] = {}
        buckets_b: dict[object, float] = {}
        for t, c in out_a.items():
            key = t if t in a_to_b else "other"
            buckets_a[key] = buckets_a.get(key, 0.0) + c / tot_a
        for t, c in out_b.items():
            key = b_to_a.get(t, "other")
            buckets_b[key] = buckets_b.get(key, 0.0) + c / tot_b
        tv = 0.0
        for key in buckets_a.keys() | buckets_b.keys():
            tv += abs(buckets_a.get(key, 0.0) - buckets_b.get(key, 0.0))
        tv *= 0.5
        vpt_a = ga.node_visits.get(va, 0) / ga.trace_count if ga.trace_count else 0.0
        vpt_b = gb.node_visits.get(vb, 0) / gb.trace_count if gb.trace_count else 0.0
        report_pairs.append({
            "id_a": node_label(va), "id_b": node_label(vb),
            "address_a": ta.address_of(va), "address_b": tb.address_of(vb),
            "visits_per_trace_a": vpt_a, "visits_per_trace_b": vpt_b,
            "visits_per_trace_diff": vpt_a - vpt_b,
            "out_tv_distance": tv,
        })
    mapped_a = {va for va, _ in pairs}
    mapped_b = {vb for _, vb in pairs}
    unmapped_a = [f"A{i}" for i, _ in ta.items() if i not in mapped_a]
    unmapped_b = [f"A{i}" for i, _ in tb.items() if i not in mapped_b]
    return {
        "pairs": report_pairs,
        "unmapped_a": unmapped_a,
        "unmapped_b": unmapped_b,
        "trace_count_a": ga.trace_count,
        "trace_count_b": gb.trace_count,
    }


# ---------------------------------------------------------------------------
# Parallel-session merge

def merge_graphs(a, b) -> tuple[TraceGraph, AddressTable]:
    """Pointwise count addition plus parallel Welford merge.

    Count maps keyed by address are independent of merge order; short ids
    follow the left operand's first-seen order, then the right's.
    """
    ga, ta = a
    gb, tb = b
    g = TraceGraph()
    table = AddressTable()
    for _, addr in ta.items():
        table.register(addr)
    remap_b: dict[int, int] = {START: START, END: END}
    for i, addr in tb.items():
        remap_b[i] = table.register(addr)
    g.trace_count = ga.trace_count + gb.trace_count
    g.node_visits = dict(ga.node_visits)
    for v, c in gb.node_visits.items():
        m = remap_b[v]
        g.node_visits[m] = g.node_visits.get(m, 0) + c
    g.edge_counts = dict(ga.edge_counts)
    for (v, w), c in gb.edge_counts.items():
        key = (remap_b[v], remap_b[w])
        g.edge_counts[key] = g.edge_counts.get(key, 0) + c
    g.stats = {v: list(st) for v, st in ga.stats.items()}
    for v, st in gb.stats.items():
        m = remap_b[v]
        if m in g.stats:
            g.stats[m] = _welford_merge(g.stats[m], st)
        else:
            g.stats[m] = list(st)
    return g, table
