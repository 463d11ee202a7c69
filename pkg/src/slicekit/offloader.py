"""Edge server and device client that execute a split model over the wire.

The server keeps one tail graph per model id (``<name>@<split>`` or
``<name>@<split>+tl``) and answers InferRequest frames with the tail output.
It reports its own compute and decode time in the response so the client
can separate network time from edge time without synchronised clocks.
Inference on a given model is serialised; connections are served
concurrently.
"""
from __future__ import annotations

import csv
import io
import logging
import socket
import socketserver
import statistics
import threading
import time
from dataclasses import dataclass, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from slicekit import wire
from slicekit.benchmark import NATIVE, ResourceProfile, run_unit
from slicekit.errors import (BindError, ConnectionClosed, InvalidSplit, NotTlEligible, ParseError,
                             ServerError, Timeout, WireError)
from slicekit.graph import LayerGraph, enumerate_split_points, random_input, slice_graph
from slicekit.netem import LinkShaper, NetworkProfile, parse_profile, shaped_send
from slicekit.preprocessor import insert_tl
from slicekit.tensor import DeviceTL, EdgeTL, Tensor
from slicekit.wire import FrameType

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0


@dataclass(frozen=True)
class TailEntry:
    graph: LayerGraph
    split_index: int

    @property
    def in_shape(self) -> tuple:
        return self.graph.input_shape


def build_registry(graph: LayerGraph, tl_graphs: Optional[Mapping[int, LayerGraph]] = None,
                   with_tl: bool = True) -> Dict[str, TailEntry]:
    """Tails for every offloading split of ``graph``.

    Plain tails come from ``graph``; TL tails from ``tl_graphs[split]`` when
    given (e.g. a retrained model), else from the untrained TL insertion.
    """
    tl_graphs = dict(tl_graphs or {})
    reg = {}
    for sp in enumerate_split_points(graph):
        if sp.kind == "local-only":
            continue
        reg[wire.model_id_for(graph.name, sp.index)] = TailEntry(slice_graph(graph, sp.index)[1], sp.index)
        if with_tl and sp.tl_eligible:
            tl_graph = tl_graphs.get(sp.index)
            if tl_graph is None:
                tl_graph = insert_tl(graph, sp.index).graph
            tail = slice_graph(tl_graph, sp.index + 1)[1]
            reg[wire.model_id_for(graph.name, sp.index, tl=True)] = TailEntry(tail, sp.index)
    return reg


# ---------------------------------------------------------------------------
# Edge server
# ---------------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        app: EdgeServer = self.server.app
        while True:
            try:
                raw = wire.recv_raw(sock)
            except ConnectionClosed:
                return
            except WireError as e:
                # framing is lost: say why, then drop the connection
                _try_send(sock, wire.error_frame(0, type(e).__name__, str(e)))
                return
            except OSError:
                return
            t0 = time.perf_counter()
            try:
                frame, _ = wire.decode(raw)
            except WireError as e:
                _try_send(sock, wire.error_frame(getattr(e, "request_id", 0), type(e).__name__, str(e)))
                if e.recoverable:
                    continue
                return
            deser_us = (time.perf_counter() - t0) * 1e6
            if not _try_send(sock, app.respond(frame, deser_us)):
                return


def _try_send(sock, data: bytes) -> bool:
    try:
        sock.sendall(data)
        return True
    except OSError:
        return False


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class EdgeServer:
    def __init__(self, registry: Mapping[str, TailEntry], address=("127.0.0.1", 0),
                 edge: ResourceProfile = NATIVE):
        self.registry = dict(registry)
        self.edge = edge
        self._locks = {mid: threading.Lock() for mid in self.registry}
        try:
            self._server = _TCPServer(tuple(address), _Handler)
        except OSError as e:
            raise BindError(f"cannot listen on {address[0]}:{address[1]}: {e}") from e
        self._server.app = self
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self._server.server_address[:2]

    def respond(self, frame: wire.Frame, deser_us: float = 0.0) -> bytes:
        rid = frame.request_id
        if frame.frame_type is FrameType.PING:
            return wire.encode(FrameType.PONG, request_id=rid)
        if frame.frame_type is not FrameType.INFER_REQUEST:
            return wire.error_frame(rid, "UnexpectedFrame", frame.frame_type.name)
        entry = self.registry.get(frame.model_id)
        if entry is None:
            return wire.error_frame(rid, "UnknownModel", frame.model_id)
        if frame.split_index != entry.split_index:
            return wire.error_frame(rid, "SplitMismatch",
                                    f"{frame.model_id} expects split {entry.split_index}, got {frame.split_index}")
        if frame.dims != entry.in_shape:
            return wire.error_frame(rid, "ShapeMismatch",
                                    f"{frame.model_id} expects {entry.in_shape}, got {frame.dims}")
        try:
            with self._locks[frame.model_id]:
                out, edge_us, tl_us = self._run_tail(entry.graph, frame.tensor.data[None])
            meta = wire.response_meta(edge_us=f"{edge_us:.3f}", tl_us=f"{tl_us:.3f}",
                                      deser_us=f"{deser_us:.3f}")
            return wire.encode(FrameType.INFER_RESPONSE, Tensor(out[0]), request_id=rid,
                               model_id=meta, split_index=frame.split_index)
        except Exception as e:  # any tail failure becomes an Error frame, never a dead server
            log.exception("inference failed for %s", frame.model_id)
            return wire.error_frame(rid, "InternalError", f"{type(e).__name__}: {e}")

    def _run_tail(self, graph: LayerGraph, a: np.ndarray):
        edge_us = tl_us = 0.0
        for layer, p in zip(graph.layers, graph.params):
            t0 = time.perf_counter()
            a = run_unit(layer, p, a, self.edge)
            dt = (time.perf_counter() - t0) * 1e6
            if isinstance(layer, EdgeTL):
                tl_us += dt
            else:
                edge_us += dt
        return a, edge_us, tl_us

    def serve_forever(self):
        self._server.serve_forever(poll_interval=0.2)

    def start(self) -> "EdgeServer":
        self._thread = threading.Thread(target=self.serve_forever, name="edge-server", daemon=True)
        self._thread.start()
        return self

    def close(self):
        self._server.shutdown() if self._thread else None
        self._server.server_close()
        if self._thread:
            self._thread.join(5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def serve(registry: Mapping[str, TailEntry], address, edge: ResourceProfile = NATIVE):
    """Run an edge server in the foreground until interrupted."""
    server = EdgeServer(registry, address, edge)
    log.info("edge server listening on %s:%d with %d models", *server.address, len(registry))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._server.server_close()


# ---------------------------------------------------------------------------
# Device client
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DevicePlan:
    """What the device runs for one (split, variant) choice."""

    head: LayerGraph
    model_id: str
    split_index: int
    tl: bool
    local_only: bool


def device_plan(graph: LayerGraph, split_index: int, tl: bool = False,
                tl_graph: Optional[LayerGraph] = None) -> DevicePlan:
    points = {p.index: p for p in enumerate_split_points(graph)}
    if split_index not in points:
        raise InvalidSplit(f"split {split_index} outside -1..{graph.n - 1}")
    sp = points[split_index]
    if sp.kind == "local-only":
        if tl:
            raise NotTlEligible("the local-only plan sends nothing to compress")
        return DevicePlan(graph, "", split_index, False, True)
    if tl:
        if not sp.tl_eligible:
            raise NotTlEligible(f"split {split_index} of {graph.name} is not TL eligible")
        if tl_graph is None:
            tl_graph = insert_tl(graph, split_index).graph
        head = slice_graph(tl_graph, split_index + 1)[0]
    else:
        head = slice_graph(graph, split_index)[0]
    return DevicePlan(head, wire.model_id_for(graph.name, split_index, tl), split_index, tl, False)


@dataclass(frozen=True)
class LatencyReport:
    device_us: float
    tl_us: float
    serialize_us: float
    network_us: float
    edge_us: float
    deserialize_us: float
    total_us: float
    payload_bytes: int = 0

    @property
    def partition_sum(self) -> float:
        return (self.device_us + self.tl_us + self.serialize_us + self.network_us
                + self.edge_us + self.deserialize_us)


COMPONENTS = ["device_us", "tl_us", "serialize_us", "network_us", "edge_us", "deserialize_us"]


class DeviceClient:
    def __init__(self, plan: DevicePlan, address=None, shaper: Optional[LinkShaper] = None,
                 device: ResourceProfile = NATIVE, timeout: float = DEFAULT_TIMEOUT):
        if not plan.local_only and address is None:
            raise ValueError("an offloading plan needs an edge address")
        self.plan = plan
        self.address = address
        self.shaper = shaper or LinkShaper(NetworkProfile(0.0, float("inf")))
        self.device = device
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._next_id = 1

    def connect(self) -> "DeviceClient":
        if self.plan.local_only or self._sock is not None:
            return self
        last = None
        for _ in range(2):  # one retry
            try:
                s = socket.create_connection(tuple(self.address), timeout=self.timeout)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._sock = s
                return self
            except socket.timeout as e:
                last = Timeout(f"connecting to {self.address}: {e}")
            except OSError as e:
                last = ConnectionClosed(f"cannot connect to {self.address}: {e}")
            time.sleep(0.05)
        raise last

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def _rid(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _exchange(self, data: bytes) -> Tuple[bytes, float]:
        self.connect()
        try:
            t0 = time.perf_counter()
            shaped_send(self._sock, data, self.shaper)
            raw = wire.recv_raw(self._sock)
            return raw, (time.perf_counter() - t0) * 1e6
        except socket.timeout as e:
            self.close()
            raise Timeout(f"no response within {self.timeout} s") from e
        except (ConnectionClosed, OSError) as e:
            self.close()
            if isinstance(e, ConnectionClosed):
                raise
            raise ConnectionClosed(str(e)) from e

    def ping(self) -> float:
        rid = self._rid()
        raw, rtt = self._exchange(wire.encode(FrameType.PING, request_id=rid))
        frame, _ = wire.decode(raw)
        if frame.frame_type is not FrameType.PONG or frame.request_id != rid:
            raise ServerError("UnexpectedFrame", f"{frame.frame_type.name} #{frame.request_id}")
        return rtt

    def infer(self, x: Tensor) -> Tuple[Tensor, LatencyReport]:
        t_start = time.perf_counter()
        a = x.data[None]
        device_us = tl_us = 0.0
        for layer, p in zip(self.plan.head.layers, self.plan.head.params):
            t0 = time.perf_counter()
            a = run_unit(layer, p, a, self.device)
            dt = (time.perf_counter() - t0) * 1e6
            if isinstance(layer, DeviceTL):
                tl_us += dt
            else:
                device_us += dt
        if self.plan.local_only:
            total = (time.perf_counter() - t_start) * 1e6
            return Tensor(a[0]), LatencyReport(device_us, tl_us, 0.0, 0.0, 0.0, 0.0, total)

        t0 = time.perf_counter()
        rid = self._rid()
        data = wire.encode(FrameType.INFER_REQUEST, Tensor(a[0]), request_id=rid,
                           model_id=self.plan.model_id, split_index=self.plan.split_index)
        ser_us = (time.perf_counter() - t0) * 1e6

        raw, exchange_us = self._exchange(data)

        t0 = time.perf_counter()
        frame, _ = wire.decode(raw)
        deser_us = (time.perf_counter() - t0) * 1e6
        if frame.request_id != rid:
            raise ServerError("RequestIdMismatch", f"sent {rid}, got {frame.request_id}")
        if frame.frame_type is FrameType.ERROR:
            raise ServerError(*wire.parse_error(frame))
        if frame.frame_type is not FrameType.INFER_RESPONSE:
            raise ServerError("UnexpectedFrame", frame.frame_type.name)
        meta = wire.parse_meta(frame.model_id)
        edge_us = float(meta.get("edge_us", 0))
        edge_tl_us = float(meta.get("tl_us", 0))
        server_deser = float(meta.get("deser_us", 0))
        total = (time.perf_counter() - t_start) * 1e6
        # the network share is whatever the exchange cost beyond the server's own work
        network = max(0.0, exchange_us - edge_us - edge_tl_us - server_deser)
        report = LatencyReport(device_us, tl_us + edge_tl_us, ser_us, network, edge_us,
                               deser_us + server_deser, total, len(data))
        return frame.tensor, report


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    model: str
    split_index: int
    tl: bool
    net: NetworkProfile
    reports: List[LatencyReport]
    outputs: List[Tensor]

    @property
    def variant(self) -> str:
        return "tl" if self.tl else "no-tl"

    @property
    def totals(self) -> List[float]:
        return [r.total_us for r in self.reports]

    @property
    def median_us(self) -> float:
        return statistics.median(self.totals)

    @property
    def p95_us(self) -> float:
        return float(np.percentile(self.totals, 95))

    def component_medians(self) -> Dict[str, float]:
        return {c: statistics.median(getattr(r, c) for r in self.reports) for c in COMPONENTS}


def run_experiment(graph: LayerGraph, split_index: int, tl: bool, net: NetworkProfile,
                   n_requests: int = 30, device: ResourceProfile = NATIVE,
                   edge: ResourceProfile = NATIVE, address=None,
                   tl_graph: Optional[LayerGraph] = None, seed: int = 0, warmup: int = 2,
                   timeout: float = DEFAULT_TIMEOUT) -> ExperimentResult:
    """Send ``n_requests`` sequential inferences for one (split, variant) plan.

    With no ``address`` a private edge server is started in-process for the run.
    """
    if n_requests < 30:
        raise ValueError(f"n_requests must be >= 30, got {n_requests}")
    plan = device_plan(graph, split_index, tl, tl_graph)
    server = None
    if address is None and not plan.local_only:
        tl_graphs = {split_index: tl_graph} if tl_graph is not None else None
        server = EdgeServer(build_registry(graph, tl_graphs), edge=edge).start()
        address = server.address
    try:
        with DeviceClient(plan, address, LinkShaper(net), device, timeout) as client:
            # inputs are built up front so generating them does not disturb the timed loop
            inputs = [random_input(graph, seed + k) for k in range(n_requests)]
            for k in range(warmup):
                client.infer(random_input(graph, seed + n_requests + k))
            reports, outputs = [], []
            for x in inputs:
                out, rep = client.infer(x)
                reports.append(rep)
                outputs.append(out)
    finally:
        if server is not None:
            server.close()
    return ExperimentResult(graph.name, split_index, tl, net, reports, outputs)


def raw_log_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(LatencyReport)]
    w.writerow(["model", "net", "split", "variant", "request"] + names)
    for res in results:
        for k, r in enumerate(res.reports):
            w.writerow([res.model, str(res.net), res.split_index, res.variant, k]
                       + [getattr(r, n) for n in names])
    return buf.getvalue()


def load_raw_log(text: str) -> List[ExperimentResult]:
    """Rebuild results (without outputs) from ``raw_log_csv`` text, in file order."""
    names = [f.name for f in fields(LatencyReport)]
    reader = csv.DictReader(io.StringIO(text))
    want = ["model", "net", "split", "variant", "request"] + names
    if reader.fieldnames != want:
        raise ParseError(f"raw log columns {reader.fieldnames} do not match {want}", 1)
    results: Dict[tuple, ExperimentResult] = {}
    for lineno, row in enumerate(reader, start=2):
        try:
            key = (row["model"], row["net"], int(row["split"]), row["variant"])
            if key[3] not in ("tl", "no-tl"):
                raise ValueError(f"variant {key[3]!r}")
            rep = LatencyReport(*(float(row[n]) for n in names[:-1]), int(row["payload_bytes"]))
        except (TypeError, ValueError) as e:
            raise ParseError(f"bad raw log row: {e}", lineno) from None
        if key not in results:
            results[key] = ExperimentResult(key[0], key[2], key[3] == "tl", parse_profile(key[1]), [], [])
        results[key].reports.append(rep)
    if not results:
        raise ParseError("raw log holds no requests")
    return list(results.values())


SUMMARY_HEADERS = ["split", "variant", "device µs", "TL µs", "serial µs", "comm µs", "edge µs",
                   "median µs", "p95 µs", "planned µs", "Δt µs"]
SUMMARY_CSV = ["split", "variant", "device_us", "tl_us", "serial_us", "comm_us", "edge_us",
               "median_us", "p95_us", "planned_us", "delta_t_us"]


def _summary_row(res: ExperimentResult, planned=None) -> list:
    m = res.component_medians()
    return [res.split_index, res.variant, round(m["device_us"]), round(m["tl_us"]),
            round(m["serialize_us"] + m["deserialize_us"]), round(m["network_us"]),
            round(m["edge_us"]), round(res.median_us), round(res.p95_us),
            "" if planned is None else planned.total_us,
            "" if planned is None or planned.delta_t_us is None else planned.delta_t_us]


def format_summary(results: Sequence[ExperimentResult], planned: Optional[Mapping] = None) -> str:
    """Measured medians in the plan-report layout; ``planned`` maps (split, variant) to CostBreakdown."""
    planned = planned or {}
    rows = [SUMMARY_HEADERS] + [
        [str(v) for v in _summary_row(r, planned.get((r.split_index, r.variant)))] for r in results]
    widths = [max(len(r[i]) for r in rows) for i in range(len(SUMMARY_HEADERS))]
    nets = sorted({str(r.net) for r in results})
    lines = [f"network {', '.join(nets)}  end-to-end includes result return; "
             f"{len(results[0].reports) if results else 0} requests per row"]
    for k, r in enumerate(rows):
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def summary_csv(results: Sequence[ExperimentResult], planned: Optional[Mapping] = None) -> str:
    planned = planned or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "net"] + SUMMARY_CSV)
    for r in results:
        w.writerow([r.model, str(r.net)] + _summary_row(r, planned.get((r.split_index, r.variant))))
    return buf.getvalue()
