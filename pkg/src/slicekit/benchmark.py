"""Per-split empirical measurements feeding the latency cost model.

Every top-level unit is timed inside end-to-end passes (median of ``reps``
passes after warm-up) under the device and the edge
:class:`ResourceProfile`; head and tail times for a split are prefix/suffix
sums of those unit medians. The
transfer-layer kernels and wire (de)serialization are timed the same way at
every boundary. Communication time is not measured here: the planner derives
it from a :class:`~slicekit.netem.NetworkProfile`.
"""
from __future__ import annotations

import datetime as _dt
import statistics
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from slicekit import tensor as tc
from slicekit import wire
from slicekit.errors import ClockError, ParseError, VersionMismatch
from slicekit.graph import LayerGraph, enumerate_split_points
from slicekit.netem import sleep_until
from slicekit.tensor import DeviceTL, EdgeTL, Tensor

MIN_REPS = 20
WARMUP = 3
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ResourceProfile:
    """Emulated compute resource: every layer takes ``compute_scale`` x native time."""

    name: str
    compute_scale: float = 1.0

    def __post_init__(self):
        if not self.compute_scale >= 1.0:
            raise ValueError(f"compute_scale must be >= 1.0, got {self.compute_scale}")


NATIVE = ResourceProfile("native", 1.0)


_reference_us: dict = {}


def reference_time_us(layer, params, x: np.ndarray) -> float:
    """Warm back-to-back median of one layer on ``x``, cached per (layer, shape).

    Scaling the live duration of each call would also scale its cache-cold
    noise, which after a busy-wait is several times the warm cost.
    """
    key = (layer, x.shape)
    if key not in _reference_us:
        _reference_us[key] = median_us(lambda: tc.forward_batch(layer, x, params), 9, warmup=2)
    return _reference_us[key]


def run_unit(layer, params, x: np.ndarray, profile: ResourceProfile) -> np.ndarray:
    """Run one layer, then busy-wait ``compute_scale - 1`` times its reference time."""
    y, _ = tc.forward_batch(layer, x, params)
    if profile.compute_scale > 1.0:
        extra = (profile.compute_scale - 1.0) * reference_time_us(layer, params, x)
        sleep_until(time.perf_counter() + extra / 1e6)
    return y


def run_units(graph: LayerGraph, x: np.ndarray, profile: ResourceProfile,
              start: int = 0, stop: Optional[int] = None) -> np.ndarray:
    stop = graph.n if stop is None else stop
    for i in range(start, stop):
        x = run_unit(graph.layers[i], graph.params[i], x, profile)
    return x


def chain_unit_times(graph: LayerGraph, x: np.ndarray, profile: ResourceProfile,
                     reps: int, warmup: int = WARMUP) -> List[float]:
    """Median time of every unit, stamped while the whole graph runs end to end.

    Timing units inside a full pass rather than in isolated loops keeps the
    cache state each layer sees the same as at inference time.
    """
    samples = [[] for _ in range(graph.n)]
    for k in range(warmup + reps):
        a = x
        t = time.perf_counter()
        for i in range(graph.n):
            a = run_unit(graph.layers[i], graph.params[i], a, profile)
            now = time.perf_counter()
            if k >= warmup:
                samples[i].append((now - t) * 1e6)
            t = now
    return [statistics.median(s) for s in samples]


def _check_clock():
    info = time.get_clock_info("perf_counter")
    if not info.monotonic:
        raise ClockError("perf_counter is not monotonic on this platform")


def median_us(fn: Callable[[], object], reps: int, warmup: int = WARMUP) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(samples)


@dataclass(frozen=True)
class BenchmarkRecord:
    split_index: int
    device_head_time_us: float
    edge_tail_time_us: float
    device_tl_time_us: float
    edge_tl_time_us: float
    serialize_time_us: float
    deserialize_time_us: float
    serialize_tl_time_us: float
    deserialize_tl_time_us: float
    payload_bytes_no_tl: int
    payload_bytes_tl: int
    repetitions: int
    timestamp: float

    @property
    def tl_eligible(self) -> bool:
        return self.payload_bytes_tl > 0

    @property
    def transfers(self) -> bool:
        return self.payload_bytes_no_tl > 0

    def validate(self):
        if self.repetitions < MIN_REPS:
            raise ParseError(f"split {self.split_index}: {self.repetitions} repetitions (< {MIN_REPS})")
        for f in fields(self):
            if f.name not in ("split_index", "timestamp") and getattr(self, f.name) < 0:
                raise ParseError(f"split {self.split_index}: negative {f.name}")
        if self.tl_eligible and self.payload_bytes_tl >= self.payload_bytes_no_tl:
            raise ParseError(f"split {self.split_index}: TL payload not smaller than original")
        if not self.tl_eligible and (self.device_tl_time_us or self.edge_tl_time_us
                                     or self.serialize_tl_time_us or self.deserialize_tl_time_us):
            raise ParseError(f"split {self.split_index}: TL timings on an ineligible split")
        return self

    def non_timing(self) -> tuple:
        return (self.split_index, self.payload_bytes_no_tl, self.payload_bytes_tl, self.repetitions)


COLUMNS = [f.name for f in fields(BenchmarkRecord)]


def measure_serialization(t: Tensor, reps: int = MIN_REPS, model_id: str = "",
                          split_index: int = 0):
    """Median encode and decode time of ``t`` as an InferRequest frame.

    Returns ``(serialize_time_us, deserialize_time_us, bytes)``.
    """
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}")
    enc = lambda: wire.encode(wire.FrameType.INFER_REQUEST, t, model_id=model_id,
                              split_index=split_index)
    frame = enc()
    ser = median_us(enc, reps)
    de = median_us(lambda: wire.decode(frame), reps)
    return ser, de, len(frame)


def benchmark_model(graph: LayerGraph, device: ResourceProfile, edge: ResourceProfile,
                    input: Tensor, reps: int = MIN_REPS) -> List[BenchmarkRecord]:
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}")
    _check_clock()
    x = input.data[None]
    acts = [x]
    for i in range(graph.n):
        acts.append(graph.run(acts[-1], i, i + 1))

    dev_unit = chain_unit_times(graph, x, device, reps)
    edge_unit = chain_unit_times(graph, x, edge, reps)

    records = []
    for sp in enumerate_split_points(graph):
        i = sp.index
        head_us = sum(dev_unit[:i + 1])
        tail_us = sum(edge_unit[i + 1:])
        tl = dict(device_tl_time_us=0.0, edge_tl_time_us=0.0,
                  serialize_tl_time_us=0.0, deserialize_tl_time_us=0.0, payload_bytes_tl=0)
        if sp.kind == "local-only":
            ser = de = 0.0
            nbytes = 0
        else:
            out = Tensor(acts[i + 1][0])
            ser, de, nbytes = measure_serialization(out, reps, wire.model_id_for(graph.name, i), i)
            if sp.tl_eligible:
                a = acts[i + 1]
                pooled = tc.forward_batch(DeviceTL(), a)[0]
                s_tl, d_tl, b_tl = measure_serialization(
                    Tensor(pooled[0]), reps, wire.model_id_for(graph.name, i, tl=True), i)
                tl = dict(
                    device_tl_time_us=median_us(lambda: run_unit(DeviceTL(), None, a, device), reps),
                    edge_tl_time_us=median_us(lambda: run_unit(EdgeTL(), None, pooled, edge), reps),
                    serialize_tl_time_us=s_tl, deserialize_tl_time_us=d_tl, payload_bytes_tl=b_tl)
        records.append(BenchmarkRecord(
            split_index=i, device_head_time_us=head_us, edge_tail_time_us=tail_us,
            serialize_time_us=ser, deserialize_time_us=de, payload_bytes_no_tl=nbytes,
            repetitions=reps, timestamp=time.monotonic(), **tl))
    return records


def compare_runs(a: Sequence[BenchmarkRecord], b: Sequence[BenchmarkRecord], tol: float = 0.25,
                 floor_us: float = 50.0) -> List[str]:
    """Timing fields that moved by more than ``tol`` between two runs.

    Values under ``floor_us`` in both runs are ignored: a few microseconds of
    jitter on a near-zero median is not instability.
    """
    out = []
    timing = [c for c in COLUMNS if c.endswith("_us")]
    for ra, rb in zip(a, b):
        for name in timing:
            va, vb = getattr(ra, name), getattr(rb, name)
            if max(va, vb) < floor_us:
                continue
            if abs(va - vb) > tol * max(va, vb):
                out.append(f"split {ra.split_index} {name}: {va:.1f} vs {vb:.1f}")
    return out


# ---------------------------------------------------------------------------
# Record files
# ---------------------------------------------------------------------------

def save_records(path, records: Sequence[BenchmarkRecord], model_name: str,
                 device: ResourceProfile = NATIVE, edge: ResourceProfile = NATIVE) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    created = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    lines = [
        f"# slicekit-bench {FORMAT_VERSION}",
        f"# model {model_name}",
        f"# device {device.name} {device.compute_scale!r}",
        f"# edge {edge.name} {edge.compute_scale!r}",
        f"# created {created}",
        "# columns " + " ".join(COLUMNS),
    ]
    for r in records:
        lines.append(" ".join(repr(getattr(r, c)) for c in COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_bench(path):
    """Return ``(meta, records)``; ``meta`` holds model name and resource profiles."""
    meta = {}
    records = []
    version_seen = False
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tok = line[1:].split()
            if not tok:
                continue
            if tok[0] == "slicekit-bench":
                if len(tok) != 2 or tok[1] != str(FORMAT_VERSION):
                    raise VersionMismatch(f"benchmark format {' '.join(tok[1:])!r}, expected {FORMAT_VERSION}", lineno)
                version_seen = True
            elif tok[0] == "model" and len(tok) == 2:
                meta["model"] = tok[1]
            elif tok[0] in ("device", "edge") and len(tok) == 3:
                try:
                    meta[tok[0]] = ResourceProfile(tok[1], float(tok[2]))
                except ValueError as e:
                    raise ParseError(str(e), lineno) from None
            elif tok[0] == "columns" and tok[1:] != COLUMNS:
                raise VersionMismatch("unexpected column layout", lineno)
            continue
        if not version_seen:
            raise VersionMismatch("missing '# slicekit-bench <version>' header", lineno)
        tok = line.split()
        if len(tok) != len(COLUMNS):
            raise ParseError(f"expected {len(COLUMNS)} columns, got {len(tok)}", lineno)
        try:
            values = {}
            for name, t in zip(COLUMNS, tok):
                ftype = BenchmarkRecord.__dataclass_fields__[name].type
                values[name] = int(t) if ftype == "int" else float(t)
        except ValueError as e:
            raise ParseError(f"bad value: {e}", lineno) from None
        try:
            records.append(BenchmarkRecord(**values).validate())
        except ParseError as e:
            raise ParseError(e.reason, lineno) from None
    if not version_seen:
        raise VersionMismatch("missing '# slicekit-bench <version>' header")
    if not records:
        raise ParseError("benchmark file holds no records")
    if "model" not in meta:
        raise ParseError("benchmark file does not name its model")
    return meta, records


def load_records(path) -> List[BenchmarkRecord]:
    return load_bench(path)[1]
