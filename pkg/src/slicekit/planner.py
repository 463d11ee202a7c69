"""Rank split points by predicted end-to-end latency, with and without the TL.

All costs are integer microseconds. Each term is rounded on its own and the
total is the exact sum of the rounded terms, so a report always adds up.
Bandwidth is decimal: 1 Mbps moves one bit per microsecond.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import List, Optional, Sequence

from slicekit.benchmark import BenchmarkRecord
from slicekit.errors import InvalidSplit, NoFeasiblePlan, NotTlEligible, SplitMismatch
from slicekit.netem import NetworkProfile

__all__ = [
    "NetworkProfile", "Variant", "CostBreakdown", "Constraints", "RankedPlan", "SweepRow",
    "cost_tl", "cost_no_tl", "delta_t", "rank", "sweep", "format_report", "plan_csv",
    "sweep_csv",
]


class Variant(str, enum.Enum):
    TL = "tl"
    NO_TL = "no-tl"
    BOTH = "both"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class CostBreakdown:
    split_index: int
    variant: Variant
    device_compute_us: int
    edge_compute_us: int
    e_tl_us: int
    serial_us: int
    comm_us: int
    total_us: int
    delta_t_us: Optional[int] = None

    @property
    def s_tl_us(self) -> int:
        self._need(Variant.TL)
        return self.serial_us

    @property
    def c_tl_us(self) -> int:
        self._need(Variant.TL)
        return self.comm_us

    @property
    def s_orig_us(self) -> int:
        self._need(Variant.NO_TL)
        return self.serial_us

    @property
    def c_orig_us(self) -> int:
        self._need(Variant.NO_TL)
        return self.comm_us

    def _need(self, v):
        if self.variant is not v:
            raise AttributeError(f"{v} term on a {self.variant} breakdown")


def _us(x: float) -> int:
    return int(round(x))


def _comm(net: NetworkProfile, nbytes: int) -> int:
    return _us(net.latency_us + net.transfer_us(nbytes))


def cost_no_tl(record: BenchmarkRecord, net: NetworkProfile) -> CostBreakdown:
    dev = _us(record.device_head_time_us)
    edge = _us(record.edge_tail_time_us)
    if record.transfers:
        s = _us(record.serialize_time_us) + _us(record.deserialize_time_us)
        c = _comm(net, record.payload_bytes_no_tl)
    else:
        s = c = 0
    return CostBreakdown(record.split_index, Variant.NO_TL, dev, edge, 0, s, c, dev + edge + s + c)


def cost_tl(record: BenchmarkRecord, net: NetworkProfile) -> CostBreakdown:
    if not record.tl_eligible:
        raise NotTlEligible(f"split {record.split_index} has no transfer-layer measurements")
    dev = _us(record.device_head_time_us)
    edge = _us(record.edge_tail_time_us)
    e = _us(record.device_tl_time_us) + _us(record.edge_tl_time_us)
    s = _us(record.serialize_tl_time_us) + _us(record.deserialize_tl_time_us)
    c = _comm(net, record.payload_bytes_tl)
    tl = CostBreakdown(record.split_index, Variant.TL, dev, edge, e, s, c, dev + edge + e + s + c)
    return _with_delta(tl, cost_no_tl(record, net))


def delta_t(tl: CostBreakdown, no_tl: CostBreakdown) -> int:
    """Benefit of the TL at one split: positive means the TL path is faster."""
    if tl.split_index != no_tl.split_index:
        raise SplitMismatch(f"TL split {tl.split_index} vs no-TL split {no_tl.split_index}")
    return (no_tl.s_orig_us + no_tl.c_orig_us) - (tl.e_tl_us + tl.s_tl_us + tl.c_tl_us)


def _with_delta(tl: CostBreakdown, no_tl: CostBreakdown) -> CostBreakdown:
    return CostBreakdown(**{**tl.__dict__, "delta_t_us": delta_t(tl, no_tl)})


@dataclass(frozen=True)
class Constraints:
    min_split_index: Optional[int] = None
    max_total_latency_us: Optional[int] = None
    variant: Variant = Variant.BOTH

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))

    def admits(self, c: CostBreakdown) -> bool:
        if self.min_split_index is not None and c.split_index < self.min_split_index:
            return False
        if self.max_total_latency_us is not None and c.total_us > self.max_total_latency_us:
            return False
        return True


def _sort_key(c: CostBreakdown):
    # later splits leak less of the input; at equal cost prefer the plain path
    return (c.total_us, -c.split_index, c.variant is Variant.TL)


@dataclass(frozen=True)
class RankedPlan:
    entries: tuple
    net: NetworkProfile
    source: str = ""

    @property
    def chosen(self) -> CostBreakdown:
        return self.entries[0]

    def best(self, variant: Variant) -> Optional[CostBreakdown]:
        return next((e for e in self.entries if e.variant is Variant(variant)), None)

    def best_vs_best_us(self) -> Optional[int]:
        """Best no-TL total minus best TL total, each at its own optimal split."""
        tl, no = self.best(Variant.TL), self.best(Variant.NO_TL)
        if tl is None or no is None:
            return None
        return no.total_us - tl.total_us


def candidates(records: Sequence[BenchmarkRecord], net: NetworkProfile,
               variant: Variant = Variant.BOTH) -> List[CostBreakdown]:
    variant = Variant(variant)
    out = []
    for r in records:
        if variant is not Variant.TL:
            out.append(cost_no_tl(r, net))
        if variant is not Variant.NO_TL and r.tl_eligible:
            out.append(cost_tl(r, net))
    return out


def rank(records: Sequence[BenchmarkRecord], net: NetworkProfile,
         constraints: Constraints = Constraints(), source: str = "") -> RankedPlan:
    if not records:
        raise NoFeasiblePlan("no benchmark records to rank")
    hi = max(r.split_index for r in records)
    m = constraints.min_split_index
    if m is not None and not -1 <= m <= hi:
        raise InvalidSplit(f"min split {m} outside -1..{hi}")
    kept = [c for c in candidates(records, net, constraints.variant) if constraints.admits(c)]
    if not kept:
        raise NoFeasiblePlan(
            f"no {constraints.variant} candidate satisfies min_split={m}, "
            f"max_total={constraints.max_total_latency_us} under {net}")
    return RankedPlan(tuple(sorted(kept, key=_sort_key)), net, source)


@dataclass(frozen=True)
class SweepRow:
    net: NetworkProfile
    chosen: CostBreakdown

    @property
    def split_index(self) -> int:
        return self.chosen.split_index

    @property
    def total_us(self) -> int:
        return self.chosen.total_us


def sweep(records: Sequence[BenchmarkRecord], net_grid: Sequence[NetworkProfile],
          constraints: Constraints = Constraints()) -> List[SweepRow]:
    if not net_grid:
        raise ValueError("network grid is empty")
    return [SweepRow(net, rank(records, net, constraints).chosen) for net in net_grid]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

HEADERS = ["split", "variant", "device µs", "TL µs", "serial µs", "comm µs", "edge µs",
           "total µs", "Δt µs"]
CSV_HEADERS = ["split", "variant", "device_us", "tl_us", "serial_us", "comm_us", "edge_us",
               "total_us", "delta_t_us"]


def _row(c: CostBreakdown) -> list:
    return [c.split_index, str(c.variant), c.device_compute_us, c.e_tl_us, c.serial_us,
            c.comm_us, c.edge_compute_us, c.total_us, "" if c.delta_t_us is None else c.delta_t_us]


def format_report(plan: RankedPlan) -> str:
    rows = [HEADERS] + [[str(v) for v in _row(c)] for c in plan.entries]
    widths = [max(len(r[i]) for r in rows) for i in range(len(HEADERS))]
    lines = [f"network {plan.net}" + (f"  benchmark {plan.source}" if plan.source else "")]
    for k, r in enumerate(rows):
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    c = plan.chosen
    lines.append(f"chosen: split {c.split_index} ({c.variant}), {c.total_us} µs")
    bvb = plan.best_vs_best_us()
    if bvb is not None:
        lines.append(f"best no-TL minus best TL: {bvb} µs")
    return "\n".join(lines) + "\n"


def plan_csv(plan: RankedPlan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["net"] + CSV_HEADERS)
    for c in plan.entries:
        w.writerow([str(plan.net)] + _row(c))
    return buf.getvalue()


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["latency_ms", "bandwidth_mbps"] + CSV_HEADERS)
    for r in rows:
        w.writerow([r.net.latency_ms, r.net.upload_bandwidth_mbps] + _row(r.chosen))
    return buf.getvalue()
