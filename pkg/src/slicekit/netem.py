"""In-process emulation of a constrained device-to-edge uplink.

Bandwidth is enforced by pacing fixed-size chunks against a deadline derived
from the cumulative byte count, so sleep overshoot on one chunk is absorbed
by the next instead of accumulating. Latency is a single delay before the
first byte of each message.
"""
from __future__ import annotations

import math
import os
import re
import time
from dataclasses import dataclass

from slicekit.errors import ConnectionClosed, ParseError

ENV_VAR = "SLICEKIT_NET_PROFILE"
DEFAULT_CHUNK = 16 * 1024

# below this much remaining time we spin instead of sleeping
_SPIN_S = 0.001


@dataclass(frozen=True)
class NetworkProfile:
    latency_ms: float
    upload_bandwidth_mbps: float

    def __post_init__(self):
        if not self.latency_ms >= 0:
            raise ValueError(f"latency must be >= 0 ms, got {self.latency_ms}")
        if not self.upload_bandwidth_mbps > 0:
            raise ValueError(f"bandwidth must be > 0 Mbps, got {self.upload_bandwidth_mbps}")

    @property
    def unlimited(self) -> bool:
        return self.latency_ms == 0 and math.isinf(self.upload_bandwidth_mbps)

    @property
    def latency_us(self) -> float:
        return self.latency_ms * 1000.0

    def transfer_us(self, nbytes: int) -> float:
        # Mbps is 10^6 bit/s, i.e. bits per microsecond
        return nbytes * 8 / self.upload_bandwidth_mbps

    def __str__(self):
        if self.unlimited:
            return "unlimited"
        return f"{_num(self.upload_bandwidth_mbps)}mbps/{_num(self.latency_ms)}ms"


UNLIMITED = NetworkProfile(0.0, math.inf)


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


_PROFILE_RE = re.compile(r"^(?P<bw>[^/]*)mbps/(?P<lat>[^/]*)ms$")


def parse_profile(spec: str) -> NetworkProfile:
    """Parse ``"<number>mbps/<number>ms"`` (or ``"unlimited"``)."""
    text = spec.strip().lower()
    if text == "unlimited":
        return UNLIMITED
    m = _PROFILE_RE.match(text)
    if not m:
        raise ParseError(f"network profile {spec!r} is not <number>mbps/<number>ms")
    values = {}
    for key in ("bw", "lat"):
        token = m.group(key)
        try:
            values[key] = float(token)
        except ValueError:
            raise ParseError(f"bad number {token!r} in network profile {spec!r}") from None
        if not math.isfinite(values[key]):
            raise ParseError(f"bad number {token!r} in network profile {spec!r}")
    if values["bw"] <= 0:
        raise ParseError(f"bandwidth {m.group('bw')!r} must be > 0 in {spec!r}")
    if values["lat"] < 0:
        raise ParseError(f"latency {m.group('lat')!r} must be >= 0 in {spec!r}")
    return NetworkProfile(values["lat"], values["bw"])


def profile_from_env(default: str | None = None) -> NetworkProfile | None:
    spec = os.environ.get(ENV_VAR) or default
    return parse_profile(spec) if spec else None


def sleep_until(deadline: float) -> None:
    """Block until ``time.perf_counter() >= deadline`` with sub-millisecond accuracy."""
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        if remaining > 2 * _SPIN_S:
            time.sleep(remaining - _SPIN_S)


@dataclass
class LinkShaper:
    profile: NetworkProfile
    chunk_bytes: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.chunk_bytes < 1:
            raise ValueError("chunk_bytes must be positive")

    def predicted_us(self, nbytes: int) -> float:
        return self.profile.latency_us + self.profile.transfer_us(nbytes)


def shaped_send(conn, data: bytes, shaper: LinkShaper) -> float:
    """Send ``data`` through ``conn`` at the shaper's rate; return elapsed microseconds."""
    t0 = time.perf_counter()
    profile = shaper.profile
    try:
        if profile.unlimited:
            conn.sendall(data)
            return (time.perf_counter() - t0) * 1e6
        start = t0 + profile.latency_ms / 1000.0
        sleep_until(start)
        view = memoryview(data)
        sent = 0
        for pos in range(0, len(view), shaper.chunk_bytes):
            chunk = view[pos:pos + shaper.chunk_bytes]
            sent += len(chunk)
            # a chunk leaves once its last bit would have cleared the link
            sleep_until(start + profile.transfer_us(sent) / 1e6)
            conn.sendall(chunk)
    except (BrokenPipeError, ConnectionResetError) as e:
        raise ConnectionClosed(str(e)) from e
    return (time.perf_counter() - t0) * 1e6
