"""Host processing-time benchmark and its shape check.

Each repetition builds a fresh protected Echo request outside the timed
region, then times one in-process ``MobileHost.dispatch`` (unprotect,
handler, protect of the response). Nothing crosses a socket, so
transmission time is excluded by construction.

Absolute numbers depend on the machine; only the growth with message size
is meaningful across machines.
"""

from __future__ import annotations

import csv
import gc
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .client import Client
from .cryptokit import CryptoSuite, Identity, TrustStore
from .errors import HostUnavailable, IncompleteMatrix, MobhostError
from .host import ENDPOINT, MobileHost, TransportRequest, echo_service
from .topologies import _needed_algs

CSV_HEADER = ("suite", "size_bytes", "reps", "median_ms", "p10_ms", "p90_ms")
DEFAULT_SIZES = tuple(k * 1024 for k in range(1, 11))
DEFAULT_SUITES = tuple(
    CryptoSuite(sym, "RSA15-1024", "RSA-SHA1")
    for sym in ("TRIPLEDES-CBC", "AES128-CBC", "AES192-CBC", "AES256-CBC")
)
# reference point from a 2006-era handset; metadata, never asserted
REFERENCE_ANCHOR = {"suite": "AES256-CBC/RSA15-1024/RSA-SHA1", "size_bytes": 5 * 1024, "median_ms": 3000.0}


@dataclass(frozen=True)
class BenchPoint:
    suite: str
    size_bytes: int
    reps: int
    median_ms: float
    p10_ms: float
    p90_ms: float

    @classmethod
    def from_samples(cls, suite: str, size: int, samples: Sequence[float]) -> BenchPoint:
        if len(samples) < 2:
            raise ValueError("need at least two samples")
        q = statistics.quantiles(samples, n=10, method="inclusive")
        return cls(suite, size, len(samples), statistics.median(samples), q[0], q[-1])

    def row(self) -> list[str]:
        return [
            self.suite,
            str(self.size_bytes),
            str(self.reps),
            f"{self.median_ms:.6f}",
            f"{self.p10_ms:.6f}",
            f"{self.p90_ms:.6f}",
        ]


class _Loopback:
    def __init__(self, suite: CryptoSuite) -> None:
        algs = _needed_algs(suite)
        self.host_id = Identity.generate("bench-host", None, algs)
        self.client_id = Identity.generate("bench-client", None, algs)
        trust = TrustStore()
        trust.add_identity(self.host_id, "host")
        trust.add_identity(self.client_id, "client")
        self.host = MobileHost(self.host_id, trust)
        self.host.register_service(echo_service())
        self.client = Client(self.client_id, trust, suite)
        self.peer = self.host_id.signing_key(suite.sig).key_id

    def sample(self, payload: bytes) -> float:
        req = TransportRequest(ENDPOINT, self.client.request(self.peer, "Echo", "echo", payload))
        t = time.perf_counter()
        resp = self.host.dispatch(req)
        elapsed = (time.perf_counter() - t) * 1000
        if resp.status != 200:
            raise HostUnavailable(f"loopback host answered {resp.status}")
        return elapsed


def measure(suite: CryptoSuite, size: int, reps: int = 30, warmup: int = 5) -> BenchPoint:
    return run_matrix([size], [suite], reps, warmup)[0]


def run_matrix(
    sizes: Iterable[int] = DEFAULT_SIZES,
    suites: Iterable[CryptoSuite] = DEFAULT_SUITES,
    reps: int = 30,
    warmup: int = 5,
    csv_path: str | Path | None = None,
) -> list[BenchPoint]:
    """Measure every (suite, size) cell, interleaved round by round.

    One round takes one sample from each cell, starting at a rotating
    offset, so slow drift in machine speed spreads evenly over the matrix
    instead of biasing whole suites.
    """
    sizes = list(sizes)
    suites = list(suites)
    try:
        loops = {s.id: _Loopback(s) for s in suites}
    except MobhostError as exc:
        raise HostUnavailable(f"cannot start loopback host: {exc}") from exc
    cells = [(s.id, size, bytes(i % 251 for i in range(size))) for s in suites for size in sizes]
    samples: dict[tuple[str, int], list[float]] = {(sid, size): [] for sid, size, _ in cells}
    gc_was = gc.isenabled()
    try:
        for rnd in range(warmup + reps):
            gc.collect()
            gc.disable()
            k = rnd % len(cells)
            for sid, size, payload in cells[k:] + cells[:k]:
                t = loops[sid].sample(payload)
                if rnd >= warmup:
                    samples[(sid, size)].append(t)
            gc.enable()
    finally:
        if gc_was:
            gc.enable()
        else:
            gc.disable()
    points = [BenchPoint.from_samples(sid, size, samples[(sid, size)]) for sid, size, _ in cells]
    if csv_path is not None:
        append_csv(csv_path, points)
    return points


def append_csv(path: str | Path, points: Iterable[BenchPoint]) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(CSV_HEADER)
        for p in points:
            w.writerow(p.row())


def read_csv(path: str | Path) -> list[BenchPoint]:
    """All rows; a later row for the same (suite, size) replaces earlier ones."""
    latest: dict[tuple[str, int], BenchPoint] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for r in reader:
            p = BenchPoint(
                r["suite"],
                int(r["size_bytes"]),
                int(r["reps"]),
                float(r["median_ms"]),
                float(r["p10_ms"]),
                float(r["p90_ms"]),
            )
            latest[(p.suite, p.size_bytes)] = p
    return list(latest.values())


@dataclass(frozen=True)
class Dip:
    suite: str
    from_size: int
    to_size: int
    from_ms: float
    to_ms: float

    @property
    def drop(self) -> float:
        return 1 - self.to_ms / self.from_ms


@dataclass
class ShapeReport:
    tolerance: float
    sizes: list[int]
    suites: list[str]
    dips: list[Dip] = field(default_factory=list)
    ordering: dict[int, list[str]] = field(default_factory=dict)
    growth: dict[str, float] = field(default_factory=dict)  # last/first median

    @property
    def ok(self) -> bool:
        return not self.dips

    def text(self) -> str:
        lines = [f"shape {'PASS' if self.ok else 'FAIL'} tolerance={self.tolerance:.2f}"]
        for s in self.suites:
            lines.append(f"suite {s} growth={self.growth[s]:.3f}")
        for d in self.dips:
            lines.append(
                f"dip {d.suite} {d.from_size}->{d.to_size} {d.from_ms:.3f}->{d.to_ms:.3f} ms drop={d.drop:.1%}"
            )
        for size in self.sizes:
            lines.append(f"order {size} " + " < ".join(self.ordering[size]))
        return "\n".join(lines) + "\n"


def check_shape(points: Iterable[BenchPoint], tolerance: float = 0.15) -> ShapeReport:
    by_suite: dict[str, dict[int, BenchPoint]] = {}
    for p in points:
        by_suite.setdefault(p.suite, {})[p.size_bytes] = p
    if not by_suite:
        raise IncompleteMatrix("no benchmark points")
    sizes = sorted({size for pts in by_suite.values() for size in pts})
    for suite, pts in by_suite.items():
        missing = [s for s in sizes if s not in pts]
        if missing:
            raise IncompleteMatrix(f"suite {suite} lacks sizes {missing}")
    suites = sorted(by_suite)
    report = ShapeReport(tolerance, sizes, suites)
    for suite in suites:
        meds = [by_suite[suite][s].median_ms for s in sizes]
        for (a, ma), (b, mb) in zip(zip(sizes, meds), zip(sizes[1:], meds[1:])):
            if mb < ma * (1 - tolerance):
                report.dips.append(Dip(suite, a, b, ma, mb))
        report.growth[suite] = meds[-1] / meds[0] if meds[0] > 0 else float("inf")
    for size in sizes:
        report.ordering[size] = sorted(suites, key=lambda s: (by_suite[s][size].median_ms, s))
    return report
