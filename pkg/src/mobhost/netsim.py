"""Deterministic discrete-event simulation of wireless and wired links.

Time is virtual and exact: instants are :class:`fractions.Fraction`
milliseconds, so end-to-end delay is the exact sum of per-hop
``latency + size / bandwidth``. Events run in (instant, insertion order).
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable

import networkx as nx

from .errors import NoRoute

Instant = Fraction


def _exact(x: float | int | Fraction) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class LinkProfile:
    kind: str
    latency_ms: float
    bandwidth: float  # bytes per second; math.inf for an ideal link
    loss_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("wireless", "wired"):
            raise ValueError(f"link kind must be wireless or wired, not {self.kind!r}")
        if self.latency_ms < 0 or not self.bandwidth > 0 or not 0 <= self.loss_rate < 1:
            raise ValueError("need latency >= 0, bandwidth > 0 and 0 <= loss < 1")

    @classmethod
    def wireless(cls, latency_ms: float = 120, bandwidth: float = 50_000, loss_rate: float = 0.0) -> LinkProfile:
        return cls("wireless", latency_ms, bandwidth, loss_rate)

    @classmethod
    def wired(cls, latency_ms: float = 10, bandwidth: float = 10_000_000, loss_rate: float = 0.0) -> LinkProfile:
        return cls("wired", latency_ms, bandwidth, loss_rate)

    def delay(self, size: int) -> Fraction:
        tx = Fraction(0) if math.isinf(self.bandwidth) else Fraction(size * 1000) / _exact(self.bandwidth)
        return _exact(self.latency_ms) + tx


class Network:
    """Undirected graph of named nodes; routes are fewest-hop paths."""

    def __init__(self) -> None:
        self.graph = nx.Graph()

    def add_node(self, name: str) -> None:
        self.graph.add_node(name)

    def link(self, a: str, b: str, profile: LinkProfile) -> None:
        self.graph.add_edge(a, b, profile=profile)

    def route(self, src: str, dst: str) -> list[tuple[str, str, LinkProfile]]:
        if src == dst:
            return []
        try:
            path = nx.shortest_path(self.graph, src, dst)
        except (nx.NetworkXNoPath, nx.NodeNotFound):
            raise NoRoute(f"no route from {src} to {dst}") from None
        return [(a, b, self.graph.edges[a, b]["profile"]) for a, b in zip(path, path[1:])]

    @property
    def nodes(self) -> list[str]:
        return list(self.graph.nodes)

    @classmethod
    def p2p(cls, nodes: Iterable[str], profile: LinkProfile | None = None) -> Network:
        """Direct wireless link between every pair of nodes."""
        net = cls()
        nodes = list(nodes)
        for n in nodes:
            net.add_node(n)
        for a, b in itertools.combinations(nodes, 2):
            net.link(a, b, profile or LinkProfile.wireless())
        return net


@dataclass(frozen=True)
class SimMessage:
    id: str
    src: str
    dst: str
    data: bytes
    sent_at: Fraction
    reply_to: str | None = None
    wireless_hops: int = 0
    attempt: int = 0

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class TraceEvent:
    instant: Fraction
    src: str
    dst: str
    kind: str
    message_id: str
    size: int
    wireless_hops: int

    def line(self) -> str:
        return f"{format_ms(self.instant)} {self.src} {self.dst} {self.kind} {self.message_id} {self.size} {self.wireless_hops}"


def format_ms(t: Fraction) -> str:
    # exact to the microsecond; finer remainders are rounded half-even
    return f"{round(t * 1000) / 1000:.3f}"


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [e.line() for e in self.events]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class RetransmitPolicy:
    timeout_ms: float = 1000
    max_retries: int = 3


Handler = Callable[[SimMessage], None]


class Simulator:
    def __init__(
        self,
        network: Network,
        seed: int = 0,
        retransmit: RetransmitPolicy | None = None,
    ) -> None:
        self.network = network
        self.rng = random.Random(seed)
        self.retransmit = retransmit
        self.on_retransmit: list[Callable[[SimMessage], None]] = []
        self.trace = Trace()
        self._now = Fraction(0)
        self._queue: list[tuple[Fraction, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._ids = itertools.count(1)
        self._handlers: dict[str, Handler] = {}

    @property
    def now(self) -> Fraction:
        return self._now

    def attach(self, node: str, handler: Handler) -> None:
        if node not in self.network.graph:
            raise NoRoute(f"unknown node {node}")
        self._handlers[node] = handler

    def call_at(self, at: float | Fraction, fn: Callable[[], None]) -> None:
        at = _exact(at)
        if at < self._now:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._queue, (at, next(self._seq), fn))

    def note(self, actor: str, kind: str, message_id: str = "-", size: int = 0, hops: int = 0) -> None:
        """Record an application-level event at the current instant."""
        self.trace.events.append(TraceEvent(self._now, actor, "-", kind, message_id, size, hops))

    def send(
        self,
        src: str,
        dst: str,
        data: bytes,
        at: float | Fraction | None = None,
        reply_to: str | None = None,
    ) -> str:
        at = self._now if at is None else _exact(at)
        if at < self._now:
            raise ValueError("cannot send in the past")
        route = self.network.route(src, dst)
        msg = SimMessage(f"m{next(self._ids):06d}", src, dst, bytes(data), at, reply_to)
        self._transmit(msg, route)
        return msg.id

    def _transmit(self, msg: SimMessage, route: list[tuple[str, str, LinkProfile]]) -> None:
        hops = sum(p.kind == "wireless" for _, _, p in route)
        kind = "send" if msg.attempt == 0 else "retransmit"
        self.trace.events.append(TraceEvent(msg.sent_at, msg.src, msg.dst, kind, msg.id, msg.size, hops))
        t = msg.sent_at
        for a, b, profile in route:
            t += profile.delay(msg.size)
            if profile.loss_rate and self.rng.random() < profile.loss_rate:
                self.call_at(t, lambda a=a, b=b, t=t: self._drop(msg, route, a, b))
                return
        delivered = SimMessage(msg.id, msg.src, msg.dst, msg.data, msg.sent_at, msg.reply_to, hops, msg.attempt)
        self.call_at(t, lambda: self._deliver(delivered))

    def _drop(self, msg: SimMessage, route, a: str, b: str) -> None:
        self.trace.events.append(TraceEvent(self._now, a, b, "drop", msg.id, msg.size, 0))
        rp = self.retransmit
        if rp is None or msg.attempt >= rp.max_retries:
            return
        again = SimMessage(
            msg.id, msg.src, msg.dst, msg.data, msg.sent_at + _exact(rp.timeout_ms), msg.reply_to, 0, msg.attempt + 1
        )

        def fire() -> None:
            for hook in self.on_retransmit:
                hook(again)
            self._transmit(again, route)

        self.call_at(max(again.sent_at, self._now), fire)

    def _deliver(self, msg: SimMessage) -> None:
        self.trace.events.append(
            TraceEvent(self._now, msg.src, msg.dst, "deliver", msg.id, msg.size, msg.wireless_hops)
        )
        handler = self._handlers.get(msg.dst)
        if handler is not None:
            handler(msg)

    def run_until_idle(self, limit: int = 10_000_000) -> Trace:
        n = 0
        while self._queue:
            at, _, fn = heapq.heappop(self._queue)
            self._now = at
            fn()
            n += 1
            if n >= limit:
                raise RuntimeError("event limit reached")
        return self.trace
