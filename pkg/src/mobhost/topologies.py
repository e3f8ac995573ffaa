"""Deployment options for the guard, as runnable simulations.

* ``Embedded``: the guard lives inside the host.
* ``MiddlewareProxy``: clients talk to a guard node that forwards only
  permitted requests, re-signed with its key; the host accepts only
  guard-signed requests.
* ``TokenAuthority``: clients fetch a signed assertion from an authority
  node, then attach it to requests; the host validates it.
* ``DelegatedAuthorization``: the host receives every request and asks a
  guard node for each decision.

Actors are event-driven state machines on a :class:`~mobhost.netsim.Simulator`.
Every actor owns a seeded RNG and reads time from the simulator, so a
scenario replayed with the same seed yields byte-identical traces.
"""

from __future__ import annotations

import enum
import functools
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import yaml

from . import sbac
from .authz import AuthzAssertion
from .client import Client, Result
from .cryptokit import (
    KEY_WRAP,
    RECOMMENDED_SUITE,
    SIGNATURE,
    CryptoSuite,
    Identity,
    TrustStore,
    load_keypairs,
)
from .errors import MobhostError, NoRoute, ScenarioConfigError
from .guard import AuditLog, Guard, StaticRetrievers, clock_context
from .host import (
    DelegateToGuard,
    EmbeddedGuard,
    MobileHost,
    Pending,
    RequireAssertion,
    ServiceRegistration,
    VerifyGuardSignature,
    echo_service,
    location_snapshot_service,
)
from .middleware import AuthorityNode, Forward, GuardNode, authority_request
from .netsim import LinkProfile, Network, RetransmitPolicy, SimMessage, Simulator
from .sbac import Atom, Effect
from .timeutil import parse_instant
from .wssec import DEFAULT_FRESHNESS, FreshnessPolicy

HOST, GUARD, AUTHORITY = "host", "guard", "authority"
DEFAULT_EPOCH = parse_instant("2026-01-01T00:00:00.000Z")


class Topology(str, enum.Enum):
    EMBEDDED = "Embedded"
    MIDDLEWARE_PROXY = "MiddlewareProxy"
    TOKEN_AUTHORITY = "TokenAuthority"
    DELEGATED_AUTHORIZATION = "DelegatedAuthorization"

    def __str__(self) -> str:
        return self.value

    @property
    def infrastructure(self) -> tuple[str, ...]:
        return {
            Topology.EMBEDDED: (HOST,),
            Topology.MIDDLEWARE_PROXY: (HOST, GUARD),
            Topology.TOKEN_AUTHORITY: (HOST, AUTHORITY),
            Topology.DELEGATED_AUTHORIZATION: (HOST, GUARD),
        }[self]


@dataclass(frozen=True)
class Invocation:
    client: str
    service: str
    operation: str
    payload: bytes = b""
    at_ms: int = 0
    bypass: bool = False  # go straight to the host, skipping guard and authority


@dataclass(frozen=True)
class Outcome:
    index: int
    client: str
    subject: str
    service: str
    operation: str
    effect: Effect
    fault: str | None
    cause: str
    payload: bytes
    request_hops: int | None  # wireless hops from client send to host arrival
    request_latency: Fraction | None
    authz_hops: int = 0  # token fetch or host-guard exchange

    def line(self) -> str:
        lat = "-" if self.request_latency is None else f"{float(self.request_latency):.3f}"
        hops = "-" if self.request_hops is None else str(self.request_hops)
        return (
            f"{self.index} {self.client} {self.service}.{self.operation} {self.effect.value} "
            f"{self.fault or 'ok'} hops={hops} authz_hops={self.authz_hops} latency={lat}"
        )


def _needed_algs(suite: CryptoSuite) -> tuple[str, ...]:
    algs = [f"RSA-{KEY_WRAP[suite.wrap]}"]
    if SIGNATURE[suite.sig] == "DSA":
        algs.append("DSA-1024")
    return tuple(algs)


@functools.lru_cache(maxsize=256)
def scenario_identity(name: str, seed: int, algs: tuple[str, ...]) -> Identity:
    """Deterministic identity per (actor, seed); cached since keygen is slow."""
    return Identity.generate(name, random.Random(f"key:{seed}:{name}"), algs)


@dataclass
class ScenarioConfig:
    clients: tuple[str, ...] = ("alice", "bob")
    # object id -> policy text / annotation fact text
    policies: dict[str, str] = field(default_factory=dict)
    annotations: dict[str, str] = field(default_factory=dict)
    # client name -> extra descriptor facts (in terms of the name)
    profiles: dict[str, str] = field(default_factory=dict)
    context: str | None = "clock"
    services: tuple[ServiceRegistration, ...] = field(
        default_factory=lambda: (echo_service(), location_snapshot_service())
    )
    suite: CryptoSuite = RECOMMENDED_SUITE
    seed: int = 0
    epoch: int = DEFAULT_EPOCH
    token_validity_seconds: float = 86_400
    replay_cache: bool = False
    link: LinkProfile = field(default_factory=LinkProfile.wireless)
    freshness: FreshnessPolicy = DEFAULT_FRESHNESS
    identities: dict[str, Identity] = field(default_factory=dict)

    def identity(self, name: str) -> Identity:
        if name in self.identities:
            return self.identities[name]
        return scenario_identity(name, self.seed, _needed_algs(self.suite))

    def descriptor(self, name: str) -> list[Atom]:
        """Facts describing every key of client ``name``."""
        extra = sbac.parse_facts(self.profiles.get(name, ""))
        facts = []
        for kid in self.identity(name).key_ids:
            facts.append(Atom("principal", (kid, name)))
        return facts + sorted(extra, key=str)

    def retrievers(self, clock) -> StaticRetrievers:
        sr = StaticRetrievers()
        for obj, text in sorted(self.policies.items()):
            sr.add_policy(obj, sbac.parse_policy(text, name=obj))
        for obj, text in sorted(self.annotations.items()):
            sr.annotate(obj, sbac.parse_facts(text))
        for name in self.clients:
            for kid in self.identity(name).key_ids:
                sr.describe(kid, self.descriptor(name))
        if self.context == "clock":
            sr.context = clock_context(clock)
        elif self.context:
            fixed = sbac.parse_facts(self.context)
            sr.context = lambda: fixed
        return sr

    def network(self, topology: Topology) -> Network:
        return Network.p2p([*self.clients, *topology.infrastructure], self.link)


@dataclass
class ScenarioTrace:
    topology: Topology
    trace_lines: list[str]
    outcomes: list[Outcome]
    audits: dict[str, AuditLog]
    executions: list[tuple[str, str, str]]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.trace_lines)

    def audit_text(self) -> str:
        parts = []
        for actor in sorted(self.audits):
            parts.append(f"# {actor}\n")
            parts.append(self.audits[actor].text())
        return "".join(parts)

    def outcome_text(self) -> str:
        return "".join(o.line() + "\n" for o in self.outcomes)

    def effects(self) -> list[tuple[int, str, str, str, Effect]]:
        return [(o.index, o.client, o.service, o.operation, o.effect) for o in self.outcomes]


@dataclass
class _Path:
    index: int
    started: Fraction
    hops: int


class _Run:
    """Wiring and event handlers for one scenario execution."""

    def __init__(self, topology: Topology, workload: list[Invocation], sim: Simulator, cfg: ScenarioConfig) -> None:
        self.topology = topology
        self.workload = workload
        self.sim = sim
        self.cfg = cfg
        self.clock = lambda: cfg.epoch + int(sim.now)
        suite = cfg.suite

        self.trust = TrustStore()
        self.ids: dict[str, Identity] = {}
        for name in cfg.clients:
            self.ids[name] = cfg.identity(name)
            self.trust.add_identity(self.ids[name], "client")
        for actor in topology.infrastructure:
            self.ids[actor] = cfg.identity(actor)
            role = {HOST: "host", GUARD: "guard", AUTHORITY: "authority"}[actor]
            self.trust.add_identity(self.ids[actor], role)

        def rng(actor: str) -> random.Random:
            return random.Random(f"rng:{cfg.seed}:{actor}")

        self.audits: dict[str, AuditLog] = {HOST: AuditLog()}
        retrievers = cfg.retrievers(self.clock).retrievers()

        def guard_for(actor: str) -> Guard:
            self.audits[actor] = AuditLog()
            return Guard(retrievers, self.clock, self.audits[actor])

        self.key_of = {a: self.ids[a].signing_key(suite.sig).key_id for a in self.ids}
        if topology is Topology.EMBEDDED:
            mode = EmbeddedGuard(guard_for(GUARD))
        elif topology is Topology.MIDDLEWARE_PROXY:
            mode = VerifyGuardSignature()
        elif topology is Topology.TOKEN_AUTHORITY:
            mode = RequireAssertion(replay_cache=cfg.replay_cache)
        else:
            mode = DelegateToGuard(self.key_of[GUARD])
        self.host = MobileHost(
            self.ids[HOST], self.trust, mode, self.clock, rng(HOST), cfg.freshness, audit=self.audits[HOST]
        )
        for reg in cfg.services:
            self.host.register_service(reg)
        self.guard: GuardNode | None = None
        self.authority: AuthorityNode | None = None
        if GUARD in topology.infrastructure:
            self.guard = GuardNode(
                self.ids[GUARD], self.trust, guard_for(GUARD), self.key_of[HOST], self.clock, rng(GUARD), cfg.freshness
            )
        if AUTHORITY in topology.infrastructure:
            self.authority = AuthorityNode(
                self.ids[AUTHORITY],
                self.trust,
                guard_for(AUTHORITY),
                cfg.token_validity_seconds,
                self.clock,
                rng(AUTHORITY),
                cfg.freshness,
            )
        self.clients = {
            n: Client(self.ids[n], self.trust, suite, self.clock, rng(n), cfg.freshness) for n in cfg.clients
        }

        self.paths: dict[str, _Path] = {}  # message id -> request path so far
        self.awaiting: dict[str, tuple[str, int]] = {}  # client message id -> (kind, invocation)
        self.host_queries: dict[str, tuple[Pending, SimMessage]] = {}
        self.forwards: dict[str, tuple[object, SimMessage]] = {}
        self.tokens: dict[tuple[str, str, str], AuthzAssertion] = {}
        self.results: dict[int, Result] = {}
        self.arrivals: dict[int, tuple[int, Fraction]] = {}
        self.authz_hops: dict[int, int] = {}

    # ----- clients -----

    def start(self) -> None:
        for name in self.cfg.clients:
            self.sim.attach(name, lambda m, name=name: self.on_client(name, m))
        self.sim.attach(HOST, self.on_host)
        if self.guard is not None:
            self.sim.attach(GUARD, self.on_guard)
        if self.authority is not None:
            self.sim.attach(AUTHORITY, self.on_authority)
        for i, inv in enumerate(self.workload):
            self.sim.call_at(inv.at_ms, lambda i=i: self.invoke(i))

    def _target(self, inv: Invocation) -> str:
        if self.topology is Topology.MIDDLEWARE_PROXY and not inv.bypass:
            return GUARD
        return HOST

    def invoke(self, i: int) -> None:
        inv = self.workload[i]
        self.sim.note(inv.client, "invoke", f"i{i:04d}")
        if self.topology is Topology.TOKEN_AUTHORITY and not inv.bypass:
            token = self.tokens.get((inv.client, inv.operation, inv.service))
            if token is None or token.expires < self.clock():
                self._fetch_token(i)
                return
            self._send_request(i, (token.to_node(),))
            return
        self._send_request(i)

    def _fetch_token(self, i: int) -> None:
        inv = self.workload[i]
        client = self.clients[inv.client]
        data = client.request(self.key_of[AUTHORITY], "Authority", "issue", authority_request(inv.operation, inv.service))
        mid = self.sim.send(inv.client, AUTHORITY, data)
        self.awaiting[mid] = ("token", i)
        self.sim.note(inv.client, "token-request", mid, len(data))

    def _send_request(self, i: int, headers: tuple = ()) -> None:
        inv = self.workload[i]
        target = self._target(inv)
        data = self.clients[inv.client].request(self.key_of[target], inv.service, inv.operation, inv.payload, headers)
        mid = self.sim.send(inv.client, target, data)
        self.awaiting[mid] = ("request", i)
        self.paths[mid] = _Path(i, self.sim.now, 0)

    def on_client(self, name: str, m: SimMessage) -> None:
        entry = self.awaiting.pop(m.reply_to or "", None)
        if entry is None:
            return
        kind, i = entry
        inv = self.workload[i]
        client = self.clients[name]
        if kind == "token":
            self.authz_hops[i] = self.authz_hops.get(i, 0) + m.wireless_hops + self._sent_hops(m.reply_to)
            res = client.read(m.data, expect_from=self.key_of[AUTHORITY])
            if not res.ok:
                # refused: the host is never contacted
                self.results[i] = res
                return
            try:
                token = AuthzAssertion.from_bytes(res.payload)
            except MobhostError as exc:
                self.results[i] = Result(False, fault="malformed", cause=str(exc))
                return
            self.tokens[(inv.client, inv.operation, inv.service)] = token
            self._send_request(i, (token.to_node(),))
            return
        self.results[i] = client.read(m.data, expect_from=self.key_of[self._target(inv)])

    def _sent_hops(self, mid: str | None) -> int:
        for e in self.sim.trace.events:
            if e.message_id == mid and e.kind in ("send", "retransmit"):
                return e.wireless_hops
        return 0

    # ----- host -----

    def on_host(self, m: SimMessage) -> None:
        if m.reply_to in self.host_queries:
            pending, origin = self.host_queries.pop(m.reply_to)
            i = self.paths[origin.id].index if origin.id in self.paths else None
            if i is not None:
                self.authz_hops[i] = self.authz_hops.get(i, 0) + m.wireless_hops + self._sent_hops(m.reply_to)
            reply = self.host.resume(pending, m.data)
            self.sim.send(HOST, origin.src, reply.body, reply_to=origin.id)
            return
        path = self.paths.get(m.id)
        if path is not None:
            self.arrivals[path.index] = (path.hops + m.wireless_hops, self.sim.now - path.started)
        out = self.host.receive(m.data)
        if isinstance(out, Pending):
            try:
                qid = self.sim.send(HOST, GUARD, out.message)
            except NoRoute:
                reply = self.host.resume(out, b"")  # no decision: fail safe
                self.sim.note(HOST, "authz-unreachable", m.id)
                self.sim.send(HOST, m.src, reply.body, reply_to=m.id)
                return
            self.sim.note(HOST, "authz-query", qid, len(out.message))
            self.host_queries[qid] = (out, m)
            return
        self.sim.send(HOST, m.src, out.body, reply_to=m.id)

    # ----- guard and authority -----

    def on_guard(self, m: SimMessage) -> None:
        assert self.guard is not None
        if m.reply_to in self.forwards:
            ctx, origin = self.forwards.pop(m.reply_to)
            self.sim.send(GUARD, origin.src, self.guard.on_host_response(ctx, m.data), reply_to=origin.id)
            return
        out = self.guard.on_request(m.data)
        if isinstance(out, Forward):
            fid = self.sim.send(GUARD, HOST, out.data)
            self.forwards[fid] = (out.ctx, m)
            path = self.paths.get(m.id)
            if path is not None:
                self.paths[fid] = _Path(path.index, path.started, path.hops + m.wireless_hops)
            return
        self.sim.send(GUARD, m.src, out, reply_to=m.id)

    def on_authority(self, m: SimMessage) -> None:
        assert self.authority is not None
        self.sim.send(AUTHORITY, m.src, self.authority.handle(m.data), reply_to=m.id)

    # ----- results -----

    def outcomes(self) -> list[Outcome]:
        out = []
        for i, inv in enumerate(self.workload):
            res = self.results.get(i) or Result(False, fault="no-response", cause="no response before idle")
            hops, latency = self.arrivals.get(i, (None, None))
            out.append(
                Outcome(
                    i,
                    inv.client,
                    self.key_of[inv.client],
                    inv.service,
                    inv.operation,
                    Effect.PERMIT if res.ok else Effect.DENY,
                    res.fault,
                    res.cause,
                    res.payload,
                    hops,
                    latency,
                    self.authz_hops.get(i, 0),
                )
            )
        return out


def build_simulator(topology: Topology | str, config: ScenarioConfig, retransmit: RetransmitPolicy | None = None) -> Simulator:
    return Simulator(config.network(Topology(topology)), config.seed, retransmit)


def _validate(topology: Topology, workload: list[Invocation], sim: Simulator, config: ScenarioConfig) -> None:
    nodes = set(sim.network.nodes)
    missing = [n for n in (*config.clients, *topology.infrastructure) if n not in nodes]
    if missing:
        raise ScenarioConfigError(f"{topology}: actors without a network node: {', '.join(missing)}")
    if len(set(config.clients)) != len(config.clients):
        raise ScenarioConfigError("duplicate client names")
    clash = set(config.clients) & {HOST, GUARD, AUTHORITY}
    if clash:
        raise ScenarioConfigError(f"client names clash with infrastructure: {sorted(clash)}")
    for i, inv in enumerate(workload):
        if inv.client not in config.clients:
            raise ScenarioConfigError(f"invocation {i}: unknown client {inv.client!r}")
        if inv.at_ms < 0:
            raise ScenarioConfigError(f"invocation {i}: negative start time")


def run_scenario(
    topology: Topology | str,
    workload: Iterable[Invocation],
    sim: Simulator | None = None,
    config: ScenarioConfig | None = None,
) -> ScenarioTrace:
    topology = Topology(topology)
    config = config or ScenarioConfig()
    workload = list(workload)
    sim = sim if sim is not None else build_simulator(topology, config)
    _validate(topology, workload, sim, config)
    try:
        run = _Run(topology, workload, sim, config)
    except MobhostError as exc:
        raise ScenarioConfigError(f"{topology}: {exc}") from exc
    run.start()
    sim.run_until_idle()
    return ScenarioTrace(topology, sim.trace.lines(), run.outcomes(), run.audits, list(run.host.executions))


# ---------- scenario files ----------

@dataclass
class Scenario:
    topology: Topology
    workload: list[Invocation]
    config: ScenarioConfig
    retransmit: RetransmitPolicy | None = None

    def run(self) -> ScenarioTrace:
        sim = build_simulator(self.topology, self.config, self.retransmit)
        return run_scenario(self.topology, self.workload, sim, self.config)


def _text_or_file(value: str, base: Path) -> str:
    if "(" in value or "\n" in value:
        return value
    return (base / value).read_text()


_SERVICES = {"Echo": echo_service, "LocationSnapshot": location_snapshot_service}


def load_scenario(path: str | Path) -> Scenario:
    """Read a YAML scenario file.

    Keys: ``topology``, ``seed``, ``epoch``, ``suite``, ``link``, ``clients``,
    ``profiles``, ``policies``, ``annotations``, ``context``, ``services``,
    ``workload``, ``token_validity_seconds``, ``retransmit`` and ``keys``
    (actor name -> key file). Policy and fact values may be inline text or
    file names relative to the scenario file.
    """
    path = Path(path)
    base = path.parent
    try:
        cfg = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ScenarioConfigError(f"cannot read scenario {path}: {exc}") from exc
    try:
        topology = Topology(cfg["topology"])
        clients = tuple(str(c) for c in cfg.get("clients", ()))
        link = cfg.get("link") or {}
        identities = {}
        for actor, kf in (cfg.get("keys") or {}).items():
            pairs = load_keypairs((base / kf).read_text())
            identities[str(actor)] = Identity(str(actor), tuple(kp for kp, _ in pairs))
        services = tuple(_SERVICES[s]() for s in cfg.get("services", list(_SERVICES)))
        epoch = cfg.get("epoch", DEFAULT_EPOCH)
        config = ScenarioConfig(
            clients=clients,
            policies={str(k): _text_or_file(v, base) for k, v in (cfg.get("policies") or {}).items()},
            annotations={str(k): _text_or_file(v, base) for k, v in (cfg.get("annotations") or {}).items()},
            profiles={str(k): _text_or_file(v, base) for k, v in (cfg.get("profiles") or {}).items()},
            context=cfg.get("context", "clock"),
            services=services,
            suite=CryptoSuite.parse(cfg["suite"]) if "suite" in cfg else RECOMMENDED_SUITE,
            seed=int(cfg.get("seed", 0)),
            epoch=parse_instant(epoch) if isinstance(epoch, str) else int(epoch),
            token_validity_seconds=float(cfg.get("token_validity_seconds", 86_400)),
            replay_cache=bool(cfg.get("replay_cache", False)),
            link=LinkProfile(
                link.get("kind", "wireless"),
                link.get("latency_ms", 120),
                float(link.get("bandwidth", 50_000)),
                link.get("loss_rate", 0.0),
            ),
            identities=identities,
        )
        workload = [
            Invocation(
                str(w["client"]),
                str(w["service"]),
                str(w["op"]),
                str(w.get("payload", "")).encode("utf-8"),
                int(w.get("at_ms", 0)),
                bool(w.get("bypass", False)),
            )
            for w in cfg.get("workload", ())
        ]
        rt = cfg.get("retransmit")
        retransmit = RetransmitPolicy(rt.get("timeout_ms", 1000), rt.get("max_retries", 3)) if rt else None
    except ScenarioConfigError:
        raise
    except (KeyError, ValueError, TypeError, OSError, MobhostError) as exc:
        raise ScenarioConfigError(f"bad scenario {path}: {type(exc).__name__}: {exc}") from exc
    return Scenario(topology, workload, config, retransmit)
