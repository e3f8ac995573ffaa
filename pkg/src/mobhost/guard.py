"""Policy enforcement: collect, decide, audit, post-authorize.

A :class:`Guard` mediates every request. It first pulls everything it
needs from the retrievers (policies from the PIR, context from the CIR,
resource annotations from the RIR, subject descriptors), then decides with
:func:`mobhost.sbac.decide`. Any failure on that path is a Deny; nothing
but a derived ``permit`` ever yields Permit.
"""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import yaml

from . import sbac
from .errors import (
    MobhostError,
    RetrieverUnavailable,
    UnknownObligation,
)
from .sbac import AccessRequest, Atom, Decision, Effect, Policy
from .timeutil import Clock, format_instant, system_clock

log = logging.getLogger(__name__)


@dataclass
class Retrievers:
    pir: Callable[[str], Iterable[Policy]]
    cir: Callable[[], Iterable[Atom]]
    rir: Callable[[str], Iterable[Atom]]
    subjects: Callable[[str], Iterable[Atom]]


def _call(source: str, fn: Callable, *args) -> list:
    try:
        return list(fn(*args))
    except Exception as exc:  # any retriever fault is fail-safe
        raise RetrieverUnavailable(source, exc) from exc


def collect(req: AccessRequest, r: Retrievers) -> tuple[Policy, frozenset[Atom]]:
    policies = _call("pir", r.pir, req.object)
    annotations = _call("rir", r.rir, req.object)
    context = _call("cir", r.cir)
    descriptor = _call("subject-descriptor", r.subjects, req.subject)
    merged = Policy(f"merged:{req.object}").union(*policies)
    facts = frozenset(annotations) | frozenset(context) | frozenset(descriptor) | req.context
    return merged, facts


# ---------- static retrievers ----------

@dataclass
class StaticRetrievers:
    """Fixed snapshots: object-id -> policies/annotations, key-id -> descriptor."""

    policies: dict[str, list[Policy]] = field(default_factory=dict)
    annotations: dict[str, set[Atom]] = field(default_factory=dict)
    descriptors: dict[str, set[Atom]] = field(default_factory=dict)
    context: Callable[[], Iterable[Atom]] = lambda: ()

    def add_policy(self, object_id: str, policy: Policy) -> None:
        self.policies.setdefault(object_id, []).append(policy)

    def annotate(self, object_id: str, facts: Iterable[Atom]) -> None:
        self.annotations.setdefault(object_id, set()).update(facts)

    def describe(self, key_id: str, facts: Iterable[Atom]) -> None:
        self.descriptors.setdefault(key_id, set()).update(facts)

    def retrievers(self) -> Retrievers:
        return Retrievers(
            pir=lambda o: list(self.policies.get(o, ())),
            cir=lambda: list(self.context()),
            rir=lambda o: set(self.annotations.get(o, ())),
            subjects=lambda k: set(self.descriptors.get(k, ())),
        )


def clock_context(clock: Clock) -> Callable[[], list[Atom]]:
    """Context provider reporting the current instant as ``now(T)``."""
    return lambda: [Atom("now", (sbac.Instant(clock()),))]


def load_retrievers(path: str | Path, clock: Clock | None = None) -> StaticRetrievers:
    """Build retrievers from a YAML file.

    ``objects`` maps object ids to ``policies`` and ``annotations`` file
    lists; ``subjects`` maps key ids to descriptor files or inline facts;
    ``context`` holds fixed fact text, or ``clock`` for a live ``now(T)``.
    """
    path = Path(path)
    base = path.parent
    cfg = yaml.safe_load(path.read_text()) or {}
    sr = StaticRetrievers()
    for oid, spec in (cfg.get("objects") or {}).items():
        for pf in spec.get("policies", []):
            sr.add_policy(oid, sbac.parse_policy((base / pf).read_text(), name=Path(pf).stem))
        for af in spec.get("annotations", []):
            sr.annotate(oid, sbac.parse_facts((base / af).read_text()))
        if spec.get("facts"):
            sr.annotate(oid, sbac.parse_facts(spec["facts"]))
    for kid, spec in (cfg.get("subjects") or {}).items():
        text = spec if "(" in spec else (base / spec).read_text()
        sr.describe(str(kid), sbac.parse_facts(text))
    ctx = cfg.get("context")
    if ctx == "clock":
        sr.context = clock_context(clock or system_clock)
    elif ctx:
        fixed = sbac.parse_facts(ctx)
        sr.context = lambda: fixed
    return sr


# ---------- obligations ----------

GEO_TOKEN = re.compile(rb"geo\(\s*-?\d+(?:\.\d+)?\s*,\s*-?\d+(?:\.\d+)?\s*\)")


def redact_location(payload: bytes) -> bytes:
    return GEO_TOKEN.sub(b"", payload)


class ObligationRegistry:
    def __init__(self, filters: Mapping[str, Callable[[bytes], bytes]] | None = None) -> None:
        self._filters: dict[str, Callable[[bytes], bytes]] = {}
        for name, fn in (filters or {}).items():
            self.register(name, fn)

    def register(self, name: str, fn: Callable[[bytes], bytes]) -> None:
        if name in self._filters:
            raise ValueError(f"obligation filter {name!r} already registered")
        self._filters[name] = fn

    def get(self, name: str) -> Callable[[bytes], bytes]:
        try:
            return self._filters[name]
        except KeyError:
            raise UnknownObligation(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._filters


def default_registry() -> ObligationRegistry:
    return ObligationRegistry({"redact-location": redact_location})


def post_authorize(decision: Decision, payload: bytes, registry: ObligationRegistry) -> bytes:
    if not decision.permitted:
        raise ValueError("post-authorization applies to permitted requests only")
    filters = [registry.get(name) for name in decision.obligations]
    for fn in filters:
        payload = fn(payload)
    return payload


# ---------- audit ----------

@dataclass(frozen=True)
class AuditRecord:
    instant: int
    subject: str
    operation: str
    object: str
    effect: Effect
    cause: str

    def line(self) -> str:
        cause = re.sub(r"\s+", "_", self.cause.strip()) or "-"
        return f"{format_instant(self.instant)} {self.subject} {self.operation} {self.object} {self.effect} {cause}"


class AuditLog:
    """Append-only decision log; appends are atomic per record."""

    def __init__(self, sink: Callable[[str], None] | None = None) -> None:
        self._records: list[AuditRecord] = []
        self._lock = threading.Lock()
        self._sink = sink

    def append(self, rec: AuditRecord) -> None:
        with self._lock:
            self._records.append(rec)
            if self._sink is not None:
                self._sink(rec.line())

    @property
    def records(self) -> list[AuditRecord]:
        with self._lock:
            return list(self._records)

    def count(self, effect: Effect) -> int:
        return sum(r.effect is effect for r in self.records)

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def __len__(self) -> int:
        return len(self._records)


# ---------- guard ----------

class Guard:
    def __init__(
        self,
        retrievers: Retrievers,
        clock: Clock = system_clock,
        audit: AuditLog | None = None,
        registry: ObligationRegistry | None = None,
        fact_cap: int = sbac.DEFAULT_FACT_CAP,
    ) -> None:
        self.retrievers = retrievers
        self.clock = clock
        self.audit = audit if audit is not None else AuditLog()
        self.registry = registry if registry is not None else default_registry()
        self.fact_cap = fact_cap

    def enforce(self, req: AccessRequest) -> Decision:
        try:
            policy, facts = collect(req, self.retrievers)
            decision = sbac.decide(
                policy, AccessRequest(req.subject, req.operation, req.object, facts), self.fact_cap
            )
        except MobhostError as exc:
            decision = Decision.deny(f"{type(exc).__name__}: {exc}")
        except Exception as exc:  # fail-safe on anything unexpected
            log.exception("guard fault while deciding %s", req.triple)
            decision = Decision.deny(f"internal: {type(exc).__name__}")
        self.audit.append(
            AuditRecord(self.clock(), req.subject, req.operation, req.object, decision.effect, decision.cause)
        )
        return decision

    def post_authorize(self, decision: Decision, payload: bytes) -> bytes:
        return post_authorize(decision, payload, self.registry)
