"""The Mobile Host: a small web-service handler behind an HTTP endpoint.

Requests arrive as protected envelopes POSTed to ``/ws``. The host
unprotects them, runs its enforcement shim (one :data:`EnforcementMode`
per instance), executes the handler and protects the response back to
the authenticated requester. Faults go back protected when the sender was
authenticated and in the clear otherwise.

Processing is split into :meth:`MobileHost.receive` and
:meth:`MobileHost.resume` so that a host delegating its decisions can
wait for the guard's answer over any transport; :meth:`MobileHost.dispatch`
chains the two synchronously.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

from . import wssec
from .authz import AuthzAnswer, AuthzAssertion, AuthzQuery, validate_assertion
from .client import FAULT_SERVICE, fault_envelope
from .cryptokit import CryptoSuite, Identity, RandomSource, TrustStore, as_rng
from .envelope import Envelope, PlainBody, check_token, parse_envelope
from .errors import (
    DuplicateService,
    KeyMismatch,
    MobhostError,
    ReplayedAssertion,
    SubjectMismatch,
    UnknownObligation,
)
from .guard import AuditLog, AuditRecord, Guard, ObligationRegistry, default_registry, post_authorize
from .sbac import AccessRequest, Decision, Effect
from .timeutil import Clock, system_clock

log = logging.getLogger(__name__)

ENDPOINT = "/ws"
CONTENT_TYPE = "application/x-secured-envelope"
STATUS = {
    "ok": 200,
    "malformed": 400,
    "unauthenticated": 401,
    "stale": 401,
    "denied": 403,
    "unknown-service": 404,
    "internal": 500,
}

Handler = Callable[[bytes], bytes]


@dataclass(frozen=True)
class ServiceRegistration:
    service: str
    operations: Mapping[str, Handler]

    def __post_init__(self) -> None:
        check_token(self.service, "service name")
        for op in self.operations:
            check_token(op, "operation name")


# ---------- enforcement modes ----------

@dataclass
class Open:
    pass


@dataclass
class EmbeddedGuard:
    guard: Guard


@dataclass
class VerifyGuardSignature:
    """Accept only requests re-signed by a key with the ``guard`` role."""


@dataclass
class RequireAssertion:
    replay_cache: bool = False
    seen: set[str] = field(default_factory=set)


@dataclass
class DelegateToGuard:
    guard_key_id: str
    authorizer: Callable[[bytes], bytes] | None = None


EnforcementMode = Union[Open, EmbeddedGuard, VerifyGuardSignature, RequireAssertion, DelegateToGuard]


# ---------- transport ----------

@dataclass(frozen=True)
class TransportRequest:
    path: str
    body: bytes
    headers: Mapping[str, str] = field(default_factory=dict)
    method: str = "POST"


@dataclass(frozen=True)
class TransportResponse:
    status: int
    body: bytes
    headers: Mapping[str, str] = field(default_factory=lambda: {"Content-Type": CONTENT_TYPE})


@dataclass
class RequestMetrics:
    unprotect_ms: float = 0.0
    decision_ms: float = 0.0
    handler_ms: float = 0.0
    protect_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.unprotect_ms + self.decision_ms + self.handler_ms + self.protect_ms


@dataclass
class Reply:
    status: int
    body: bytes
    code: str = "ok"
    metrics: RequestMetrics = field(default_factory=RequestMetrics)


@dataclass
class _Inbound:
    env: Envelope
    sender: str
    suite: CryptoSuite
    metrics: RequestMetrics

    @property
    def body(self) -> PlainBody:
        assert isinstance(self.env.body, PlainBody)
        return self.env.body

    @property
    def request(self) -> AccessRequest:
        return AccessRequest(self.sender, self.body.operation, self.body.service)


@dataclass
class Pending:
    """A request parked until the middleware guard answers ``query``."""

    query: AuthzQuery
    message: bytes
    inbound: _Inbound
    started: float


def _ms(since: float) -> float:
    return (time.perf_counter() - since) * 1000


class MobileHost:
    def __init__(
        self,
        identity: Identity,
        trust: TrustStore,
        mode: EnforcementMode | None = None,
        clock: Clock = system_clock,
        rng: RandomSource = None,
        freshness: wssec.FreshnessPolicy = wssec.DEFAULT_FRESHNESS,
        registry: ObligationRegistry | None = None,
        audit: AuditLog | None = None,
    ) -> None:
        self.identity = identity
        self.trust = trust
        self.mode = mode if mode is not None else Open()
        self.clock = clock
        self.rng = as_rng(rng)
        self.freshness = freshness
        self.registry = registry if registry is not None else default_registry()
        self.audit = audit if audit is not None else AuditLog()
        self.services: dict[str, dict[str, Handler]] = {}
        self.executions: list[tuple[str, str, str]] = []
        self.metrics: deque[RequestMetrics] = deque(maxlen=10_000)
        self._lock = threading.Lock()
        self._query_ids = itertools.count(1)

    # ----- administration -----

    def register_service(self, reg: ServiceRegistration) -> None:
        if reg.service in self.services:
            raise DuplicateService(reg.service)
        self.services[reg.service] = dict(reg.operations)

    # ----- responses -----

    def _plain_fault(self, code: str, cause: str, metrics: RequestMetrics | None = None) -> Reply:
        return Reply(STATUS[code], fault_envelope(code, cause).to_bytes(), code, metrics or RequestMetrics())

    def _respond(self, inbound: _Inbound, body: PlainBody, code: str = "ok") -> Reply:
        t = time.perf_counter()
        recipient = self.trust.recipient_key(inbound.sender, inbound.suite.wrap)
        if recipient is None:
            return self._plain_fault("internal", "no transport key for requester", inbound.metrics)
        try:
            sec = wssec.protect(
                Envelope((), body),
                inbound.suite,
                self.identity.signing_key(inbound.suite.sig),
                recipient,
                self.clock,
                self.rng,
            )
        except MobhostError as exc:
            return self._plain_fault("internal", f"cannot protect response: {exc}", inbound.metrics)
        data = sec.to_bytes()
        inbound.metrics.protect_ms += _ms(t)
        self.metrics.append(inbound.metrics)
        return Reply(STATUS[code], data, code, inbound.metrics)

    def _fault(self, inbound: _Inbound, code: str, cause: str) -> Reply:
        return self._respond(inbound, PlainBody(FAULT_SERVICE, code, cause.encode("utf-8")), code)

    def _record(self, inbound: _Inbound, effect: Effect, cause: str) -> None:
        req = inbound.request
        self.audit.append(AuditRecord(self.clock(), req.subject, req.operation, req.object, effect, cause))

    # ----- request path -----

    def _open(self, data: bytes) -> _Inbound | Reply:
        metrics = RequestMetrics()
        t = time.perf_counter()
        try:
            env = parse_envelope(data)
        except MobhostError as exc:
            return self._plain_fault("malformed", str(exc), metrics)
        steps: list[str] = []
        try:
            suite = wssec.suite_of(env)
            plain, sender = wssec.unprotect(env, self.identity, self.trust, self.clock, self.freshness, steps.append)
        except MobhostError as exc:
            metrics.unprotect_ms = _ms(t)
            signer = env.security.signature.key_id if env.security else None
            if signer is not None and len(steps) > 1:
                # signature verified: the sender is authenticated, answer under protection
                inbound = _Inbound(env, signer, wssec.suite_of(env), metrics)
                return self._respond(inbound, PlainBody(FAULT_SERVICE, exc.code, str(exc).encode()), exc.code)
            return self._plain_fault(exc.code, f"{type(exc).__name__}: {exc}", metrics)
        metrics.unprotect_ms = _ms(t)
        return _Inbound(plain, sender, suite, metrics)

    def receive(self, data: bytes) -> Reply | Pending:
        inbound = self._open(data)
        if isinstance(inbound, Reply):
            return inbound
        t = time.perf_counter()
        mode = self.mode
        decision: Decision | None = None
        try:
            if isinstance(mode, Open):
                decision = Decision(Effect.PERMIT, (), (), "open")
            elif isinstance(mode, EmbeddedGuard):
                decision = mode.guard.enforce(inbound.request)
            elif isinstance(mode, VerifyGuardSignature):
                if self.trust.has_role(inbound.sender, "guard"):
                    decision = Decision(Effect.PERMIT, (), (), "guard-signed")
                else:
                    decision = Decision.deny("request not signed by a trusted guard")
            elif isinstance(mode, RequireAssertion):
                decision = self._check_assertion(inbound, mode)
            elif isinstance(mode, DelegateToGuard):
                q = AuthzQuery(f"q{next(self._query_ids)}", inbound.sender, inbound.body.operation, inbound.body.service)
                msg = self._protect_to(mode.guard_key_id, PlainBody("Authz", "decide", q.to_bytes()), inbound.suite)
                inbound.metrics.decision_ms += _ms(t)
                return Pending(q, msg, inbound, time.perf_counter())
        except MobhostError as exc:
            decision = Decision.deny(f"{type(exc).__name__}: {exc}")
        inbound.metrics.decision_ms += _ms(t)
        return self._complete(inbound, decision)

    def resume(self, pending: Pending, answer: bytes) -> Reply:
        """Finish a delegated request with the guard's protected answer."""
        inbound = pending.inbound
        t = time.perf_counter()
        mode = self.mode
        assert isinstance(mode, DelegateToGuard)
        try:
            env = parse_envelope(answer)
            plain, signer = wssec.unprotect(env, self.identity, self.trust, self.clock, self.freshness)
            body = plain.body
            if not self.trust.has_role(signer, "guard"):
                decision = Decision.deny("authorization answer not signed by a trusted guard")
            elif body.service == FAULT_SERVICE:
                decision = Decision.deny(f"guard fault: {body.payload.decode('utf-8', 'replace')}")
            else:
                ans = AuthzAnswer.from_bytes(body.payload)
                if not ans.matches(pending.query):
                    decision = Decision.deny("authorization answer does not match the query")
                else:
                    decision = ans.decision
        except MobhostError as exc:
            decision = Decision.deny(f"{type(exc).__name__}: {exc}")
        inbound.metrics.decision_ms += _ms(t)
        return self._complete(inbound, decision)

    def dispatch(self, request: TransportRequest) -> TransportResponse:
        if request.path != ENDPOINT:
            reply = self._plain_fault("unknown-service", f"no endpoint at {request.path}")
        elif request.method != "POST":
            reply = self._plain_fault("malformed", "only POST is accepted")
        else:
            reply = self.receive(request.body)
            if isinstance(reply, Pending):
                reply = self._resolve(reply)
        return TransportResponse(reply.status, reply.body)

    def _resolve(self, pending: Pending) -> Reply:
        mode = self.mode
        assert isinstance(mode, DelegateToGuard)
        if mode.authorizer is None:
            return self._complete(pending.inbound, Decision.deny("no route to the authorization guard"))
        try:
            answer = mode.authorizer(pending.message)
        except Exception as exc:  # guard unreachable: fail safe
            return self._complete(pending.inbound, Decision.deny(f"guard unreachable: {exc}"))
        return self.resume(pending, answer)

    # ----- helpers -----

    def _protect_to(self, key_id: str, body: PlainBody, suite: CryptoSuite) -> bytes:
        recipient = self.trust.recipient_key(key_id, suite.wrap)
        if recipient is None:
            raise KeyMismatch(f"no {suite.wrap} transport key for {key_id}")
        sec = wssec.protect(
            Envelope((), body), suite, self.identity.signing_key(suite.sig), recipient, self.clock, self.rng
        )
        return sec.to_bytes()

    def _same_principal(self, a: str, b: str) -> bool:
        if a == b:
            return True
        owner = self.trust.owner_of(a)
        return owner is not None and owner == self.trust.owner_of(b)

    def _check_assertion(self, inbound: _Inbound, mode: RequireAssertion) -> Decision:
        blocks = inbound.env.blocks("Assertion")
        if len(blocks) != 1:
            return Decision.deny("request must carry exactly one authorization assertion")
        a = AuthzAssertion.from_node(blocks[0])
        validate_assertion(a, self.trust, inbound.body.operation, inbound.body.service, self.clock)
        if not self._same_principal(a.subject, inbound.sender):
            raise SubjectMismatch(f"assertion subject {a.subject} did not sign the request")
        if mode.replay_cache:
            with self._lock:
                if a.id in mode.seen:
                    raise ReplayedAssertion(f"assertion {a.id} already used")
                mode.seen.add(a.id)
        return Decision(Effect.PERMIT, (), (), f"assertion {a.id}")

    def _complete(self, inbound: _Inbound, decision: Decision) -> Reply:
        self._record(inbound, decision.effect, decision.cause)
        if not decision.permitted:
            return self._fault(inbound, "denied", decision.cause)
        body = inbound.body
        handler = self.services.get(body.service, {}).get(body.operation)
        if handler is None:
            return self._fault(inbound, "unknown-service", f"{body.service}.{body.operation}")
        t = time.perf_counter()
        with self._lock:
            self.executions.append((inbound.sender, body.service, body.operation))
        try:
            out = handler(body.payload)
        except Exception as exc:
            log.exception("handler %s.%s failed", body.service, body.operation)
            inbound.metrics.handler_ms = _ms(t)
            return self._fault(inbound, "internal", f"handler error: {type(exc).__name__}")
        inbound.metrics.handler_ms = _ms(t)
        # obligations from an embedded guard or a delegated answer are applied here
        if isinstance(self.mode, (EmbeddedGuard, DelegateToGuard)) and decision.obligations:
            try:
                out = post_authorize(decision, out, self.registry)
            except UnknownObligation as exc:
                return self._fault(inbound, "denied", f"response suppressed: {exc}")
        return self._respond(inbound, PlainBody(body.service, body.operation, out))


# ---------- demo services ----------

def echo_service() -> ServiceRegistration:
    return ServiceRegistration("Echo", {"echo": lambda payload: payload})


def location_snapshot_service(lat: float = 50.7787, lon: float = 6.0602, picture: bytes = b"\xff\xd8JPEG-stub\xff\xd9") -> ServiceRegistration:
    """Distress-call style snapshot: the host's position plus a picture of it."""

    def snapshot(payload: bytes) -> bytes:
        return f"geo({lat},{lon})\n".encode() + picture

    return ServiceRegistration("LocationSnapshot", {"snapshot": snapshot})
