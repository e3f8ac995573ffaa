"""Network-side authorization actors.

:class:`GuardNode` is the middleware guard. As a proxy it exposes the
host's interface, enforces policy and forwards only permitted requests,
re-signed with its own key. As a decision service it answers
``Authz.decide`` queries from delegating hosts.

:class:`AuthorityNode` is the third-party authority issuing signed
assertions through ``Authority.issue``.

Both are transport-agnostic: methods take and return envelope bytes.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

from . import wssec
from .authz import AuthzAnswer, AuthzQuery, issue_assertion
from .client import FAULT_SERVICE, fault_envelope, result_of
from .cryptokit import CryptoSuite, Identity, RandomSource, TrustStore, as_rng
from .envelope import Envelope, Node, PlainBody, canonical_bytes, parse_envelope, parse_node
from .errors import AuthorizationRefused, KeyMismatch, MalformedMessage, MobhostError, UnknownObligation
from .guard import Guard
from .sbac import AccessRequest, Decision
from .timeutil import Clock, system_clock

log = logging.getLogger(__name__)

AUTHZ_SERVICE = "Authz"
AUTHORITY_SERVICE = "Authority"


class _Endpoint:
    def __init__(
        self,
        identity: Identity,
        trust: TrustStore,
        clock: Clock = system_clock,
        rng: RandomSource = None,
        freshness: wssec.FreshnessPolicy = wssec.DEFAULT_FRESHNESS,
    ) -> None:
        self.identity = identity
        self.trust = trust
        self.clock = clock
        self.rng = as_rng(rng)
        self.freshness = freshness

    def open(self, data: bytes) -> tuple[Envelope, str, CryptoSuite]:
        env = parse_envelope(data)
        suite = wssec.suite_of(env)
        plain, sender = wssec.unprotect(env, self.identity, self.trust, self.clock, self.freshness)
        return plain, sender, suite

    def seal(self, to_key_id: str, body: PlainBody, suite: CryptoSuite, header: tuple = ()) -> bytes:
        recipient = self.trust.recipient_key(to_key_id, suite.wrap)
        if recipient is None:
            raise KeyMismatch(f"no {suite.wrap} transport key for {to_key_id}")
        sec = wssec.protect(
            Envelope(header, body), suite, self.identity.signing_key(suite.sig), recipient, self.clock, self.rng
        )
        return sec.to_bytes()

    def fault(self, to_key_id: str, suite: CryptoSuite, code: str, cause: str) -> bytes:
        try:
            return self.seal(to_key_id, PlainBody(FAULT_SERVICE, code, cause.encode("utf-8")), suite)
        except MobhostError:
            return fault_envelope(code, cause).to_bytes()


@dataclass
class Forward:
    """Proxy verdict: send ``data`` to the host and keep ``ctx`` for the reply."""

    data: bytes
    ctx: "_ProxyContext"


@dataclass
class _ProxyContext:
    client: str
    suite: CryptoSuite
    decision: Decision


class GuardNode(_Endpoint):
    def __init__(
        self,
        identity: Identity,
        trust: TrustStore,
        guard: Guard,
        host_key_id: str | None = None,
        clock: Clock = system_clock,
        rng: RandomSource = None,
        freshness: wssec.FreshnessPolicy = wssec.DEFAULT_FRESHNESS,
    ) -> None:
        super().__init__(identity, trust, clock, rng, freshness)
        self.guard = guard
        self.host_key_id = host_key_id
        self.queries_answered = 0

    def on_request(self, data: bytes) -> bytes | Forward:
        try:
            env, sender, suite = self.open(data)
        except MobhostError as exc:
            return fault_envelope(exc.code, f"{type(exc).__name__}: {exc}").to_bytes()
        body = env.body
        assert isinstance(body, PlainBody)
        if body.service == AUTHZ_SERVICE:
            return self._answer(env, sender, suite)
        decision = self.guard.enforce(AccessRequest(sender, body.operation, body.service))
        if not decision.permitted:
            return self.fault(sender, suite, "denied", decision.cause)
        if self.host_key_id is None:
            return self.fault(sender, suite, "internal", "guard has no host to forward to")
        forwarded = self.seal(self.host_key_id, body, suite, env.header)
        return Forward(forwarded, _ProxyContext(sender, suite, decision))

    def on_host_response(self, ctx: _ProxyContext, data: bytes) -> bytes:
        try:
            env = parse_envelope(data)
            if env.security is None:
                res = result_of(env, None)
            else:
                plain, signer = wssec.unprotect(env, self.identity, self.trust, self.clock, self.freshness)
                if not self.trust.has_role(signer, "host"):
                    return self.fault(ctx.client, ctx.suite, "internal", "response not signed by the host")
                res = result_of(plain, signer)
        except MobhostError as exc:
            return self.fault(ctx.client, ctx.suite, "internal", f"bad host response: {exc}")
        if not res.ok:
            return self.fault(ctx.client, ctx.suite, res.fault or "internal", res.cause)
        body = env.body if env.security is None else plain.body
        payload = res.payload
        if ctx.decision.obligations:
            try:
                payload = self.guard.post_authorize(ctx.decision, payload)
            except UnknownObligation as exc:
                return self.fault(ctx.client, ctx.suite, "denied", f"response suppressed: {exc}")
        return self.seal(ctx.client, PlainBody(body.service, body.operation, payload), ctx.suite)

    def _answer(self, env: Envelope, sender: str, suite: CryptoSuite) -> bytes:
        body = env.body
        if not self.trust.has_role(sender, "host"):
            return self.fault(sender, suite, "denied", "authorization queries are accepted from hosts only")
        try:
            q = AuthzQuery.from_bytes(body.payload)
        except MobhostError as exc:
            return self.fault(sender, suite, "malformed", str(exc))
        decision = self.guard.enforce(q.request)
        self.queries_answered += 1
        answer = AuthzAnswer.for_query(q, decision)
        return self.seal(sender, PlainBody(AUTHZ_SERVICE, "answer", answer.to_bytes()), suite)

    def handle(self, data: bytes, forward) -> bytes:
        """Synchronous proxying; ``forward`` sends bytes to the host and returns its reply."""
        out = self.on_request(data)
        if isinstance(out, Forward):
            try:
                reply = forward(out.data)
            except Exception as exc:
                return self.fault(out.ctx.client, out.ctx.suite, "internal", f"host unreachable: {exc}")
            return self.on_host_response(out.ctx, reply)
        return out


def authority_request(operation: str, object: str) -> bytes:
    return canonical_bytes(Node("AuthzRequest", {"op": operation, "obj": object}))


class AuthorityNode(_Endpoint):
    def __init__(
        self,
        identity: Identity,
        trust: TrustStore,
        guard: Guard,
        validity_seconds: float = 86_400,
        clock: Clock = system_clock,
        rng: RandomSource = None,
        freshness: wssec.FreshnessPolicy = wssec.DEFAULT_FRESHNESS,
    ) -> None:
        super().__init__(identity, trust, clock, rng, freshness)
        self.guard = guard
        self.validity_seconds = validity_seconds
        self.issued = itertools.count()
        self.issued_count = 0

    def handle(self, data: bytes) -> bytes:
        try:
            env, sender, suite = self.open(data)
        except MobhostError as exc:
            return fault_envelope(exc.code, f"{type(exc).__name__}: {exc}").to_bytes()
        body = env.body
        assert isinstance(body, PlainBody)
        if (body.service, body.operation) != (AUTHORITY_SERVICE, "issue"):
            return self.fault(sender, suite, "unknown-service", f"{body.service}.{body.operation}")
        try:
            node = parse_node(body.payload)
            if node.name != "AuthzRequest":
                raise MalformedMessage("expected <AuthzRequest>")
            op, obj = node.attr("op"), node.attr("obj")
        except (MobhostError, KeyError) as exc:
            return self.fault(sender, suite, "malformed", f"bad authorization request: {exc}")
        key = self.identity.signing_key(suite.sig)
        try:
            a = issue_assertion(key, self.guard.enforce, sender, op, obj, self.validity_seconds, self.clock, self.rng)
        except AuthorizationRefused as exc:
            return self.fault(sender, suite, "denied", exc.cause)
        self.issued_count += 1
        return self.seal(sender, PlainBody(AUTHORITY_SERVICE, "issue", a.to_bytes()), suite)
