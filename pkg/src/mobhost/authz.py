"""Signed authorization messages exchanged between clients, guards and hosts.

* :class:`AuthzAssertion`: a time-bounded token from a third-party authority
  binding one (subject, operation, object). Wire form::

      <Assertion expires=".." id=".." issued=".." issuer=".." obj=".." op=".." sub="..">b64(sig)</Assertion>

  The signature covers the canonical bytes of the same element without
  its text content.
* :class:`AuthzQuery` / :class:`AuthzAnswer`: a delegating host asks the
  middleware guard for a decision; the answer travels inside a protected
  (and therefore guard-signed) envelope.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import cryptokit
from .cryptokit import KeyPair, RandomSource, TrustStore
from .envelope import Node, b64, canonical_bytes, parse_node, unb64
from .errors import (
    AssertionBadSignature,
    AuthorizationRefused,
    Expired,
    MalformedMessage,
    ObjectMismatch,
    OperationMismatch,
    UntrustedIssuer,
)
from .sbac import AccessRequest, Decision, Effect
from .timeutil import Clock, format_instant, parse_instant

ASSERTION = "Assertion"


def _sig_alg_for(family: str) -> str:
    return "RSA-SHA1" if family == "RSA" else "DSA-SHA1"


@dataclass(frozen=True)
class AuthzAssertion:
    id: str
    subject: str
    operation: str
    object: str
    issued: int
    expires: int
    issuer: str
    signature: bytes = b""

    def __post_init__(self) -> None:
        if not self.issued < self.expires:
            raise ValueError("assertion must satisfy issued < expires")

    def _attrs(self) -> dict[str, str]:
        return {
            "id": self.id,
            "sub": self.subject,
            "op": self.operation,
            "obj": self.object,
            "issued": format_instant(self.issued),
            "expires": format_instant(self.expires),
            "issuer": self.issuer,
        }

    def signed_bytes(self) -> bytes:
        return canonical_bytes(Node(ASSERTION, self._attrs()))

    def to_node(self) -> Node:
        return Node(ASSERTION, self._attrs(), [b64(self.signature)])

    def to_bytes(self) -> bytes:
        return canonical_bytes(self)

    @classmethod
    def from_node(cls, node: Node) -> AuthzAssertion:
        if node.name != ASSERTION:
            raise MalformedMessage("expected <Assertion>")
        try:
            return cls(
                node.attr("id"),
                node.attr("sub"),
                node.attr("op"),
                node.attr("obj"),
                parse_instant(node.attr("issued")),
                parse_instant(node.attr("expires")),
                node.attr("issuer"),
                unb64(node.text, "assertion signature"),
            )
        except (KeyError, ValueError) as exc:
            raise MalformedMessage(f"bad <Assertion>: {exc}") from None

    @classmethod
    def from_bytes(cls, data: bytes) -> AuthzAssertion:
        return cls.from_node(parse_node(data))


def issue_assertion(
    authority: KeyPair,
    enforce,
    subject: str,
    operation: str,
    object: str,
    validity_seconds: float,
    clock: Clock,
    rng: RandomSource = None,
) -> AuthzAssertion:
    """Run ``enforce`` (an AccessRequest -> Decision callable) and sign on Permit."""
    decision: Decision = enforce(AccessRequest(subject, operation, object))
    if not decision.permitted:
        raise AuthorizationRefused(decision.cause or "deny")
    now = clock()
    unsigned = AuthzAssertion(
        "a" + cryptokit.random_bytes(8, rng).hex(),
        subject,
        operation,
        object,
        now,
        now + round(validity_seconds * 1000),
        authority.key_id,
    )
    sig = cryptokit.sign(_sig_alg_for(authority.public.family), authority, unsigned.signed_bytes())
    return AuthzAssertion(**{**unsigned.__dict__, "signature": sig})


def validate_assertion(
    a: AuthzAssertion,
    trust: TrustStore,
    expected_operation: str,
    expected_object: str,
    clock: Clock,
) -> None:
    entry = trust.get(a.issuer)
    if entry is None or "authority" not in entry.roles:
        raise UntrustedIssuer(f"issuer {a.issuer} is not a trusted authority")
    if not cryptokit.verify(_sig_alg_for(entry.public.family), entry.public, a.signed_bytes(), a.signature):
        raise AssertionBadSignature(f"assertion {a.id} signature does not verify")
    now = clock()
    if not a.issued <= now <= a.expires:
        raise Expired(f"assertion {a.id} valid {format_instant(a.issued)}..{format_instant(a.expires)}")
    if a.operation != expected_operation:
        raise OperationMismatch(f"assertion is bound to operation {a.operation!r}, request is {expected_operation!r}")
    if a.object != expected_object:
        raise ObjectMismatch(f"assertion is bound to object {a.object!r}, request is {expected_object!r}")


# ---------- delegated decisions ----------

@dataclass(frozen=True)
class AuthzQuery:
    id: str
    subject: str
    operation: str
    object: str

    def to_bytes(self) -> bytes:
        return canonical_bytes(
            Node("AuthzQuery", {"id": self.id, "sub": self.subject, "op": self.operation, "obj": self.object})
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> AuthzQuery:
        n = parse_node(data)
        try:
            if n.name != "AuthzQuery":
                raise KeyError("AuthzQuery")
            return cls(n.attr("id"), n.attr("sub"), n.attr("op"), n.attr("obj"))
        except KeyError as exc:
            raise MalformedMessage(f"bad <AuthzQuery>: {exc}") from None

    @property
    def request(self) -> AccessRequest:
        return AccessRequest(self.subject, self.operation, self.object)


@dataclass(frozen=True)
class AuthzAnswer:
    id: str
    subject: str
    operation: str
    object: str
    effect: Effect
    obligations: tuple[str, ...] = ()
    cause: str = ""

    @classmethod
    def for_query(cls, q: AuthzQuery, d: Decision) -> AuthzAnswer:
        return cls(q.id, q.subject, q.operation, q.object, d.effect, d.obligations, d.cause)

    def matches(self, q: AuthzQuery) -> bool:
        return (self.id, self.subject, self.operation, self.object) == (q.id, q.subject, q.operation, q.object)

    @property
    def decision(self) -> Decision:
        return Decision(self.effect, self.obligations if self.effect is Effect.PERMIT else (), (), self.cause)

    def to_bytes(self) -> bytes:
        return canonical_bytes(
            Node(
                "AuthzAnswer",
                {
                    "id": self.id,
                    "sub": self.subject,
                    "op": self.operation,
                    "obj": self.object,
                    "effect": self.effect.value,
                    "obligations": " ".join(self.obligations),
                    "cause": self.cause,
                },
            )
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> AuthzAnswer:
        n = parse_node(data)
        try:
            if n.name != "AuthzAnswer":
                raise KeyError("AuthzAnswer")
            return cls(
                n.attr("id"),
                n.attr("sub"),
                n.attr("op"),
                n.attr("obj"),
                Effect(n.attr("effect")),
                tuple(n.attr("obligations").split()),
                n.get("cause", ""),
            )
        except (KeyError, ValueError) as exc:
            raise MalformedMessage(f"bad <AuthzAnswer>: {exc}") from None
