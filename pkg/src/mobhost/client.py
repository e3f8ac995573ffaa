"""Client side of the protected request/response exchange."""

from __future__ import annotations

from dataclasses import dataclass

from . import wssec
from .cryptokit import RECOMMENDED_SUITE, CryptoSuite, Identity, RandomSource, TrustStore, as_rng
from .envelope import Envelope, Node, PlainBody, parse_envelope
from .errors import KeyMismatch, MobhostError
from .timeutil import Clock, system_clock

FAULT_SERVICE = "Fault"


@dataclass(frozen=True)
class Result:
    ok: bool
    payload: bytes = b""
    fault: str | None = None
    cause: str = ""
    signer: str | None = None

    @property
    def text(self) -> str:
        return self.payload.decode("utf-8", "replace")


def fault_envelope(code: str, cause: str) -> Envelope:
    return Envelope((), PlainBody(FAULT_SERVICE, code, cause.encode("utf-8")))


def result_of(env: Envelope, signer: str | None) -> Result:
    body = env.body
    assert isinstance(body, PlainBody)
    if body.service == FAULT_SERVICE:
        return Result(False, b"", body.operation, body.payload.decode("utf-8", "replace"), signer)
    return Result(True, body.payload, None, "", signer)


class Client:
    def __init__(
        self,
        identity: Identity,
        trust: TrustStore,
        suite: CryptoSuite = RECOMMENDED_SUITE,
        clock: Clock = system_clock,
        rng: RandomSource = None,
        freshness: wssec.FreshnessPolicy = wssec.DEFAULT_FRESHNESS,
    ) -> None:
        self.identity = identity
        self.trust = trust
        self.suite = suite
        self.clock = clock
        self.rng = as_rng(rng)
        self.freshness = freshness

    def recipient(self, peer_key_id: str):
        pub = self.trust.recipient_key(peer_key_id, self.suite.wrap)
        if pub is None:
            raise KeyMismatch(f"no RSA transport key for peer {peer_key_id} under {self.suite.wrap}")
        return pub

    def request(
        self,
        peer_key_id: str,
        service: str,
        operation: str,
        payload: bytes = b"",
        headers: tuple[Node, ...] = (),
    ) -> bytes:
        env = Envelope(tuple(headers), PlainBody(service, operation, payload))
        sec = wssec.protect(
            env,
            self.suite,
            self.identity.signing_key(self.suite.sig),
            self.recipient(peer_key_id),
            self.clock,
            self.rng,
        )
        return sec.to_bytes()

    def read(self, data: bytes, expect_from: str | None = None) -> Result:
        """Decode a response; plain (unauthenticated) faults are passed through."""
        try:
            env = parse_envelope(data)
        except MobhostError as exc:
            return Result(False, fault="malformed", cause=str(exc))
        if env.security is None:
            if isinstance(env.body, PlainBody) and env.body.service == FAULT_SERVICE:
                return result_of(env, None)
            return Result(False, fault="unauthenticated", cause="unprotected response")
        try:
            plain, signer = wssec.unprotect(env, self.identity, self.trust, self.clock, self.freshness)
        except MobhostError as exc:
            return Result(False, fault=exc.code, cause=f"{type(exc).__name__}: {exc}")
        if expect_from is not None and signer != expect_from:
            owner = self.trust.owner_of(expect_from)
            if owner is None or self.trust.owner_of(signer) != owner:
                return Result(False, fault="unauthenticated", cause=f"response signed by unexpected key {signer}")
        return result_of(plain, signer)
