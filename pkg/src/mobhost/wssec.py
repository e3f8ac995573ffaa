"""Encrypt-then-sign protection of envelopes.

``protect`` encrypts the body under a fresh symmetric key, wraps that key
for the recipient, stamps the message and finally signs the timestamp,
wrapped key and ciphertext. ``unprotect`` undoes this in the order
verify signature, check freshness, unwrap key, decrypt, so a tampered
message never reaches the cipher.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable

from . import cryptokit
from .cryptokit import CryptoSuite, Identity, KeyPair, PublicKey, RandomSource, TrustStore
from .envelope import (
    EncryptedData,
    EncryptedKey,
    Envelope,
    PlainBody,
    SecurityHeader,
    Signature,
    Timestamp,
    canonical_bytes,
    parse_node,
)
from .errors import (
    BadSignature,
    KeyMismatch,
    MissingSecurity,
    StaleMessage,
    UnknownAlgorithm,
    UnknownSigner,
    WrapFailure,
)
from .timeutil import Clock, format_instant

log = logging.getLogger(__name__)

Trace = Callable[[str], None]


@dataclass(frozen=True)
class FreshnessPolicy:
    ttl_seconds: float = 300
    max_clock_skew_seconds: float = 30

    def __post_init__(self) -> None:
        if self.ttl_seconds <= 0 or self.max_clock_skew_seconds <= 0:
            raise ValueError("freshness window values must be positive")

    @property
    def ttl_ms(self) -> int:
        return round(self.ttl_seconds * 1000)

    @property
    def skew_ms(self) -> int:
        return round(self.max_clock_skew_seconds * 1000)


DEFAULT_FRESHNESS = FreshnessPolicy()


def signed_bytes(ts: Timestamp, ek: EncryptedKey, data: EncryptedData) -> bytes:
    return canonical_bytes(ts) + canonical_bytes(ek) + canonical_bytes(data)


def suite_of(env: Envelope) -> CryptoSuite:
    sec = env.security
    if sec is None or not isinstance(env.body, EncryptedData):
        raise MissingSecurity("envelope is not protected")
    return CryptoSuite(env.body.alg, sec.encrypted_key.alg, sec.signature.alg)


def protect(
    env: Envelope,
    suite: CryptoSuite,
    signer: KeyPair,
    recipient: PublicKey,
    clock: Clock,
    rng: RandomSource = None,
    ttl_seconds: float = DEFAULT_FRESHNESS.ttl_seconds,
) -> Envelope:
    if not isinstance(env.body, PlainBody) or env.security is not None:
        raise ValueError("protect needs a plain envelope without a Security header")
    if recipient.family != "RSA" or recipient.bits != cryptokit.KEY_WRAP[suite.wrap]:
        raise KeyMismatch(f"{suite.wrap} needs an RSA-{cryptokit.KEY_WRAP[suite.wrap]} recipient key")

    rng = cryptokit.as_rng(rng)
    key = cryptokit.gen_sym_key(suite.sym, rng)
    iv = cryptokit.random_bytes(cryptokit.block_size(suite.sym), rng)
    data = EncryptedData(suite.sym, iv, cryptokit.sym_encrypt(suite.sym, key, iv, canonical_bytes(env.body)))
    ek = EncryptedKey(suite.wrap, recipient.key_id, cryptokit.wrap_key(recipient, key, rng))
    created = clock()
    ts = Timestamp(created, created + round(ttl_seconds * 1000))
    sig = cryptokit.sign(suite.sig, signer, signed_bytes(ts, ek, data))
    header = SecurityHeader(ts, ek, Signature(suite.sig, signer.key_id, sig))
    return Envelope((header,) + env.header, data)


def check_freshness(ts: Timestamp, now: int, fp: FreshnessPolicy = DEFAULT_FRESHNESS) -> None:
    lo = ts.created - fp.skew_ms
    hi = min(ts.expires, ts.created + fp.ttl_ms) + fp.skew_ms
    if not lo <= now <= hi:
        raise StaleMessage(
            f"now={format_instant(now)} outside [{format_instant(lo)}, {format_instant(hi)}]"
        )


def _private_keys(keys: KeyPair | Identity | Iterable[KeyPair]) -> list[KeyPair]:
    if isinstance(keys, KeyPair):
        return [keys]
    if isinstance(keys, Identity):
        return list(keys.keys)
    return list(keys)


def unprotect(
    sec: Envelope,
    recipient: KeyPair | Identity | Iterable[KeyPair],
    trust: TrustStore,
    clock: Clock,
    fp: FreshnessPolicy = DEFAULT_FRESHNESS,
    trace: Trace | None = None,
) -> tuple[Envelope, str]:
    """Return the plain envelope and the authenticated signer key-id."""
    step = trace or (lambda _: None)
    header = sec.security
    if header is None or not isinstance(sec.body, EncryptedData):
        raise MissingSecurity("message carries no Security header or no encrypted body")
    sig = header.signature

    step("verify")
    entry = trust.get(sig.key_id)
    if entry is None:
        raise UnknownSigner(f"signer {sig.key_id} is not in the trust store")
    try:
        ok = cryptokit.verify(sig.alg, entry.public, signed_bytes(header.timestamp, header.encrypted_key, sec.body), sig.value)
    except UnknownAlgorithm:
        ok = False
    if not ok:
        raise BadSignature(f"signature by {sig.key_id} does not verify")

    step("freshness")
    check_freshness(header.timestamp, clock(), fp)

    step("unwrap")
    ek = header.encrypted_key
    priv = next((kp for kp in _private_keys(recipient) if kp.key_id == ek.key_id), None)
    if priv is None:
        raise WrapFailure("message key is not wrapped for this recipient")
    if ek.alg not in cryptokit.KEY_WRAP or priv.public.bits != cryptokit.KEY_WRAP[ek.alg]:
        raise WrapFailure(f"{ek.alg} does not match the recipient key")
    key = cryptokit.unwrap_key(priv, ek.value, sec.body.alg)

    step("decrypt")
    plain = cryptokit.sym_decrypt(sec.body.alg, key, sec.body.iv, sec.body.ciphertext)
    body = PlainBody.from_node(parse_node(plain))
    log.debug("unprotected %s.%s from %s", body.service, body.operation, sig.key_id)
    return Envelope(sec.without_security(), body), sig.key_id


def protect_for(
    env: Envelope,
    suite: CryptoSuite,
    sender: Identity,
    recipient: PublicKey,
    clock: Clock,
    rng: RandomSource = None,
) -> Envelope:
    """:func:`protect` picking the sender's signing key for ``suite``."""
    return protect(env, suite, sender.signing_key(suite.sig), recipient, clock, rng)

