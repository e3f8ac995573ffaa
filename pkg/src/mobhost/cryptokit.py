"""Uniform facade over the historical WS-Security algorithm matrix.

Symmetric ciphers: TRIPLEDES-CBC, AES128-CBC, AES192-CBC, AES256-CBC with
PKCS#7 padding. Key transport: RSA PKCS#1 v1.5 with 1024 or 2048 bit
moduli. Signatures: RSA-SHA1 (PKCS#1 v1.5) and DSA-SHA1 (1024 bit).

.. warning::
   SHA-1, RSA-1024, DSA-1024, 3DES and PKCS#1 v1.5 encryption are kept for
   fidelity with the mobile-host measurements they reproduce. They are
   considered insecure today and must not be chosen for new deployments.
"""

from __future__ import annotations

import base64
import hashlib
import os
import random
from dataclasses import dataclass, field
from math import gcd
from typing import Iterable, Iterator, Union

import sympy
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.decrepit.ciphers.algorithms import TripleDES
from cryptography.hazmat.primitives import hashes, padding as sympad, serialization
from cryptography.hazmat.primitives.asymmetric import dsa, rsa
from cryptography.hazmat.primitives.asymmetric import padding as asympad
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    BadIvLength,
    BadKeyLength,
    BadPadding,
    KeyMismatch,
    KeyTooLarge,
    MalformedSignature,
    UnknownAlgorithm,
    WrapFailure,
)

RandomSource = Union[random.Random, int, None]

# alg id -> (cipher factory, key bytes, block bytes)
SYMMETRIC = {
    "TRIPLEDES-CBC": (TripleDES, 24, 8),
    "AES128-CBC": (algorithms.AES, 16, 16),
    "AES192-CBC": (algorithms.AES, 24, 16),
    "AES256-CBC": (algorithms.AES, 32, 16),
}
KEY_WRAP = {"RSA15-1024": 1024, "RSA15-2048": 2048}
SIGNATURE = {"RSA-SHA1": "RSA", "DSA-SHA1": "DSA"}
KEY_ALGS = {"RSA-1024": ("RSA", 1024), "RSA-2048": ("RSA", 2048), "DSA-1024": ("DSA", 1024)}
ROLES = ("client", "host", "guard", "authority")

RSA_EXPONENT = 65537


def block_size(alg: str) -> int:
    try:
        return SYMMETRIC[alg][2]
    except KeyError:
        raise UnknownAlgorithm(alg) from None


def as_rng(rng: RandomSource) -> random.Random | None:
    """One stream for a seed; callers drawing repeatedly must convert once."""
    if rng is None or isinstance(rng, random.Random):
        return rng
    return random.Random(rng)


def random_bytes(n: int, rng: RandomSource = None) -> bytes:
    """``n`` bytes from ``rng`` when given (test mode), else system entropy."""
    r = as_rng(rng)
    if r is None:
        return os.urandom(n)
    return r.randbytes(n)


# ---------- suites ----------

@dataclass(frozen=True)
class CryptoSuite:
    sym: str = "AES256-CBC"
    wrap: str = "RSA15-1024"
    sig: str = "RSA-SHA1"

    def __post_init__(self) -> None:
        if self.sym not in SYMMETRIC:
            raise UnknownAlgorithm(self.sym)
        if self.wrap not in KEY_WRAP:
            raise UnknownAlgorithm(self.wrap)
        if self.sig not in SIGNATURE:
            raise UnknownAlgorithm(self.sig)

    @property
    def id(self) -> str:
        return f"{self.sym}/{self.wrap}/{self.sig}"

    @classmethod
    def parse(cls, text: str) -> CryptoSuite:
        parts = text.strip().split("/")
        if len(parts) != 3:
            raise UnknownAlgorithm(f"suite id must be sym/wrap/sig: {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return self.id


ALL_SUITES: tuple[CryptoSuite, ...] = tuple(
    CryptoSuite(s, w, g) for s in SYMMETRIC for w in KEY_WRAP for g in SIGNATURE
)
# the configuration recommended for mobile hosts: AES-256, RSA-1024 key exchange, RSA-SHA1
RECOMMENDED_SUITE = CryptoSuite("AES256-CBC", "RSA15-1024", "RSA-SHA1")


# ---------- symmetric ----------

def set_des_parity(key: bytes) -> bytes:
    """Force odd parity on every byte by adjusting its least significant bit."""
    out = bytearray()
    for b in key:
        high = b & 0xFE
        out.append(high | (bin(high).count("1") % 2 == 0))
    return bytes(out)


def has_des_parity(key: bytes) -> bool:
    return all(bin(b).count("1") % 2 == 1 for b in key)


@dataclass(frozen=True, repr=False)
class SymKey:
    alg: str
    key: bytes

    def __post_init__(self) -> None:
        if self.alg not in SYMMETRIC:
            raise UnknownAlgorithm(self.alg)
        want = SYMMETRIC[self.alg][1]
        if len(self.key) != want:
            raise BadKeyLength(f"{self.alg} needs a {want}-byte key, got {len(self.key)}")
        if self.alg == "TRIPLEDES-CBC":
            object.__setattr__(self, "key", set_des_parity(self.key))

    def __repr__(self) -> str:
        return f"SymKey({self.alg}, <{len(self.key)} bytes>)"


def gen_sym_key(alg: str, rng: RandomSource = None) -> SymKey:
    if alg not in SYMMETRIC:
        raise UnknownAlgorithm(alg)
    return SymKey(alg, random_bytes(SYMMETRIC[alg][1], rng))


def _cipher(alg: str, key: SymKey, iv: bytes) -> Cipher:
    if alg not in SYMMETRIC:
        raise UnknownAlgorithm(alg)
    factory, klen, bsize = SYMMETRIC[alg]
    if key.alg != alg or len(key.key) != klen:
        raise BadKeyLength(f"key for {key.alg} used with {alg}")
    if len(iv) != bsize:
        raise BadIvLength(f"{alg} needs a {bsize}-byte IV, got {len(iv)}")
    return Cipher(factory(key.key), modes.CBC(iv))


def sym_encrypt(alg: str, key: SymKey, iv: bytes, plain: bytes) -> bytes:
    cipher = _cipher(alg, key, iv)
    padder = sympad.PKCS7(SYMMETRIC[alg][2] * 8).padder()
    padded = padder.update(plain) + padder.finalize()
    enc = cipher.encryptor()
    return enc.update(padded) + enc.finalize()


def sym_decrypt(alg: str, key: SymKey, iv: bytes, cipher_text: bytes) -> bytes:
    cipher = _cipher(alg, key, iv)
    bsize = SYMMETRIC[alg][2]
    if not cipher_text or len(cipher_text) % bsize:
        raise BadPadding("ciphertext is not a positive multiple of the block size")
    dec = cipher.decryptor()
    padded = dec.update(cipher_text) + dec.finalize()
    unpadder = sympad.PKCS7(bsize * 8).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError:
        raise BadPadding("invalid PKCS#7 padding") from None


# ---------- asymmetric keys ----------

def _spki(public) -> bytes:
    return public.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def key_id_for(public) -> str:
    return hashlib.sha256(_spki(public)).hexdigest()[:16]


def _alg_of(public) -> str:
    if isinstance(public, rsa.RSAPublicKey):
        return f"RSA-{public.key_size}"
    if isinstance(public, dsa.DSAPublicKey):
        return f"DSA-{public.key_size}"
    raise UnknownAlgorithm(type(public).__name__)


@dataclass(frozen=True)
class PublicKey:
    alg: str
    key: object = field(repr=False, compare=False)
    key_id: str

    @classmethod
    def from_key(cls, public) -> PublicKey:
        return cls(_alg_of(public), public, key_id_for(public))

    def der(self) -> bytes:
        return _spki(self.key)

    @classmethod
    def from_der(cls, der: bytes) -> PublicKey:
        return cls.from_key(serialization.load_der_public_key(der))

    @property
    def family(self) -> str:
        return self.alg.split("-")[0]

    @property
    def bits(self) -> int:
        return int(self.alg.split("-")[1])


@dataclass(frozen=True)
class KeyPair:
    alg: str
    private: object = field(repr=False, compare=False)
    public: PublicKey

    @property
    def key_id(self) -> str:
        return self.public.key_id

    @classmethod
    def from_private(cls, private) -> KeyPair:
        pub = PublicKey.from_key(private.public_key())
        return cls(pub.alg, private, pub)


def _seeded_prime(r: random.Random, bits: int, coprime_to: int | None = None) -> int:
    while True:
        cand = r.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = sympy.nextprime(cand)
        if p.bit_length() != bits:
            continue
        if coprime_to is not None and gcd(coprime_to, p - 1) != 1:
            continue
        return int(p)


def _seeded_rsa(bits: int, r: random.Random):
    e = RSA_EXPONENT
    while True:
        p = _seeded_prime(r, bits // 2, e)
        q = _seeded_prime(r, bits // 2, e)
        if p == q or (p * q).bit_length() != bits:
            continue
        d = pow(e, -1, (p - 1) * (q - 1))
        numbers = rsa.RSAPrivateNumbers(
            p=p,
            q=q,
            d=d,
            dmp1=rsa.rsa_crt_dmp1(d, p),
            dmq1=rsa.rsa_crt_dmq1(d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=rsa.RSAPublicNumbers(e, p * q),
        )
        return numbers.private_key()


def _seeded_dsa(r: random.Random):
    # simple p = k*q + 1 search; reproducible test keys, not FIPS 186 parameter generation
    q = int(sympy.nextprime(r.getrandbits(160) | (1 << 159)))
    while q.bit_length() != 160:
        q = int(sympy.nextprime(r.getrandbits(160) | (1 << 159)))
    while True:
        k = r.getrandbits(1024 - 160) | (1 << (1024 - 161))
        k -= k % 2
        p = k * q + 1
        if p.bit_length() == 1024 and sympy.isprime(p):
            break
    h = 2
    while (g := pow(h, (p - 1) // q, p)) == 1:
        h += 1
    x = r.randrange(1, q)
    params = dsa.DSAParameterNumbers(p, q, g)
    return dsa.DSAPrivateNumbers(x, dsa.DSAPublicNumbers(pow(g, x, p), params)).private_key()


def generate_keypair(alg: str, seed: RandomSource = None) -> KeyPair:
    """Fresh key pair; a seed makes generation reproducible (tests, simulated scenarios)."""
    if alg not in KEY_ALGS:
        raise UnknownAlgorithm(alg)
    family, bits = KEY_ALGS[alg]
    r = as_rng(seed)
    if family == "RSA":
        priv = rsa.generate_private_key(RSA_EXPONENT, bits) if r is None else _seeded_rsa(bits, r)
    else:
        priv = dsa.generate_private_key(bits) if r is None else _seeded_dsa(r)
    return KeyPair.from_private(priv)


# ---------- key transport (RSA PKCS#1 v1.5) ----------

def _modulus_len(pub) -> int:
    return (pub.key_size + 7) // 8


def wrap_key(pub: PublicKey, sym: SymKey, rng: RandomSource = None) -> bytes:
    """RSAES-PKCS1-v1_5 encryption of the raw symmetric key bytes."""
    if pub.family != "RSA":
        raise KeyMismatch(f"key transport needs an RSA key, got {pub.alg}")
    k = _modulus_len(pub.key)
    rng = as_rng(rng)
    m = sym.key
    if len(m) > k - 11:
        raise KeyTooLarge(f"{len(m)}-byte key does not fit a {k}-byte modulus")
    ps = bytearray()
    while len(ps) < k - 3 - len(m):
        ps.extend(b for b in random_bytes(k - 3 - len(m) - len(ps), rng) if b)
    em = b"\x00\x02" + bytes(ps) + b"\x00" + m
    nums = pub.key.public_numbers()
    c = pow(int.from_bytes(em, "big"), nums.e, nums.n)
    return c.to_bytes(k, "big")


def unwrap_key(priv: KeyPair, wrapped: bytes, alg: str) -> SymKey:
    """Inverse of :func:`wrap_key`; every decoding failure is a WrapFailure.

    Decoding is strict (expected key length, DES parity) rather than the
    implicit-rejection behaviour of modern OpenSSL, which would hand back a
    random key instead of failing.
    """
    if alg not in SYMMETRIC:
        raise UnknownAlgorithm(alg)
    if priv.public.family != "RSA":
        raise WrapFailure("key transport needs an RSA private key")
    nums = priv.private.private_numbers()
    pubn = nums.public_numbers
    k = _modulus_len(priv.private)
    if len(wrapped) != k:
        raise WrapFailure("wrapped key length does not match the modulus")
    c = int.from_bytes(wrapped, "big")
    if c >= pubn.n:
        raise WrapFailure("wrapped key out of range")
    m1 = pow(c, nums.dmp1, nums.p)
    m2 = pow(c, nums.dmq1, nums.q)
    m = m2 + nums.q * ((nums.iqmp * (m1 - m2)) % nums.p)
    em = m.to_bytes(k, "big")
    sep = em.find(b"\x00", 2)
    want = SYMMETRIC[alg][1]
    ok = em[0] == 0 and em[1] == 2 and sep >= 10 and k - sep - 1 == want
    key = em[sep + 1:] if ok else b""
    if not ok or (alg == "TRIPLEDES-CBC" and not has_des_parity(key)):
        raise WrapFailure("key transport decoding failed")
    return SymKey(alg, key)


# ---------- signatures ----------

def sign(sig_alg: str, priv: KeyPair, msg: bytes) -> bytes:
    family = SIGNATURE.get(sig_alg)
    if family is None:
        raise UnknownAlgorithm(sig_alg)
    if priv.public.family != family:
        raise KeyMismatch(f"{sig_alg} cannot sign with a {priv.alg} key")
    if family == "RSA":
        return priv.private.sign(msg, asympad.PKCS1v15(), hashes.SHA1())
    return priv.private.sign(msg, hashes.SHA1())


def verify(sig_alg: str, pub: PublicKey, msg: bytes, sig: bytes) -> bool:
    family = SIGNATURE.get(sig_alg)
    if family is None:
        raise UnknownAlgorithm(sig_alg)
    if pub.family != family:
        return False
    try:
        if family == "RSA":
            pub.key.verify(sig, msg, asympad.PKCS1v15(), hashes.SHA1())
        else:
            pub.key.verify(sig, msg, hashes.SHA1())
    except (InvalidSignature, ValueError):
        return False
    return True


def check_signature(sig_alg: str, pub: PublicKey, msg: bytes, sig: bytes) -> None:
    """Raising variant of :func:`verify`."""
    if not verify(sig_alg, pub, msg, sig):
        raise MalformedSignature(f"{sig_alg} signature does not verify")


# ---------- identities and trust ----------

@dataclass(frozen=True)
class Identity:
    """A named principal holding one or more key pairs."""

    name: str
    keys: tuple[KeyPair, ...]

    @classmethod
    def generate(
        cls,
        name: str,
        seed: RandomSource = None,
        algs: Iterable[str] = ("RSA-1024", "RSA-2048", "DSA-1024"),
    ) -> Identity:
        r = as_rng(seed)
        return cls(name, tuple(generate_keypair(a, r) for a in algs))

    def signing_key(self, sig_alg: str) -> KeyPair:
        family = SIGNATURE.get(sig_alg)
        if family is None:
            raise UnknownAlgorithm(sig_alg)
        for kp in self.keys:
            if kp.public.family == family:
                return kp
        raise KeyMismatch(f"{self.name} holds no key for {sig_alg}")

    def transport_key(self, wrap_alg: str) -> KeyPair:
        bits = KEY_WRAP.get(wrap_alg)
        if bits is None:
            raise UnknownAlgorithm(wrap_alg)
        for kp in self.keys:
            if kp.public.family == "RSA" and kp.public.bits == bits:
                return kp
        raise KeyMismatch(f"{self.name} holds no RSA-{bits} key")

    def key(self, key_id: str) -> KeyPair | None:
        return next((kp for kp in self.keys if kp.key_id == key_id), None)

    @property
    def key_ids(self) -> tuple[str, ...]:
        return tuple(kp.key_id for kp in self.keys)


@dataclass
class TrustEntry:
    public: PublicKey
    roles: set[str] = field(default_factory=set)
    owner: str | None = None


class TrustStore:
    """key-id -> public key with role tags and an optional owner label.

    Keys sharing an owner belong to one principal; that is how a responder
    finds an RSA transport key for a peer that signed with DSA.
    """

    def __init__(self) -> None:
        self._entries: dict[str, TrustEntry] = {}

    def add(self, public: PublicKey, role: str, owner: str | None = None) -> None:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        entry = self._entries.setdefault(public.key_id, TrustEntry(public))
        entry.roles.add(role)
        if owner is not None:
            entry.owner = owner

    def add_identity(self, ident: Identity, role: str) -> None:
        for kp in ident.keys:
            self.add(kp.public, role, ident.name)

    def get(self, key_id: str) -> TrustEntry | None:
        return self._entries.get(key_id)

    def has_role(self, key_id: str, role: str) -> bool:
        e = self._entries.get(key_id)
        return e is not None and role in e.roles

    def owner_of(self, key_id: str) -> str | None:
        e = self._entries.get(key_id)
        return e.owner if e else None

    def recipient_key(self, key_id: str, wrap_alg: str) -> PublicKey | None:
        """RSA transport key for the principal behind ``key_id``."""
        bits = KEY_WRAP[wrap_alg]
        e = self._entries.get(key_id)
        if e is None:
            return None
        if e.public.family == "RSA" and e.public.bits == bits:
            return e.public
        if e.owner is None:
            return None
        for other in self._entries.values():
            if other.owner == e.owner and other.public.family == "RSA" and other.public.bits == bits:
                return other.public
        return None

    def __contains__(self, key_id: str) -> bool:
        return key_id in self._entries

    def __iter__(self) -> Iterator[TrustEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def dumps(self) -> str:
        lines = []
        for kid, e in sorted(self._entries.items()):
            b64 = base64.b64encode(e.public.der()).decode()
            for role in sorted(e.roles):
                lines.append(" ".join(filter(None, [kid, role, b64, e.owner])))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def loads(cls, text: str) -> TrustStore:
        store = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"trust store line {n}: expected 'key-id role base64 [owner]'")
            pub = PublicKey.from_der(base64.b64decode(parts[2]))
            if pub.key_id != parts[0]:
                raise ValueError(f"trust store line {n}: key-id does not match public key")
            store.add(pub, parts[1], parts[3] if len(parts) == 4 else None)
        return store


# ---------- key files ----------

def dump_keypair(kp: KeyPair, owner: str | None = None) -> str:
    priv = kp.private.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    lines = [
        f"alg {kp.alg}",
        f"key-id {kp.key_id}",
        f"private {base64.b64encode(priv).decode()}",
        f"public {base64.b64encode(kp.public.der()).decode()}",
    ]
    if owner:
        lines.append(f"owner {owner}")
    return "\n".join(lines) + "\n"


def load_keypairs(text: str) -> list[tuple[KeyPair, str | None]]:
    """Parse one or more blank-line separated key records."""
    out: list[tuple[KeyPair, str | None]] = []
    for block in text.strip().split("\n\n"):
        fields = dict(line.split(" ", 1) for line in block.strip().splitlines() if line.strip())
        try:
            priv = serialization.load_der_private_key(base64.b64decode(fields["private"]), None)
        except KeyError as exc:
            raise ValueError(f"key record is missing {exc}") from None
        kp = KeyPair.from_private(priv)
        if fields.get("alg", kp.alg) != kp.alg or fields.get("key-id", kp.key_id) != kp.key_id:
            raise ValueError("key record header does not match its key material")
        out.append((kp, fields.get("owner")))
    return out
