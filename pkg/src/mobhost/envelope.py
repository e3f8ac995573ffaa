"""SOAP-lite message model and its canonical byte form.

The wire grammar is a restricted XML subset: elements, attributes and
text, no namespaces, no declarations. Canonical serialization sorts
attributes bytewise by name, writes childless elements as ``<x/>``, emits
no whitespace between elements and escapes ``& < > "`` in text and
attribute values. That byte form is what gets signed and encrypted.
"""

from __future__ import annotations

import base64
import binascii
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

from . import cryptokit
from .errors import InvalidToken, MalformedMessage, UnknownAlgorithm
from .timeutil import format_instant, parse_instant

TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.-]*\Z")

_ESCAPES = {"&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}
_ESCAPE_RE = re.compile(r'[&<>"]')
_ENTITY_RE = re.compile(r"&(?:amp|lt|gt|quot);|&")


def check_token(value: str, what: str = "token") -> str:
    if not isinstance(value, str) or not TOKEN_RE.match(value):
        raise InvalidToken(f"invalid {what}: {value!r}")
    return value


def _escape(text: str) -> str:
    return _ESCAPE_RE.sub(lambda m: _ESCAPES[m.group()], text)


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str, what: str = "base64 content") -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError):
        raise MalformedMessage(f"invalid {what}") from None


# ---------- generic tree ----------

Child = Union["Node", str]


@dataclass(frozen=True)
class Node:
    """Element with sorted attributes and ordered children.

    Children are normalized on construction: empty strings are dropped and
    adjacent text runs merged, so every tree has exactly one canonical form.
    """

    name: str
    attrs: tuple[tuple[str, str], ...] = ()
    children: tuple[Child, ...] = ()

    def __init__(
        self,
        name: str,
        attrs: Mapping[str, str] | Iterable[tuple[str, str]] = (),
        children: Iterable[Child] = (),
    ) -> None:
        check_token(name, "element name")
        pairs = list(attrs.items()) if isinstance(attrs, Mapping) else list(attrs)
        names = [k for k, _ in pairs]
        if len(set(names)) != len(names):
            raise InvalidToken(f"duplicate attribute on <{name}>")
        for k, v in pairs:
            check_token(k, "attribute name")
            if not isinstance(v, str):
                raise TypeError(f"attribute {k} must be text")
        merged: list[Child] = []
        for c in children:
            if isinstance(c, str):
                if not c:
                    continue
                if merged and isinstance(merged[-1], str):
                    merged[-1] = merged[-1] + c
                    continue
            elif not isinstance(c, Node):
                raise TypeError(f"child of <{name}> must be Node or str")
            merged.append(c)
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "attrs", tuple(sorted(pairs, key=lambda kv: kv[0].encode())))
        object.__setattr__(self, "children", tuple(merged))

    def attr(self, key: str) -> str:
        for k, v in self.attrs:
            if k == key:
                return v
        raise KeyError(key)

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.attrs:
            if k == key:
                return v
        return default

    @property
    def text(self) -> str:
        return "".join(c for c in self.children if isinstance(c, str))

    @property
    def elements(self) -> list[Node]:
        return [c for c in self.children if isinstance(c, Node)]

    def to_node(self) -> Node:
        return self


def _write(node: Node, out: list[str]) -> None:
    out.append("<" + node.name)
    for k, v in node.attrs:
        out.append(f' {k}="{_escape(v)}"')
    if not node.children:
        out.append("/>")
        return
    out.append(">")
    for c in node.children:
        if isinstance(c, str):
            out.append(_escape(c))
        else:
            _write(c, out)
    out.append(f"</{node.name}>")


def canonical_bytes(obj) -> bytes:
    """Canonical UTF-8 encoding of a :class:`Node` or anything with ``to_node()``."""
    out: list[str] = []
    _write(obj.to_node(), out)
    return "".join(out).encode("utf-8")


# ---------- parser ----------

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_.-]*")
_ATTR = re.compile(r'\s+([A-Za-z_][A-Za-z0-9_.-]*)="([^"<]*)"')
_WS = re.compile(r"\s*")
_TEXT = re.compile(r"[^<]+")


class _Parser:
    def __init__(self, text: str) -> None:
        self.s = text
        self.i = 0

    def fail(self, msg: str) -> MalformedMessage:
        return MalformedMessage(msg, self.i)

    def unescape(self, raw: str, at: int) -> str:
        def sub(m: re.Match) -> str:
            if m.group() == "&":
                raise MalformedMessage("bare '&' in text", at + m.start())
            return _UNESCAPES[m.group()]

        return _ENTITY_RE.sub(sub, raw)

    def document(self) -> Node:
        self.i = _WS.match(self.s, self.i).end()
        node = self.element()
        self.i = _WS.match(self.s, self.i).end()
        if self.i != len(self.s):
            raise self.fail("trailing content after root element")
        return node

    def element(self) -> Node:
        s = self.s
        if not s.startswith("<", self.i):
            raise self.fail("expected '<'")
        self.i += 1
        m = _NAME.match(s, self.i)
        if not m:
            raise self.fail("expected element name")
        name = m.group()
        self.i = m.end()
        attrs: list[tuple[str, str]] = []
        seen: set[str] = set()
        while True:
            m = _ATTR.match(s, self.i)
            if not m:
                break
            if m.group(1) in seen:
                raise self.fail(f"duplicate attribute {m.group(1)!r}")
            seen.add(m.group(1))
            attrs.append((m.group(1), self.unescape(m.group(2), m.start(2))))
            self.i = m.end()
        self.i = _WS.match(s, self.i).end()
        if s.startswith("/>", self.i):
            self.i += 2
            return Node(name, attrs)
        if not s.startswith(">", self.i):
            raise self.fail(f"unterminated start tag <{name}>")
        self.i += 1
        children: list[Child] = []
        while True:
            if self.i >= len(s):
                raise self.fail(f"unexpected end of input inside <{name}>")
            if s.startswith("</", self.i):
                self.i += 2
                m = _NAME.match(s, self.i)
                if not m or m.group() != name:
                    raise self.fail(f"mismatched end tag for <{name}>")
                self.i = _WS.match(s, m.end()).end()
                if not s.startswith(">", self.i):
                    raise self.fail("expected '>'")
                self.i += 1
                break
            if s.startswith("<", self.i):
                children.append(self.element())
            else:
                m = _TEXT.match(s, self.i)
                children.append(self.unescape(m.group(), m.start()))
                self.i = m.end()
        if any(isinstance(c, Node) for c in children):
            # whitespace between elements is insignificant
            children = [c for c in children if not (isinstance(c, str) and not c.strip())]
        return Node(name, attrs, children)


def parse_node(data: bytes) -> Node:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedMessage("invalid UTF-8", exc.start) from None
    try:
        return _Parser(text).document()
    except InvalidToken as exc:
        raise MalformedMessage(str(exc)) from None
    except RecursionError:
        raise MalformedMessage("element nesting too deep") from None


# ---------- envelope model ----------

@dataclass(frozen=True)
class PlainBody:
    service: str
    operation: str
    payload: bytes = b""

    def __post_init__(self) -> None:
        check_token(self.service, "service name")
        check_token(self.operation, "operation name")

    def to_node(self) -> Node:
        return Node("Service", {"name": self.service, "op": self.operation}, [b64(self.payload)])

    @classmethod
    def from_node(cls, node: Node) -> PlainBody:
        if node.name != "Service" or node.elements:
            raise MalformedMessage("expected <Service> body element")
        try:
            return cls(node.attr("name"), node.attr("op"), unb64(node.text, "payload"))
        except (KeyError, InvalidToken) as exc:
            raise MalformedMessage(f"bad <Service> element: {exc}") from None


@dataclass(frozen=True)
class EncryptedData:
    alg: str
    iv: bytes
    ciphertext: bytes

    def __post_init__(self) -> None:
        bsize = cryptokit.block_size(self.alg)
        if len(self.iv) != bsize:
            raise ValueError(f"{self.alg} IV must be {bsize} bytes")
        if not self.ciphertext or len(self.ciphertext) % bsize:
            raise ValueError("ciphertext must be a positive multiple of the block size")

    def to_node(self) -> Node:
        return Node("EncryptedData", {"alg": self.alg, "iv": b64(self.iv)}, [b64(self.ciphertext)])

    @classmethod
    def from_node(cls, node: Node) -> EncryptedData:
        if node.name != "EncryptedData" or node.elements:
            raise MalformedMessage("expected <EncryptedData>")
        try:
            return cls(node.attr("alg"), unb64(node.attr("iv"), "iv"), unb64(node.text, "ciphertext"))
        except (KeyError, ValueError, UnknownAlgorithm) as exc:
            raise MalformedMessage(f"bad <EncryptedData>: {exc}") from None


@dataclass(frozen=True)
class Timestamp:
    created: int
    expires: int

    def __post_init__(self) -> None:
        if not self.created < self.expires:
            raise ValueError("timestamp must satisfy created < expires")

    def to_node(self) -> Node:
        return Node(
            "Timestamp",
            {"created": format_instant(self.created), "expires": format_instant(self.expires)},
        )

    @classmethod
    def from_node(cls, node: Node) -> Timestamp:
        try:
            return cls(parse_instant(node.attr("created")), parse_instant(node.attr("expires")))
        except (KeyError, ValueError) as exc:
            raise MalformedMessage(f"bad <Timestamp>: {exc}") from None


@dataclass(frozen=True)
class EncryptedKey:
    alg: str
    key_id: str
    value: bytes

    def to_node(self) -> Node:
        return Node("EncryptedKey", {"alg": self.alg, "keyid": self.key_id}, [b64(self.value)])

    @classmethod
    def from_node(cls, node: Node) -> EncryptedKey:
        try:
            return cls(node.attr("alg"), node.attr("keyid"), unb64(node.text, "wrapped key"))
        except KeyError as exc:
            raise MalformedMessage(f"bad <EncryptedKey>: missing {exc}") from None


@dataclass(frozen=True)
class Signature:
    alg: str
    key_id: str
    value: bytes

    def to_node(self) -> Node:
        return Node("Signature", {"alg": self.alg, "keyid": self.key_id}, [b64(self.value)])

    @classmethod
    def from_node(cls, node: Node) -> Signature:
        try:
            return cls(node.attr("alg"), node.attr("keyid"), unb64(node.text, "signature"))
        except KeyError as exc:
            raise MalformedMessage(f"bad <Signature>: missing {exc}") from None


@dataclass(frozen=True)
class SecurityHeader:
    timestamp: Timestamp
    encrypted_key: EncryptedKey
    signature: Signature

    def to_node(self) -> Node:
        return Node(
            "Security",
            children=[self.timestamp.to_node(), self.encrypted_key.to_node(), self.signature.to_node()],
        )

    @classmethod
    def from_node(cls, node: Node) -> SecurityHeader:
        kids = node.elements
        if node.text.strip() or [k.name for k in kids] != ["Timestamp", "EncryptedKey", "Signature"]:
            raise MalformedMessage("<Security> must hold Timestamp, EncryptedKey, Signature in order")
        return cls(
            Timestamp.from_node(kids[0]),
            EncryptedKey.from_node(kids[1]),
            Signature.from_node(kids[2]),
        )


HeaderBlock = Union[SecurityHeader, Node]
Body = Union[PlainBody, EncryptedData]


@dataclass(frozen=True)
class Envelope:
    header: tuple[HeaderBlock, ...] = ()
    body: Body = field(default_factory=lambda: PlainBody("Echo", "echo"))

    def __post_init__(self) -> None:
        object.__setattr__(self, "header", tuple(self.header))
        n_sec = sum(
            isinstance(h, SecurityHeader) or (isinstance(h, Node) and h.name == "Security")
            for h in self.header
        )
        if n_sec > 1:
            raise ValueError("at most one Security header block")
        if not isinstance(self.body, (PlainBody, EncryptedData)):
            raise TypeError("body must be PlainBody or EncryptedData")

    @property
    def security(self) -> SecurityHeader | None:
        return next((h for h in self.header if isinstance(h, SecurityHeader)), None)

    def blocks(self, name: str) -> list[Node]:
        return [h for h in self.header if isinstance(h, Node) and h.name == name]

    def without_security(self) -> tuple[HeaderBlock, ...]:
        return tuple(h for h in self.header if not isinstance(h, SecurityHeader))

    def to_node(self) -> Node:
        return Node(
            "Envelope",
            children=[
                Node("Header", children=[h.to_node() for h in self.header]),
                Node("Body", children=[self.body.to_node()]),
            ],
        )

    def to_bytes(self) -> bytes:
        return canonical_bytes(self)


def build_envelope(service: str, operation: str, payload: bytes = b"") -> Envelope:
    return Envelope((), PlainBody(service, operation, bytes(payload)))


def parse_envelope(data: bytes) -> Envelope:
    root = parse_node(data)
    if root.name != "Envelope" or root.text.strip():
        raise MalformedMessage("root element must be <Envelope>", 0)
    kids = root.elements
    names = [k.name for k in kids]
    if names.count("Body") != 1:
        raise MalformedMessage("envelope must hold exactly one <Body>")
    if names not in (["Header", "Body"], ["Body"]):
        raise MalformedMessage("envelope children must be <Header> then <Body>")
    header: list[HeaderBlock] = []
    if names[0] == "Header":
        if kids[0].text.strip():
            raise MalformedMessage("text inside <Header>")
        for block in kids[0].elements:
            header.append(SecurityHeader.from_node(block) if block.name == "Security" else block)
        if sum(isinstance(h, SecurityHeader) for h in header) > 1:
            raise MalformedMessage("more than one <Security> header block")
    body_node = kids[-1]
    inner = body_node.elements
    if len(inner) != 1 or body_node.text.strip():
        raise MalformedMessage("<Body> must hold exactly one element")
    if inner[0].name == "EncryptedData":
        body: Body = EncryptedData.from_node(inner[0])
    else:
        body = PlainBody.from_node(inner[0])
    return Envelope(tuple(header), body)
