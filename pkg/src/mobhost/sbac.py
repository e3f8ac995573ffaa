"""SBAC-lite: policies as ground atoms plus Horn rules.

Text format::

    # comment
    hasRole(alice, journalist).
    permit(S, Op, O) :- principal(S, P), hasRole(P, journalist), category(O, media).
    obligation(S, Op, O, redact-location) :- requested(S, Op, O), category(O, location).

Variables start with an uppercase letter or ``_``. Constants are bare
lowercase names, quoted strings, integers, ISO-8601 UTC instants and
``geo(lat, lon)`` points. ``permit/3``, ``deny/3`` and ``obligation/4`` are
decision predicates: they may only be derived by rules.

Saturation is semi-naive bottom-up evaluation to the least fixpoint.
Decisions combine deny-overrides with default-deny.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Union

from .errors import CapacityExceeded, PolicySyntaxError, ReservedPredicate, UnsafeRule
from .timeutil import format_instant, parse_instant

DEFAULT_FACT_CAP = 1_000_000
DECISION_PREDICATES = {"permit": 3, "deny": 3, "obligation": 4}
REQUESTED = "requested"


# ---------- terms ----------

@dataclass(frozen=True, order=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, order=True)
class Instant:
    ms: int

    def __str__(self) -> str:
        return format_instant(self.ms)


@dataclass(frozen=True, order=True)
class Geo:
    lat: float
    lon: float

    def __str__(self) -> str:
        return f"geo({self.lat:g},{self.lon:g})"


Const = Union[str, int, Instant, Geo]
Term = Union[Const, Var]

_BARE = re.compile(r"[a-z0-9][A-Za-z0-9_-]*\Z")


def term_text(t: Term) -> str:
    if isinstance(t, str):
        if _BARE.match(t) and not re.fullmatch(r"-?\d+", t) and t != "geo":
            return t
        return '"' + t.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(t)


@dataclass(frozen=True, order=True)
class Atom:
    pred: str
    args: tuple[Term, ...] = ()

    @property
    def ground(self) -> bool:
        return not any(isinstance(a, Var) for a in self.args)

    def variables(self) -> set[str]:
        return {a.name for a in self.args if isinstance(a, Var)}

    def __str__(self) -> str:
        return f"{self.pred}({', '.join(term_text(a) for a in self.args)})"


Fact = Atom


def fact(pred: str, *args: Const) -> Atom:
    return Atom(pred, tuple(args))


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: tuple[Atom, ...]

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError("rule needs at least one antecedent")
        bound = set().union(*(a.variables() for a in self.body))
        for a in self.head.args:
            if isinstance(a, Var) and a.name not in bound:
                raise UnsafeRule(a.name)
        for a in self.body:
            if a.pred in DECISION_PREDICATES:
                raise ReservedPredicate(f"{a.pred} may not appear in an antecedent")

    def __str__(self) -> str:
        return f"{self.head} :- {', '.join(map(str, self.body))}."


@dataclass(frozen=True)
class Policy:
    name: str = "policy"
    facts: frozenset[Atom] = frozenset()
    rules: tuple[Rule, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "facts", frozenset(self.facts))
        object.__setattr__(self, "rules", tuple(dict.fromkeys(self.rules)))
        for f in self.facts:
            if not f.ground:
                raise ValueError(f"fact {f} is not ground")
            check_not_reserved(f)

    def union(self, *others: Policy, name: str | None = None) -> Policy:
        facts = set(self.facts)
        rules = list(self.rules)
        for o in others:
            facts |= o.facts
            rules.extend(o.rules)
        return Policy(name or self.name, frozenset(facts), tuple(rules))

    def __str__(self) -> str:
        lines = [f"{f}." for f in sorted(self.facts, key=str)]
        lines += [str(r) for r in self.rules]
        return "\n".join(lines) + "\n"


def check_not_reserved(f: Atom) -> None:
    if f.pred in DECISION_PREDICATES:
        raise ReservedPredicate(f"{f.pred} facts can only be derived, not asserted: {f}")


# ---------- parser ----------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<if>:-)
  | (?P<punct>[(),.])
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<instant>\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(?:\.\d{1,3})?Z)
  | (?P<number>-?\d+(?:\.\d+)?(?![A-Za-z0-9_]))
  | (?P<name>[A-Za-z0-9_][A-Za-z0-9_-]*)
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line = 0, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise PolicySyntaxError(f"unexpected character {text[pos]!r}", line)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), line))
        line += m.group().count("\n")
        pos = m.end()
    toks.append(_Tok("eof", "", line))
    return toks


class _PolicyParser:
    def __init__(self, text: str) -> None:
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self, kind: str, text: str | None = None) -> _Tok:
        t = self.tok
        if t.kind != kind or (text is not None and t.text != text):
            want = repr(text) if text else kind
            got = repr(t.text) if t.text else "end of input"
            raise PolicySyntaxError(f"expected {want}, got {got}", t.line)
        self.i += 1
        return t

    def at(self, kind: str, text: str | None = None) -> bool:
        return self.tok.kind == kind and (text is None or self.tok.text == text)

    def number(self) -> float:
        t = self.take("number")
        return float(t.text)

    def term(self) -> Term:
        t = self.tok
        if t.kind == "string":
            self.i += 1
            return re.sub(r"\\(.)", r"\1", t.text[1:-1])
        if t.kind == "instant":
            self.i += 1
            return Instant(parse_instant(t.text if "." in t.text else t.text[:-1] + ".000Z"))
        if t.kind == "number":
            self.i += 1
            if "." in t.text:
                raise PolicySyntaxError("only integers are allowed outside geo(...)", t.line)
            return int(t.text)
        if t.kind == "name":
            self.i += 1
            if t.text[0].isupper() or t.text[0] == "_":
                return Var(t.text)
            if t.text == "geo" and self.at("punct", "("):
                self.take("punct", "(")
                lat = self.number()
                self.take("punct", ",")
                lon = self.number()
                self.take("punct", ")")
                return Geo(lat, lon)
            return t.text
        raise PolicySyntaxError(f"expected a term, got {t.text or 'end of input'!r}", t.line)

    def atom(self) -> Atom:
        t = self.take("name")
        if not (t.text[0].isalpha() and t.text[0].islower()):
            raise PolicySyntaxError(f"predicate names start lowercase: {t.text!r}", t.line)
        args: list[Term] = []
        if self.at("punct", "("):
            self.take("punct", "(")
            args.append(self.term())
            while self.at("punct", ","):
                self.take("punct", ",")
                args.append(self.term())
            self.take("punct", ")")
        return Atom(t.text, tuple(args))

    def program(self, name: str) -> Policy:
        facts: list[Atom] = []
        rules: list[Rule] = []
        anon = 0
        while not self.at("eof"):
            line = self.tok.line
            head = self.atom()
            if self.at("if"):
                self.take("if")
                body = [self.atom()]
                while self.at("punct", ","):
                    self.take("punct", ",")
                    body.append(self.atom())
                self.take("punct", ".")
                # each bare `_` is a distinct variable
                fixed = []
                for a in body:
                    args = []
                    for x in a.args:
                        if isinstance(x, Var) and x.name == "_":
                            anon += 1
                            x = Var(f"_{anon}")
                        args.append(x)
                    fixed.append(Atom(a.pred, tuple(args)))
                op = head.args[1] if head.pred in DECISION_PREDICATES and len(head.args) > 1 else None
                if isinstance(op, Var) and all(op not in a.args for a in fixed):
                    # unconstrained operation slot: the rule covers whatever operation is requested
                    anon += 2
                    fixed.append(Atom(REQUESTED, (Var(f"_{anon - 1}"), op, Var(f"_{anon}"))))
                try:
                    rules.append(Rule(head, tuple(fixed)))
                except UnsafeRule as exc:
                    raise UnsafeRule(exc.variable, line) from None
                except ReservedPredicate as exc:
                    raise PolicySyntaxError(str(exc), line) from None
            else:
                self.take("punct", ".")
                if not head.ground:
                    raise UnsafeRule(sorted(head.variables())[0], line)
                if head.pred in DECISION_PREDICATES:
                    raise PolicySyntaxError(f"{head.pred} may only appear as a rule consequent", line)
                facts.append(head)
        return Policy(name, frozenset(facts), tuple(rules))


def parse_policy(text: str, name: str = "policy") -> Policy:
    return _PolicyParser(text).program(name)


def parse_facts(text: str) -> frozenset[Atom]:
    """Ground facts only (annotation and descriptor files)."""
    pol = parse_policy(text)
    if pol.rules:
        raise PolicySyntaxError("rules are not allowed in a fact file", 1)
    return pol.facts


# ---------- saturation ----------

Binding = Mapping[str, Const]


def _match(atom: Atom, args: tuple[Const, ...], env: dict[str, Const]) -> dict[str, Const] | None:
    if len(args) != len(atom.args):
        return None
    out = env
    for pat, val in zip(atom.args, args):
        if isinstance(pat, Var):
            bound = out.get(pat.name, _MISSING)
            if bound is _MISSING:
                if out is env:
                    out = dict(env)
                out[pat.name] = val
            elif bound != val or type(bound) is not type(val):
                return None
        elif pat != val or type(pat) is not type(val):
            return None
    return out


_MISSING = object()


class _Index:
    def __init__(self) -> None:
        self.by_pred: dict[str, set[tuple[Const, ...]]] = {}

    def add(self, f: Atom) -> bool:
        rows = self.by_pred.setdefault(f.pred, set())
        if f.args in rows:
            return False
        rows.add(f.args)
        return True

    def rows(self, pred: str) -> Iterable[tuple[Const, ...]]:
        return self.by_pred.get(pred, ())


def _join(body: tuple[Atom, ...], sources: list[_Index], env: dict[str, Const], i: int = 0) -> Iterator[dict]:
    if i == len(body):
        yield env
        return
    atom = body[i]
    for row in sources[i].rows(atom.pred):
        e = _match(atom, row, env)
        if e is not None:
            yield from _join(body, sources, e, i + 1)


def _instantiate(head: Atom, env: Binding) -> Atom:
    return Atom(head.pred, tuple(env[a.name] if isinstance(a, Var) else a for a in head.args))


def saturate(facts: Iterable[Atom], rules: Iterable[Rule], cap: int = DEFAULT_FACT_CAP) -> frozenset[Atom]:
    """Least fixpoint of ``rules`` over ``facts`` (semi-naive)."""
    rules = tuple(rules)
    full = _Index()
    delta = _Index()
    count = 0
    for f in facts:
        if full.add(f):
            delta.add(f)
            count += 1
    if count > cap:
        raise CapacityExceeded(f"{count} facts exceed the cap of {cap}")

    while delta.by_pred:
        new = _Index()
        for rule in rules:
            n = len(rule.body)
            for i in range(n):
                if rule.body[i].pred not in delta.by_pred:
                    continue
                sources = [full] * n
                sources[i] = delta
                for env in _join(rule.body, sources, {}):
                    derived = _instantiate(rule.head, env)
                    if derived.args not in full.by_pred.get(derived.pred, ()):
                        new.add(derived)
        delta = _Index()
        for pred, rows in new.by_pred.items():
            for args in rows:
                f = Atom(pred, args)
                if full.add(f):
                    delta.add(f)
                    count += 1
        if count > cap:
            raise CapacityExceeded(f"saturation exceeded the cap of {cap} facts")

    return frozenset(Atom(p, a) for p, rows in full.by_pred.items() for a in rows)


# ---------- decisions ----------

class Effect(str, enum.Enum):
    PERMIT = "Permit"
    DENY = "Deny"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AccessRequest:
    subject: str
    operation: str
    object: str
    context: frozenset[Atom] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "context", frozenset(self.context))

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.subject, self.operation, self.object)


@dataclass(frozen=True)
class Decision:
    effect: Effect
    obligations: tuple[str, ...] = ()
    explanation: tuple[str, ...] = ()
    cause: str = ""

    def __post_init__(self) -> None:
        if self.effect is Effect.DENY and self.obligations:
            raise ValueError("a Deny decision carries no obligations")

    @property
    def permitted(self) -> bool:
        return self.effect is Effect.PERMIT

    @classmethod
    def deny(cls, cause: str) -> Decision:
        return cls(Effect.DENY, (), (), cause)


def decide(policy: Policy, req: AccessRequest, cap: int = DEFAULT_FACT_CAP) -> Decision:
    for f in req.context:
        check_not_reserved(f)
    s, op, o = req.triple
    base = set(policy.facts) | set(req.context) | {Atom(REQUESTED, (s, op, o))}
    derived = saturate(base, policy.rules, cap)
    permit = Atom("permit", (s, op, o))
    deny = Atom("deny", (s, op, o))
    obligations = sorted(
        str(f.args[3])
        for f in derived
        if f.pred == "obligation" and len(f.args) == 4 and f.args[:3] == (s, op, o)
    )
    explanation = tuple(
        sorted(
            str(f)
            for f in derived
            if f.pred in DECISION_PREDICATES and f.args[:3] == (s, op, o)
        )
    )
    if deny in derived:
        return Decision(Effect.DENY, (), explanation, "deny-rule")
    if permit not in derived:
        return Decision(Effect.DENY, (), explanation, "default-deny")
    return Decision(Effect.PERMIT, tuple(obligations), explanation, "permit")
