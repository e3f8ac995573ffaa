from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobhost import sbac
from mobhost.errors import CapacityExceeded, PolicySyntaxError, ReservedPredicate, UnsafeRule
from mobhost.sbac import AccessRequest, Atom, Effect, Geo, Instant, Policy, Rule, Var, decide, parse_policy, saturate
from mobhost.timeutil import parse_instant

from .oracles import is_var, naive_saturate, oracle_effect, random_program


def to_atom(t) -> Atom:
    return Atom(t[0], tuple(Var(a[1:]) if is_var(a) else a for a in t[1]))


def to_rules(rules) -> list[Rule]:
    return [Rule(to_atom(h), tuple(to_atom(b) for b in body)) for h, body in rules]


def from_atom(a: Atom):
    return (a.pred, a.args)


# ---------- parsing ----------

def test_single_fact():
    p = parse_policy("hasRole(alice, journalist).")
    assert p.facts == {Atom("hasRole", ("alice", "journalist"))}
    assert p.rules == ()


def test_safe_rule_example():
    p = parse_policy("permit(S,Op,O) :- hasRole(S,journalist), category(O,media).")
    assert len(p.rules) == 1
    r = p.rules[0]
    assert r.head == Atom("permit", (Var("S"), Var("Op"), Var("O")))
    # the operation slot is bound to the requested operation
    assert r.body[-1].pred == "requested" and r.body[-1].args[1] == Var("Op")


def test_unsafe_rule_names_variable():
    with pytest.raises(UnsafeRule) as ei:
        parse_policy("permit(S,Op,O) :- category(O,media).")
    assert ei.value.variable == "S"
    with pytest.raises(UnsafeRule) as ei:
        parse_policy("\n\nreach(X, Z) :- edge(X, Y).")
    assert ei.value.variable == "Z" and ei.value.line == 3


def test_syntax_error_line():
    with pytest.raises(PolicySyntaxError) as ei:
        parse_policy("a(b).\n# comment\nbroken(x\n")
    assert ei.value.line == 4 or ei.value.line == 3


def test_reserved_predicates_only_in_heads():
    with pytest.raises(PolicySyntaxError):
        parse_policy("permit(a, b, c).")
    with pytest.raises(PolicySyntaxError):
        parse_policy("ok(S) :- permit(S, x, y).")
    with pytest.raises(ReservedPredicate):
        Rule(Atom("ok", (Var("S"),)), (Atom("deny", (Var("S"), "x", "y")),))


def test_typed_literals():
    p = parse_policy('at(x, geo(50.5, -6.25)). t(x, 2026-01-01T00:00:00Z). n(x, 42). s(x, "Hello World").')
    vals = {a.pred: a.args[1] for a in p.facts}
    assert vals["at"] == Geo(50.5, -6.25)
    assert vals["t"] == Instant(parse_instant("2026-01-01T00:00:00.000Z"))
    assert vals["n"] == 42
    assert vals["s"] == "Hello World"


def test_print_parse_roundtrip():
    text = 'permit(S, Op, O) :- requested(S, Op, O), principal(S, N), hasRole(N, journalist).\nc("Echo", media).\n'
    p = parse_policy(text)
    assert parse_policy(str(p)) == p


# ---------- saturation ----------

def test_empty_rules_identity():
    facts = {Atom("e", ("a", "b"))}
    assert saturate(facts, []) == facts


def test_transitive_closure_chain():
    text = """
    edge(n1, n2). edge(n2, n3). edge(n3, n4). edge(n4, n5).
    reach(X, Y) :- edge(X, Y).
    reach(X, Z) :- reach(X, Y), edge(Y, Z).
    """
    p = parse_policy(text)
    got = {f for f in saturate(p.facts, p.rules) if f.pred == "reach"}
    assert len(got) == 10
    oracle_facts = {from_atom(f) for f in p.facts}
    oracle_rules = [
        (("reach", ("?X", "?Y")), [("edge", ("?X", "?Y"))]),
        (("reach", ("?X", "?Z")), [("reach", ("?X", "?Y")), ("edge", ("?Y", "?Z"))]),
    ]
    expected = {to_atom(f) for f in naive_saturate(oracle_facts, oracle_rules) if f[0] == "reach"}
    assert got == expected


def test_capacity_exceeded():
    text = "n(a). n(b). n(c). n(d). n(e).\npair(X, Y, Z) :- n(X), n(Y), n(Z)."
    p = parse_policy(text)
    with pytest.raises(CapacityExceeded):
        saturate(p.facts, p.rules, cap=50)
    assert len(saturate(p.facts, p.rules, cap=1000)) == 5 + 125


def run_oracle_program(seed: int):
    r = random.Random(seed)
    _, facts, rules, (s, op, o) = random_program(r)
    fset = {to_atom(f) for f in facts}
    rset = to_rules(rules)
    got = saturate(fset, rset)
    want = {to_atom(f) for f in naive_saturate(facts, rules)}
    assert got == want, f"seed {seed}"
    eff, obl = oracle_effect(facts, rules, s, op, o)
    d = decide(Policy("p", fset, tuple(rset)), AccessRequest(s, op, o))
    assert (d.effect.value, list(d.obligations)) == (eff, obl), f"seed {seed}"
    return rset


def test_random_programs_match_naive_oracle():
    nontrivial = 0
    for seed in range(520):
        rules = run_oracle_program(seed)
        nontrivial += bool(rules)
    assert nontrivial > 400


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_saturation_idempotent(seed):
    _, facts, rules, _ = random_program(random.Random(seed))
    fset = {to_atom(f) for f in facts}
    rset = to_rules(rules)
    once = saturate(fset, rset)
    assert saturate(once, rset) == once


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32))
def test_monotone_without_deny_rules(seed, seed2):
    r = random.Random(seed)
    consts, facts, rules, (s, op, o) = random_program(r)
    rules = [(h, b) for h, b in rules if h[0] != "deny"]
    rset = tuple(to_rules(rules))
    base = Policy("p", {to_atom(f) for f in facts}, rset)
    d1 = decide(base, AccessRequest(s, op, o))
    r2 = random.Random(seed2)
    more = {Atom(f"p{r2.randrange(5)}", tuple(r2.choice(consts) for _ in range(r2.randint(1, 3)))) for _ in range(5)}
    d2 = decide(Policy("p", base.facts | more, rset), AccessRequest(s, op, o))
    if d1.effect is Effect.PERMIT:
        assert d2.effect is Effect.PERMIT


# ---------- decisions ----------

REQ = AccessRequest("alice", "read", "svc")


def test_empty_policy_denies():
    d = decide(Policy(), REQ)
    assert d.effect is Effect.DENY and d.cause == "default-deny" and d.obligations == ()


def test_matching_permit():
    p = parse_policy("permit(S, Op, O) :- requested(S, Op, O), hasRole(S, journalist).")
    d = decide(p, AccessRequest("alice", "read", "svc", {Atom("hasRole", ("alice", "journalist"))}))
    assert d.permitted
    assert "permit(alice, read, svc)" in d.explanation


def test_deny_overrides():
    p = parse_policy(
        "permit(S, Op, O) :- requested(S, Op, O).\n"
        "deny(S, Op, O) :- requested(S, Op, O), banned(S).\n"
        "obligation(S, Op, O, f) :- requested(S, Op, O)."
    )
    d = decide(p, AccessRequest("alice", "read", "svc", {Atom("banned", ("alice",))}))
    assert d.effect is Effect.DENY and d.cause == "deny-rule" and d.obligations == ()


def test_obligations_sorted_and_scoped():
    p = parse_policy(
        "permit(S, Op, O) :- requested(S, Op, O).\n"
        "obligation(S, Op, O, zeta) :- requested(S, Op, O).\n"
        "obligation(S, Op, O, alpha) :- requested(S, Op, O).\n"
        "obligation(bob, read, svc, other) :- requested(S, Op, O)."
    )
    assert decide(p, REQ).obligations == ("alpha", "zeta")


def test_reserved_context_rejected():
    with pytest.raises(ReservedPredicate):
        decide(Policy(), AccessRequest("a", "b", "c", {Atom("permit", ("a", "b", "c"))}))


def test_decide_is_pure():
    p = parse_policy("permit(S, Op, O) :- requested(S, Op, O), ok(S).")
    req = AccessRequest("alice", "read", "svc", {Atom("ok", ("alice",))})
    assert decide(p, req) == decide(p, req)


def test_policy_union():
    a = parse_policy("f(a). permit(S, Op, O) :- requested(S, Op, O), f(S).")
    b = parse_policy("g(b).")
    u = a.union(b)
    assert u.facts == a.facts | b.facts and u.rules == a.rules
