from __future__ import annotations

import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobhost.errors import RetrieverUnavailable, UnknownObligation
from mobhost.guard import (
    AuditLog,
    Guard,
    ObligationRegistry,
    Retrievers,
    StaticRetrievers,
    collect,
    load_retrievers,
    redact_location,
)
from mobhost.sbac import AccessRequest, Atom, Decision, Effect, Instant, parse_facts, parse_policy
from mobhost.timeutil import fixed_clock

from .conftest import EPOCH

POLICY = parse_policy(
    "permit(S, Op, O) :- requested(S, Op, O), principal(S, N), hasRole(N, journalist), category(O, media).\n"
    'obligation(S, Op, O, "redact-location") :- requested(S, Op, O), category(O, media).'
)


def snapshot() -> StaticRetrievers:
    sr = StaticRetrievers()
    sr.add_policy("news", POLICY)
    sr.annotate("news", parse_facts("category(news, media)."))
    sr.describe("kalice", parse_facts("principal(kalice, alice). hasRole(alice, journalist)."))
    sr.describe("kbob", parse_facts("principal(kbob, bob). hasRole(bob, tourist)."))
    return sr


def guard(sr: StaticRetrievers | None = None, **kw) -> Guard:
    return Guard((sr or snapshot()).retrievers(), clock=fixed_clock(EPOCH), **kw)


def test_collect_unions_policies_and_facts():
    sr = snapshot()
    sr.add_policy("news", parse_policy("extra(x)."))
    sr.context = lambda: [Atom("link", ("wifi",))]
    req = AccessRequest("kalice", "read", "news", {Atom("hint", ("h",))})
    policy, facts = collect(req, sr.retrievers())
    assert set(policy.rules) == set(POLICY.rules)
    assert Atom("extra", ("x",)) in policy.facts
    assert {Atom("category", ("news", "media")), Atom("link", ("wifi",)), Atom("hint", ("h",)),
            Atom("hasRole", ("alice", "journalist"))} <= facts


def test_collect_unknown_object_is_empty_policy():
    policy, _ = collect(AccessRequest("kalice", "read", "Nothing"), snapshot().retrievers())
    assert not policy.rules and not policy.facts


def test_collect_reports_failing_source():
    sr = snapshot().retrievers()

    def boom():
        raise OSError("offline")

    sr.cir = boom
    with pytest.raises(RetrieverUnavailable) as ei:
        collect(AccessRequest("kalice", "read", "news"), sr)
    assert ei.value.source == "cir"


def test_permit_with_obligation():
    d = guard().enforce(AccessRequest("kalice", "read", "news"))
    assert d.effect is Effect.PERMIT and d.obligations == ("redact-location",)


@pytest.mark.parametrize("subject", ["kbob", "kunknown"])
def test_other_subjects_denied(subject):
    g = guard()
    assert g.enforce(AccessRequest(subject, "read", "news")).effect is Effect.DENY
    assert len(g.audit) == 1


def test_retriever_fault_is_logged_deny():
    sr = snapshot()

    def boom():
        raise RuntimeError("sensor gone")

    sr.context = boom
    g = guard(sr)
    d = g.enforce(AccessRequest("kalice", "read", "news"))
    assert d.effect is Effect.DENY
    rec = g.audit.records[0]
    assert rec.effect is Effect.DENY and "RetrieverUnavailable" in rec.cause


def test_capacity_exceeded_is_logged_deny():
    sr = snapshot()
    sr.add_policy("news", parse_policy("n(a). n(b). n(c).\nt(X, Y, Z) :- n(X), n(Y), n(Z)."))
    g = guard(sr, fact_cap=20)
    d = g.enforce(AccessRequest("kalice", "read", "news"))
    assert d.effect is Effect.DENY and "CapacityExceeded" in g.audit.records[0].cause


@settings(max_examples=60, deadline=None)
@given(st.sets(st.sampled_from(["pir", "cir", "rir", "subjects"]), min_size=1),
       st.sampled_from([OSError, ValueError, KeyError, RuntimeError]))
def test_fail_safe_under_injected_faults(broken, exc):
    r = snapshot().retrievers()

    def fail(*_):
        raise exc("injected")

    fields = {name: (fail if name in broken else getattr(r, name)) for name in ("pir", "cir", "rir", "subjects")}
    g = Guard(Retrievers(**fields), clock=fixed_clock(EPOCH))
    assert g.enforce(AccessRequest("kalice", "read", "news")).effect is Effect.DENY
    assert g.audit.count(Effect.DENY) == 1 and g.audit.count(Effect.PERMIT) == 0


def test_enforce_deterministic():
    req = AccessRequest("kalice", "read", "news")
    assert guard().enforce(req) == guard().enforce(req)


def test_one_audit_record_per_enforce_concurrently():
    g = guard()
    reqs = [AccessRequest("kalice" if i % 3 else "kbob", "read", "news") for i in range(90)]
    threads = [threading.Thread(target=lambda rs=reqs[i::6]: [g.enforce(q) for q in rs]) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(g.audit) == 90
    assert g.audit.count(Effect.PERMIT) == 60


def test_audit_line_format():
    g = guard()
    g.enforce(AccessRequest("kbob", "read", "news"))
    assert g.audit.lines() == ["2026-01-01T00:00:00.000Z kbob read news Deny default-deny"]


def test_audit_sink_receives_lines():
    seen: list[str] = []
    g = guard(audit=AuditLog(sink=seen.append))
    g.enforce(AccessRequest("kalice", "read", "news"))
    assert seen == g.audit.lines()


def test_post_authorize_redacts_geo():
    g = guard()
    d = g.enforce(AccessRequest("kalice", "read", "news"))
    assert g.post_authorize(d, b"at geo(50.1, -6.25) now") == b"at  now"


def test_post_authorize_identity_without_obligations():
    assert guard().post_authorize(Decision(Effect.PERMIT, ()), b"abc") == b"abc"


def test_post_authorize_order_and_unknown():
    reg = ObligationRegistry({"a": lambda p: p + b"a", "b": lambda p: p + b"b"})
    g = guard(registry=reg)
    assert g.post_authorize(Decision(Effect.PERMIT, ("b", "a")), b"") == b"ba"
    with pytest.raises(UnknownObligation):
        g.post_authorize(Decision(Effect.PERMIT, ("a", "zzz")), b"")
    with pytest.raises(ValueError):
        reg.register("a", lambda p: p)
    with pytest.raises(ValueError):
        g.post_authorize(Decision.deny("x"), b"")


def test_redact_location_only_geo_tokens():
    assert redact_location(b"geo(1,2)|geo( -3.5 , 4 )|geo(x,y)") == b"||geo(x,y)"


def test_load_retrievers_yaml(tmp_path):
    (tmp_path / "news.pol").write_text(POLICY.__str__())
    (tmp_path / "news.ann").write_text("category(news, media).\n")
    (tmp_path / "alice.desc").write_text("principal(kalice, alice). hasRole(alice, journalist).\n")
    (tmp_path / "r.yaml").write_text(
        "objects:\n  news:\n    policies: [news.pol]\n    annotations: [news.ann]\n"
        "subjects:\n  kalice: alice.desc\n  kbob: 'principal(kbob, bob).'\n"
        "context: clock\n"
    )
    sr = load_retrievers(tmp_path / "r.yaml", clock=fixed_clock(EPOCH))
    assert list(sr.context()) == [Atom("now", (Instant(EPOCH),))]
    g = guard(sr)
    assert g.enforce(AccessRequest("kalice", "read", "news")).permitted
    assert not g.enforce(AccessRequest("kbob", "read", "news")).permitted
