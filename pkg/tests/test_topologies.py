from __future__ import annotations

import math
from collections import Counter
from fractions import Fraction

import pytest

from mobhost.errors import ScenarioConfigError
from mobhost.netsim import LinkProfile, Network, Simulator
from mobhost.sbac import Effect
from mobhost.topologies import (
    Invocation,
    ScenarioConfig,
    Topology,
    build_simulator,
    load_scenario,
    run_scenario,
)

from .scenarios import mixed_config, mixed_workload, oracle_effects

ALL = list(Topology)
GUARDED = [Topology.MIDDLEWARE_PROXY, Topology.TOKEN_AUTHORITY, Topology.DELEGATED_AUTHORIZATION]


@pytest.fixture(scope="module")
def runs():
    cfg = mixed_config()
    wl = mixed_workload(20)
    return cfg, wl, {t: run_scenario(t, wl, config=cfg) for t in ALL}


def test_outcomes_match_network_free_oracle(runs):
    cfg, wl, traces = runs
    want = oracle_effects(cfg, wl)
    assert Counter(e[-1] for e in want) == {Effect.PERMIT: 12, Effect.DENY: 8}
    for t, tr in traces.items():
        assert tr.effects() == want, t


def _decision_audit(tr):
    """The audit of whichever actor takes the authorization decision."""
    return tr.audits["authority" if tr.topology is Topology.TOKEN_AUTHORITY else "guard"]


def test_complete_mediation(runs):
    _, _, traces = runs
    for t, tr in traces.items():
        permits = sum(o.effect is Effect.PERMIT for o in tr.outcomes)
        assert len(tr.executions) == permits, t
        if t is not Topology.TOKEN_AUTHORITY:
            assert _decision_audit(tr).count(Effect.PERMIT) == permits, t
        assert tr.audits["host"].count(Effect.PERMIT) == permits, t


def test_proxy_host_sees_only_permitted():
    cfg = mixed_config()
    wl = [Invocation(c, "LocationSnapshot", "snapshot", b"", i * 500)
          for i, c in enumerate(["alice", "bob", "carol", "dave", "alice", "carol", "bob", "alice", "carol", "dave"])]
    tr = run_scenario(Topology.MIDDLEWARE_PROXY, wl, config=cfg)
    assert [o.effect for o in tr.outcomes].count(Effect.PERMIT) == 6
    assert len(tr.executions) == 6
    assert tr.audits["host"].count(Effect.DENY) == 0
    assert len(tr.audits["guard"]) == 10


def test_delegated_one_query_per_request(runs):
    _, wl, traces = runs
    tr = traces[Topology.DELEGATED_AUTHORIZATION]
    queries = [line for line in tr.trace_lines if " authz-query " in line]
    assert len(queries) == len(wl)
    assert len(tr.audits["guard"]) == len(wl)


def test_hop_counts(runs):
    _, _, traces = runs
    for o in traces[Topology.EMBEDDED].outcomes:
        assert o.request_hops == 1 and o.authz_hops == 0
    proxy = traces[Topology.MIDDLEWARE_PROXY].outcomes
    assert {o.request_hops for o in proxy if o.effect is Effect.PERMIT} == {2}
    token = traces[Topology.TOKEN_AUTHORITY].outcomes
    assert {o.request_hops for o in token if o.effect is Effect.PERMIT} == {1}
    first = {}
    for o in token:
        key = (o.client, o.service, o.operation)
        if o.effect is Effect.PERMIT:
            assert o.authz_hops == (2 if key not in first else 0)
            first[key] = o
    for o in traces[Topology.DELEGATED_AUTHORIZATION].outcomes:
        assert o.request_hops == 1 and o.authz_hops == 2


def _forward_size(tr, index: int) -> int:
    sends = [line.split() for line in tr.trace_lines if line.split()[1:4] == ["guard", "host", "send"]]
    return int(sends[index][5])


def test_proxy_latency_is_one_extra_traversal():
    link = LinkProfile.wireless()
    cfg = mixed_config(link=link)
    wl = [Invocation("alice", "Echo", "echo", b"x" * 300, 0)]
    emb = run_scenario(Topology.EMBEDDED, wl, config=cfg).outcomes[0]
    prx_tr = run_scenario(Topology.MIDDLEWARE_PROXY, wl, config=cfg)
    prx = prx_tr.outcomes[0]
    extra = link.delay(_forward_size(prx_tr, 0))
    assert prx.request_latency - emb.request_latency == extra


def test_ideal_bandwidth_difference_is_latency():
    cfg = mixed_config(link=LinkProfile("wireless", 75, math.inf))
    wl = [Invocation("carol", "LocationSnapshot", "snapshot", b"", 0)]
    emb = run_scenario(Topology.EMBEDDED, wl, config=cfg).outcomes[0]
    prx = run_scenario(Topology.MIDDLEWARE_PROXY, wl, config=cfg).outcomes[0]
    assert (emb.request_latency, prx.request_latency) == (Fraction(75), Fraction(150))


def test_redaction_where_guard_sees_response(runs):
    _, wl, traces = runs
    carol = [i for i, inv in enumerate(wl) if inv.client == "carol" and inv.service == "LocationSnapshot"]
    for t in (Topology.EMBEDDED, Topology.MIDDLEWARE_PROXY, Topology.DELEGATED_AUTHORIZATION):
        assert all(b"geo(" not in traces[t].outcomes[i].payload for i in carol), t
    alice = [i for i, inv in enumerate(wl) if inv.client == "alice" and inv.service == "LocationSnapshot"]
    assert all(traces[Topology.EMBEDDED].outcomes[i].payload.startswith(b"geo(") for i in alice)


@pytest.mark.parametrize("topology", GUARDED)
def test_bypass_is_refused(topology):
    cfg = mixed_config()
    wl = [Invocation("alice", "Echo", "echo", b"sneak", 0, bypass=True),
          Invocation("alice", "Echo", "echo", b"honest", 2000)]
    if topology is Topology.DELEGATED_AUTHORIZATION:
        # the host always asks the guard, so take the guard off the network instead
        net = cfg.network(topology)
        net.graph.remove_edges_from(list(net.graph.edges("guard")))
        tr = run_scenario(topology, wl, Simulator(net, cfg.seed), cfg)
        assert all(o.fault == "denied" for o in tr.outcomes)
        assert any(" authz-unreachable " in line for line in tr.trace_lines)
        assert tr.executions == []
        return
    tr = run_scenario(topology, wl, config=cfg)
    sneak, honest = tr.outcomes
    assert sneak.effect is Effect.DENY and sneak.fault == "denied"
    assert honest.effect is Effect.PERMIT
    assert len(tr.executions) == 1
    assert tr.audits["host"].count(Effect.PERMIT) == 1


def test_same_seed_byte_identical():
    for t in ALL:
        a = run_scenario(t, mixed_workload(8), config=mixed_config(seed=3))
        b = run_scenario(t, mixed_workload(8), config=mixed_config(seed=3))
        assert a.text() == b.text() and a.audit_text() == b.audit_text() and a.outcome_text() == b.outcome_text()


def test_config_errors():
    cfg = mixed_config()
    with pytest.raises(ScenarioConfigError):
        run_scenario(Topology.EMBEDDED, [Invocation("mallory", "Echo", "echo")], config=cfg)
    with pytest.raises(ScenarioConfigError):
        run_scenario(Topology.EMBEDDED, [Invocation("alice", "Echo", "echo", at_ms=-1)], config=cfg)
    with pytest.raises(ScenarioConfigError):
        run_scenario(Topology.EMBEDDED, [], config=ScenarioConfig(clients=("host",)))
    with pytest.raises(ScenarioConfigError):
        run_scenario(Topology.EMBEDDED, [], config=ScenarioConfig(clients=("a", "a")))
    with pytest.raises(ScenarioConfigError):
        run_scenario(Topology.MIDDLEWARE_PROXY, [], Simulator(Network.p2p(["alice", "bob", "host"])), ScenarioConfig())
    with pytest.raises(ValueError):
        Topology("Mesh")


def test_build_simulator_nodes():
    sim = build_simulator("TokenAuthority", ScenarioConfig())
    assert sorted(sim.network.nodes) == ["alice", "authority", "bob", "host"]


SCENARIO_YAML = """
topology: DelegatedAuthorization
seed: 4
clients: [alice, bob]
profiles:
  alice: "hasRole(alice, journalist)."
policies:
  LocationSnapshot: snap.pol
annotations:
  LocationSnapshot: 'category("LocationSnapshot", media).'
context: "link(wireless)."
link: {kind: wireless, latency_ms: 50, bandwidth: 100000}
workload:
  - {client: alice, service: LocationSnapshot, op: snapshot, at_ms: 0}
  - {client: bob, service: LocationSnapshot, op: snapshot, at_ms: 100}
"""


def test_load_scenario(tmp_path):
    (tmp_path / "snap.pol").write_text(
        "permit(S, Op, O) :- requested(S, Op, O), principal(S, N), hasRole(N, journalist), category(O, media).\n")
    (tmp_path / "s.yaml").write_text(SCENARIO_YAML)
    sc = load_scenario(tmp_path / "s.yaml")
    assert sc.topology is Topology.DELEGATED_AUTHORIZATION and sc.config.link.latency_ms == 50
    tr = sc.run()
    assert [o.effect for o in tr.outcomes] == [Effect.PERMIT, Effect.DENY]
    assert tr.text() == load_scenario(tmp_path / "s.yaml").run().text()


@pytest.mark.parametrize("bad", ["topology: Mesh\n", "topology: Embedded\nworkload: [{client: x}]\n",
                                 "topology: Embedded\nsuite: AES1-CBC/RSA15-1024/RSA-SHA1\n", ": : :\n"])
def test_load_scenario_errors(tmp_path, bad):
    (tmp_path / "s.yaml").write_text(bad)
    with pytest.raises(ScenarioConfigError):
        load_scenario(tmp_path / "s.yaml")
