from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from mobhost import httpd
from mobhost.bench import BenchPoint, DEFAULT_SIZES, append_csv
from mobhost.cli import build_host, main
from mobhost.cryptokit import ALL_SUITES, TrustStore, load_keypairs

from .test_topologies import SCENARIO_YAML


def run(*args):
    return CliRunner().invoke(main, list(args))


def key_id(path) -> str:
    return load_keypairs(path.read_text())[0][0].key_id


def error_line(result) -> dict:
    return json.loads(result.stderr.strip().splitlines()[-1])


@pytest.fixture()
def deployment(tmp_path):
    """Keys, trust store and host config written through the CLI."""
    trust = tmp_path / "trust.txt"
    for name, role in (("host", "host"), ("alice", "client")):
        r = run("keygen", "--name", name, "--alg", "RSA-1024", "--out", str(tmp_path / f"{name}.keys"),
                "--seed", "1", "--role", role, "--trust-out", str(trust))
        assert r.exit_code == 0, r.output
    (tmp_path / "host.yaml").write_text("keys: host.keys\ntrust: trust.txt\nmode: open\nlisten: 127.0.0.1:0\n")
    return tmp_path


def test_keygen_outputs_key_ids(deployment):
    store = TrustStore.loads((deployment / "trust.txt").read_text())
    host_kid = key_id(deployment / "host.keys")
    assert store.has_role(host_kid, "host")
    r = run("keygen", "--name", "x", "--out", str(deployment / "x.keys"), "--seed", "1")
    r2 = run("keygen", "--name", "x", "--out", str(deployment / "y.keys"), "--seed", "1")
    assert r.stdout == r2.stdout and r.stdout.startswith("RSA-1024 ")


def test_keygen_trust_out_needs_role(tmp_path):
    r = run("keygen", "--name", "x", "--out", str(tmp_path / "k"), "--trust-out", str(tmp_path / "t"))
    assert r.exit_code == 2 and error_line(r)["error"] == "UsageError"


def test_invoke_against_threaded_server(deployment):
    host, _ = build_host(str(deployment / "host.yaml"))
    server = httpd.make_server(host.dispatch)
    httpd.serve_in_thread(server)
    try:
        peer = host.identity.signing_key("RSA-SHA1").key_id
        args = ["invoke", "--to", httpd.url_of(server), "--peer", peer, "--keys", str(deployment / "alice.keys"),
                "--trust", str(deployment / "trust.txt"), "--service", "Echo", "--op", "echo", "--payload", "hi there"]
        r = run(*args)
        assert r.exit_code == 0, r.output
        assert r.stdout == "hi there\n"
        r = run(*args[:-4], "--service", "Nope", "--op", "x")
        assert r.exit_code == 3 and error_line(r)["error"] == "unknown-service"
    finally:
        server.shutdown()
        server.server_close()


def test_invoke_unreachable_is_runtime_error(deployment):
    peer = key_id(deployment / "host.keys")
    r = run("invoke", "--to", "http://127.0.0.1:9/ws", "--peer", peer, "--keys", str(deployment / "alice.keys"),
            "--trust", str(deployment / "trust.txt"), "--service", "Echo", "--op", "echo")
    assert r.exit_code == 3
    assert set(error_line(r)) == {"detail", "error", "exit"}


def test_invoke_bad_suite_is_config_error(deployment):
    r = run("invoke", "--to", "http://127.0.0.1:9/ws", "--peer", "00", "--keys", str(deployment / "alice.keys"),
            "--trust", str(deployment / "trust.txt"), "--service", "Echo", "--op", "echo", "--suite", "X/Y/Z")
    assert r.exit_code == 2 and error_line(r)["exit"] == 2


def test_bad_host_config_exit_2(tmp_path):
    (tmp_path / "h.yaml").write_text("keys: missing.keys\ntrust: t\n")
    r = run("serve", "--config", str(tmp_path / "h.yaml"))
    assert r.exit_code == 2
    (tmp_path / "h.yaml").write_text("mode: [unclosed\n")
    assert run("serve", "--config", str(tmp_path / "h.yaml")).exit_code == 2


def test_bench_then_check_shape(tmp_path):
    csv = tmp_path / "b.csv"
    r = run("bench", "--sizes", "256,512", "--suites", ALL_SUITES[0].id, "--reps", "3", "--warmup", "0", "--csv", str(csv))
    assert r.exit_code == 0, r.output
    assert len(r.stdout.strip().splitlines()) == 2
    assert csv.read_text().startswith("suite,size_bytes,reps,median_ms,p10_ms,p90_ms\n")


def test_check_shape_exit_codes(tmp_path):
    good = tmp_path / "good.csv"
    append_csv(good, [BenchPoint("S", n, 30, 1 + n / 1024, 0, 0) for n in DEFAULT_SIZES])
    r = run("check-shape", "--csv", str(good))
    assert r.exit_code == 0 and r.stdout.startswith("shape PASS")
    bad = tmp_path / "bad.csv"
    append_csv(bad, [BenchPoint("S", n, 30, 0.1 if n == 4096 else 1 + n / 1024, 0, 0) for n in DEFAULT_SIZES])
    r = run("check-shape", "--csv", str(bad))
    assert r.exit_code == 4 and error_line(r)["error"] == "ShapeCheckFailed"
    holes = tmp_path / "holes.csv"
    append_csv(holes, [BenchPoint("S", 1024, 30, 1, 0, 0), BenchPoint("T", 2048, 30, 1, 0, 0)])
    assert run("check-shape", "--csv", str(holes)).exit_code == 3
    junk = tmp_path / "junk.csv"
    junk.write_text("x,y\n")
    assert run("check-shape", "--csv", str(junk)).exit_code == 2


def test_scenario_writes_trace_and_audit(tmp_path):
    (tmp_path / "snap.pol").write_text(
        "permit(S, Op, O) :- requested(S, Op, O), principal(S, N), hasRole(N, journalist), category(O, media).\n")
    (tmp_path / "s.yaml").write_text(SCENARIO_YAML)
    trace, audit = tmp_path / "t.txt", tmp_path / "a.txt"
    r = run("scenario", "--file", str(tmp_path / "s.yaml"), "--trace", str(trace), "--audit", str(audit))
    assert r.exit_code == 0, r.output
    assert r.stdout.splitlines()[0].startswith("0 alice LocationSnapshot.snapshot Permit ok hops=1")
    assert trace.read_text().startswith("0.000 alice - invoke ")
    assert "# guard" in audit.read_text() and "# host" in audit.read_text()
    first = trace.read_text()
    run("scenario", "--file", str(tmp_path / "s.yaml"), "--trace", str(trace))
    assert trace.read_text() == first


def test_scenario_config_error(tmp_path):
    (tmp_path / "s.yaml").write_text("topology: Nowhere\n")
    r = run("scenario", "--file", str(tmp_path / "s.yaml"), "--trace", str(tmp_path / "t"))
    assert r.exit_code == 2 and error_line(r)["error"] == "ScenarioConfigError"


def test_suites_lists_sixteen():
    r = run("suites")
    assert r.exit_code == 0 and len(r.stdout.split()) == 16
