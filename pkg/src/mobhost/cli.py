"""``mobhost`` command line.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 shape-check
failure. Errors are reported on stderr as one JSON object per line.
"""

from __future__ import annotations

import json
import random
import sys
from pathlib import Path

import click
import yaml

from . import bench
from .authz import AuthzAssertion
from .client import Client
from .cryptokit import ALL_SUITES, KEY_ALGS, RECOMMENDED_SUITE, ROLES, CryptoSuite, Identity, TrustStore
from .cryptokit import dump_keypair, generate_keypair, load_keypairs
from .errors import IncompleteMatrix, MobhostError, ScenarioConfigError
from .guard import Guard, StaticRetrievers, load_retrievers
from .host import (
    DelegateToGuard,
    EmbeddedGuard,
    MobileHost,
    Open,
    RequireAssertion,
    VerifyGuardSignature,
    echo_service,
    location_snapshot_service,
)
from .httpd import envelope_endpoint, make_server, post, url_of
from .middleware import AuthorityNode, GuardNode, authority_request
from .topologies import load_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SHAPE = 0, 2, 3, 4
SERVICES = {"Echo": echo_service, "LocationSnapshot": location_snapshot_service}


class Failure(click.ClickException):
    def __init__(self, exit_code: int, kind: str, detail: str) -> None:
        super().__init__(detail)
        self.exit_code = exit_code
        self.kind = kind

    def show(self, file=None) -> None:
        line = json.dumps({"error": self.kind, "exit": self.exit_code, "detail": self.message}, sort_keys=True)
        click.echo(line, err=True)


def _config_error(exc: Exception) -> Failure:
    return Failure(EXIT_CONFIG, type(exc).__name__, str(exc))


def _runtime_error(exc: Exception) -> Failure:
    return Failure(EXIT_RUNTIME, type(exc).__name__, str(exc))


# ---------- config loading ----------

def _load_yaml(path: str) -> tuple[dict, Path]:
    p = Path(path)
    try:
        return yaml.safe_load(p.read_text()) or {}, p.parent
    except (OSError, yaml.YAMLError) as exc:
        raise _config_error(exc) from exc


def _identity(base: Path, keyfile: str, name: str | None = None) -> Identity:
    pairs = load_keypairs((base / keyfile).read_text())
    owner = name or next((o for _, o in pairs if o), None) or Path(keyfile).stem
    return Identity(owner, tuple(kp for kp, _ in pairs))


def _trust(base: Path, trustfile: str) -> TrustStore:
    return TrustStore.loads((base / trustfile).read_text())


def _listen(cfg: dict) -> tuple[str, int]:
    host, _, port = str(cfg.get("listen", "127.0.0.1:8080")).rpartition(":")
    return host or "127.0.0.1", int(port)


def _retrievers(cfg: dict, base: Path) -> StaticRetrievers:
    if "retrievers" not in cfg:
        return StaticRetrievers()
    return load_retrievers(base / cfg["retrievers"])


def build_host(path: str) -> tuple[MobileHost, tuple[str, int]]:
    cfg, base = _load_yaml(path)
    try:
        ident = _identity(base, cfg["keys"])
        trust = _trust(base, cfg["trust"])
        mode_name = cfg.get("mode", "open")
        if mode_name == "open":
            mode = Open()
        elif mode_name == "embedded":
            mode = EmbeddedGuard(Guard(_retrievers(cfg, base).retrievers()))
        elif mode_name == "verify-guard":
            mode = VerifyGuardSignature()
        elif mode_name == "require-assertion":
            mode = RequireAssertion(replay_cache=bool(cfg.get("replay_cache", False)))
        elif mode_name == "delegate":
            g = cfg["guard"]
            url = g["url"]
            mode = DelegateToGuard(g["key_id"], lambda data: post(url, data)[1])
        else:
            raise ValueError(f"unknown mode {mode_name!r}")
        host = MobileHost(ident, trust, mode)
        for name in cfg.get("services", list(SERVICES)):
            host.register_service(SERVICES[name]())
        return host, _listen(cfg)
    except (KeyError, ValueError, OSError, MobhostError) as exc:
        raise _config_error(exc) from exc


def build_guard(path: str) -> tuple[GuardNode, str | None, tuple[str, int]]:
    cfg, base = _load_yaml(path)
    try:
        ident = _identity(base, cfg["keys"])
        trust = _trust(base, cfg["trust"])
        host = cfg.get("host") or {}
        node = GuardNode(ident, trust, Guard(_retrievers(cfg, base).retrievers()), host.get("key_id"))
        return node, host.get("url"), _listen(cfg)
    except (KeyError, ValueError, OSError, MobhostError) as exc:
        raise _config_error(exc) from exc


def build_authority(path: str) -> tuple[AuthorityNode, tuple[str, int]]:
    cfg, base = _load_yaml(path)
    try:
        ident = _identity(base, cfg["keys"])
        trust = _trust(base, cfg["trust"])
        guard = Guard(_retrievers(cfg, base).retrievers())
        node = AuthorityNode(ident, trust, guard, float(cfg.get("validity_seconds", 86_400)))
        return node, _listen(cfg)
    except (KeyError, ValueError, OSError, MobhostError) as exc:
        raise _config_error(exc) from exc


def _serve(dispatch, listen: tuple[str, int], what: str) -> None:
    try:
        server = make_server(dispatch, *listen)
    except OSError as exc:
        raise _runtime_error(exc) from exc
    click.echo(f"{what} listening on {url_of(server)}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# ---------- commands ----------

@click.group()
def main() -> None:
    """Secure mobile web-service host with pluggable guards."""


@main.command()
@click.option("--name", required=True, help="Principal name stored as key owner.")
@click.option("--alg", "algs", multiple=True, type=click.Choice(sorted(KEY_ALGS)), default=("RSA-1024",))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Deterministic keys (testing only).")
@click.option("--role", type=click.Choice(ROLES), default=None, help="Also append trust lines for this role.")
@click.option("--trust-out", type=click.Path(dir_okay=False), default=None)
def keygen(name, algs, out, seed, role, trust_out) -> None:
    """Generate key pairs into a key file."""
    rng = random.Random(f"keygen:{seed}:{name}") if seed is not None else None
    kps = [generate_keypair(a, rng) for a in algs]
    Path(out).write_text("\n".join(dump_keypair(kp, name) for kp in kps))
    if trust_out:
        if role is None:
            raise Failure(EXIT_CONFIG, "UsageError", "--trust-out needs --role")
        store = TrustStore()
        for kp in kps:
            store.add(kp.public, role, name)
        with open(trust_out, "a") as fh:
            fh.write(store.dumps())
    for kp in kps:
        click.echo(f"{kp.alg} {kp.key_id}")


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True, dir_okay=False))
def serve(config) -> None:
    """Run a Mobile Host over HTTP."""
    host, listen = build_host(config)
    _serve(host.dispatch, listen, "host")


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True, dir_okay=False))
def guard(config) -> None:
    """Run the middleware guard (proxy and decision service)."""
    node, host_url, listen = build_guard(config)

    def forward(data: bytes) -> bytes:
        if host_url is None:
            raise ConnectionError("no host url configured")
        return post(host_url, data)[1]

    _serve(envelope_endpoint(lambda data: node.handle(data, forward)), listen, "guard")


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True, dir_okay=False))
def authority(config) -> None:
    """Run the assertion authority."""
    node, listen = build_authority(config)
    _serve(envelope_endpoint(node.handle), listen, "authority")


@main.command()
@click.option("--to", "url", required=True, help="Endpoint URL, e.g. http://127.0.0.1:8080/ws")
@click.option("--peer", required=True, help="Key id of the endpoint's principal.")
@click.option("--keys", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trust", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--service", required=True)
@click.option("--op", required=True)
@click.option("--payload", default="")
@click.option("--suite", default=RECOMMENDED_SUITE.id, show_default=True)
@click.option("--authority-url", default=None, help="Fetch an assertion here first.")
@click.option("--authority", "authority_key", default=None, help="Key id of the authority.")
def invoke(url, peer, keys, trust, service, op, payload, suite, authority_url, authority_key) -> None:
    """Send one protected request and print the response payload."""
    try:
        s = CryptoSuite.parse(suite)
        client = Client(_identity(Path("."), keys), _trust(Path("."), trust), s)
    except (ValueError, OSError, MobhostError) as exc:
        raise _config_error(exc) from exc
    headers = ()
    try:
        if authority_url:
            if not authority_key:
                raise Failure(EXIT_CONFIG, "UsageError", "--authority-url needs --authority")
            req = client.request(authority_key, "Authority", "issue", authority_request(op, service))
            res = client.read(post(authority_url, req)[1], expect_from=authority_key)
            if not res.ok:
                raise Failure(EXIT_RUNTIME, res.fault or "fault", f"assertion refused: {res.cause}")
            headers = (AuthzAssertion.from_bytes(res.payload).to_node(),)
        _, body = post(url, client.request(peer, service, op, payload.encode("utf-8"), headers))
        res = client.read(body, expect_from=peer)
    except (OSError, MobhostError) as exc:
        raise _runtime_error(exc) from exc
    if not res.ok:
        raise Failure(EXIT_RUNTIME, res.fault or "fault", res.cause)
    sys.stdout.buffer.write(res.payload)
    sys.stdout.buffer.write(b"\n")
    sys.stdout.flush()


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


@main.command(name="bench")
@click.option("--sizes", default=",".join(map(str, bench.DEFAULT_SIZES)), show_default=True)
@click.option("--suites", default=",".join(s.id for s in bench.DEFAULT_SUITES))
@click.option("--reps", default=30, show_default=True, type=click.IntRange(min=2))
@click.option("--warmup", default=5, show_default=True, type=click.IntRange(min=0))
@click.option("--csv", "csv_path", required=True, type=click.Path(dir_okay=False))
def bench_cmd(sizes, suites, reps, warmup, csv_path) -> None:
    """Measure host processing time over sizes x suites; append to CSV."""
    try:
        size_list = _int_list(sizes)
        suite_list = [CryptoSuite.parse(x) for x in suites.split(",") if x.strip()]
    except (ValueError, MobhostError) as exc:
        raise _config_error(exc) from exc
    try:
        points = bench.run_matrix(size_list, suite_list, reps, warmup, csv_path)
    except MobhostError as exc:
        raise _runtime_error(exc) from exc
    for p in points:
        click.echo(",".join(p.row()))


@main.command(name="check-shape")
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tolerance", default=0.15, show_default=True, type=click.FloatRange(0, 1))
def check_shape_cmd(csv_path, tolerance) -> None:
    """Check that medians grow with message size within tolerance."""
    try:
        points = bench.read_csv(csv_path)
    except (ValueError, KeyError, OSError) as exc:
        raise _config_error(exc) from exc
    try:
        report = bench.check_shape(points, tolerance)
    except IncompleteMatrix as exc:
        raise _runtime_error(exc) from exc
    click.echo(report.text(), nl=False)
    if not report.ok:
        raise Failure(EXIT_SHAPE, "ShapeCheckFailed", f"{len(report.dips)} size step(s) dip beyond tolerance")


@main.command()
@click.option("--file", "path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trace", "trace_out", required=True, type=click.Path(dir_okay=False))
@click.option("--audit", "audit_out", default=None, type=click.Path(dir_okay=False))
def scenario(path, trace_out, audit_out) -> None:
    """Replay a scenario file on the network simulator."""
    try:
        sc = load_scenario(path)
    except ScenarioConfigError as exc:
        raise _config_error(exc) from exc
    try:
        result = sc.run()
    except ScenarioConfigError as exc:
        raise _config_error(exc) from exc
    except MobhostError as exc:
        raise _runtime_error(exc) from exc
    Path(trace_out).write_text(result.text())
    if audit_out:
        Path(audit_out).write_text(result.audit_text())
    click.echo(result.outcome_text(), nl=False)


@main.command(name="suites")
def suites_cmd() -> None:
    """List the supported crypto suites."""
    for s in ALL_SUITES:
        click.echo(s.id)


if __name__ == "__main__":
    main()
