from __future__ import annotations

import functools
import random

import pytest

from mobhost.cryptokit import Identity, TrustStore

EPOCH = 1_767_225_600_000  # 2026-01-01T00:00:00.000Z

_acceptance: dict[str, tuple[str, str]] = {}


@functools.lru_cache(maxsize=None)
def seeded_identity(name: str, algs: tuple[str, ...] = ("RSA-1024", "RSA-2048", "DSA-1024")) -> Identity:
    return Identity.generate(name, random.Random(f"tests:{name}"), algs)


@pytest.fixture(scope="session")
def alice() -> Identity:
    return seeded_identity("alice")


@pytest.fixture(scope="session")
def bob() -> Identity:
    return seeded_identity("bob")


@pytest.fixture(scope="session")
def host_id() -> Identity:
    return seeded_identity("host")


@pytest.fixture(scope="session")
def guard_id() -> Identity:
    return seeded_identity("guard")


@pytest.fixture(scope="session")
def authority_id() -> Identity:
    return seeded_identity("authority")


@pytest.fixture()
def trust(alice, bob, host_id, guard_id, authority_id) -> TrustStore:
    t = TrustStore()
    t.add_identity(alice, "client")
    t.add_identity(bob, "client")
    t.add_identity(host_id, "host")
    t.add_identity(guard_id, "guard")
    t.add_identity(authority_id, "authority")
    return t


# ---------- acceptance summary ----------

def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        doc = getattr(report, "criterion_title", "")
        _acceptance[name] = ("PASS" if report.outcome == "passed" else "FAIL", doc)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    fn = getattr(item, "function", None)
    if fn is not None and fn.__doc__:
        rep.criterion_title = fn.__doc__.strip().splitlines()[0]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        status, title = _acceptance[name]
        num = name.split("_")[2]
        terminalreporter.write_line(f"criterion {int(num):2d}: {status}  {title}")
