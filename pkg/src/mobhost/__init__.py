"""Message-level security and pluggable access control for mobile web-service hosts."""

from __future__ import annotations

from .cryptokit import ALL_SUITES, RECOMMENDED_SUITE, CryptoSuite, Identity, TrustStore
from .envelope import Envelope, PlainBody, build_envelope, parse_envelope
from .guard import Guard, StaticRetrievers
from .host import MobileHost, TransportRequest
from .sbac import AccessRequest, Decision, Effect, decide, parse_policy
from .topologies import Invocation, ScenarioConfig, Topology, run_scenario
from .wssec import protect, unprotect

__all__ = [
    "ALL_SUITES",
    "RECOMMENDED_SUITE",
    "AccessRequest",
    "CryptoSuite",
    "Decision",
    "Effect",
    "Envelope",
    "Guard",
    "Identity",
    "Invocation",
    "MobileHost",
    "PlainBody",
    "ScenarioConfig",
    "StaticRetrievers",
    "Topology",
    "TransportRequest",
    "TrustStore",
    "build_envelope",
    "decide",
    "parse_envelope",
    "parse_policy",
    "protect",
    "run_scenario",
    "unprotect",
]
