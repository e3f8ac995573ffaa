"""Exception hierarchy shared by every layer of the stack.

Each class carries a ``code`` used when a host maps failures onto
fault envelopes (see :mod:`mobhost.host`).
"""

from __future__ import annotations


class MobhostError(Exception):
    code = "internal"


# ---------- envelope ----------

class EnvelopeError(MobhostError):
    code = "malformed"


class InvalidToken(EnvelopeError):
    pass


class MalformedMessage(EnvelopeError):
    def __init__(self, message: str, position: int | None = None) -> None:
        self.position = position
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)


# ---------- crypto ----------

class CryptoError(MobhostError):
    code = "unauthenticated"


class UnknownAlgorithm(CryptoError):
    pass


class BadKeyLength(CryptoError):
    pass


class BadIvLength(CryptoError):
    pass


class BadPadding(CryptoError):
    pass


class KeyTooLarge(CryptoError):
    pass


class WrapFailure(CryptoError):
    pass


class MalformedSignature(CryptoError):
    pass


class KeyMismatch(CryptoError):
    """Key type or size does not fit the requested algorithm."""


# ---------- message security ----------

class SecurityError(MobhostError):
    code = "unauthenticated"


class MissingSecurity(SecurityError):
    pass


class UnknownSigner(SecurityError):
    pass


class BadSignature(SecurityError):
    pass


class StaleMessage(SecurityError):
    code = "stale"


# ---------- policy ----------

class PolicyError(MobhostError):
    pass


class PolicySyntaxError(PolicyError):
    def __init__(self, message: str, line: int) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}")


class UnsafeRule(PolicyError):
    def __init__(self, variable: str, line: int | None = None) -> None:
        self.variable = variable
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"variable {variable} occurs in the head but in no antecedent{where}")


class ReservedPredicate(PolicyError):
    pass


class CapacityExceeded(PolicyError):
    pass


# ---------- guard ----------

class GuardError(MobhostError):
    code = "denied"


class RetrieverUnavailable(GuardError):
    def __init__(self, source: str, cause: BaseException | None = None) -> None:
        self.source = source
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"retriever {source} unavailable{detail}")


class UnknownObligation(GuardError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"no filter registered for obligation {name!r}")


# ---------- assertions / topologies ----------

class AssertionInvalid(MobhostError):
    code = "denied"


class Expired(AssertionInvalid):
    pass


class OperationMismatch(AssertionInvalid):
    pass


class ObjectMismatch(AssertionInvalid):
    pass


class SubjectMismatch(AssertionInvalid):
    pass


class UntrustedIssuer(AssertionInvalid):
    pass


class AssertionBadSignature(AssertionInvalid, BadSignature):
    code = "denied"


class ReplayedAssertion(AssertionInvalid):
    pass


class AuthorizationRefused(MobhostError):
    code = "denied"

    def __init__(self, cause: str) -> None:
        self.cause = cause
        super().__init__(f"authorization refused: {cause}")


class ScenarioConfigError(MobhostError):
    code = "config"


# ---------- network / host / bench ----------

class NoRoute(MobhostError):
    pass


class DuplicateService(MobhostError):
    pass


class UnknownService(MobhostError):
    code = "unknown-service"


class HostUnavailable(MobhostError):
    pass


class IncompleteMatrix(MobhostError):
    pass
