"""Exception hierarchy shared across the package.

Crypto failures deliberately carry no detail beyond their type so that
error paths cannot be used as a decryption oracle.
"""


class OtaProvError(Exception):
    """Base class for all package errors."""


# crypto envelope

class SizeError(OtaProvError):
    """Payload exceeds a hard size limit."""


class TagMismatch(OtaProvError):
    """MAC verification failed (tampering, truncation, or wrong key)."""


# flash store

class FlashError(OtaProvError):
    pass


class NotErasedError(FlashError):
    """Write targets bytes that are not in the erased (0xFF) state."""


class StaleSlotOccupied(FlashError):
    """Target key slot holds stale data and must be erased first."""


class CommitRefused(FlashError):
    """Pending record did not read back valid, commit aborted."""


class Unprovisioned(FlashError):
    """A required key record is missing from flash."""


class OrderingViolation(FlashError):
    """Operation invoked out of its required order."""


# protocol

class ProtocolError(OtaProvError):
    pass


class Nonce1Mismatch(ProtocolError):
    """Response did not echo the nonce sent with the request."""


class ReplayedNonce2(ProtocolError):
    """Server nonce was seen before; response treated as a replay."""


class AgentRejected(ProtocolError):
    """Agent answered with an error frame."""

    def __init__(self, code):
        super().__init__(f"agent error: {code.name}")
        self.code = code


class CloudUnavailable(OtaProvError):
    """Cloud backend could not be reached or refused the operation."""


# transport / harness signals

class LinkTimeout(OtaProvError):
    """No reply arrived (frame dropped or peer gone)."""


class PowerLost(OtaProvError):
    """Injected power cut: the device stopped mid-operation."""


class AgentKilled(OtaProvError):
    """Injected agent crash used by the consistency drills."""


class CorruptRegistry(OtaProvError):
    """Registry journal or snapshot failed to parse."""
