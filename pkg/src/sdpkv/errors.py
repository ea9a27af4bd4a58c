"""Exception hierarchy shared across the store, controller and client."""

from __future__ import annotations


class SdpError(Exception):
    """Base class for every domain error raised by this package."""


# -- identifiers / encoding ------------------------------------------------

class MalformedKey(SdpError):
    """A tuple-key encoding could not be decoded or violates length bounds."""


class ProtocolError(SdpError):
    """A wire frame was rejected. ``kind`` names the reason."""

    BAD_MAGIC = "BadMagic"
    BAD_VERSION = "BadVersion"
    TRUNCATED = "Truncated"
    UNKNOWN_TYPE = "UnknownType"
    OVERSIZE = "Oversize"

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


# -- crypto ----------------------------------------------------------------

class AuthFailure(SdpError):
    """AEAD open failed: ciphertext, tag, nonce or associated data modified."""


class MaterialMismatch(SdpError):
    """Key material handed to a derivation does not match the active scheme."""


# -- control tables ----------------------------------------------------------

class MissingKey(SdpError):
    """No cipher key resolvable for the requested (user, purpose)."""


class SchemeMismatch(SdpError):
    """A key-table entry or selector has the wrong shape for the scheme."""


# -- storage node -------------------------------------------------------------

class NotFound(SdpError):
    """GET/PUT/DELETE addressed a key that is not stored."""


class AlreadyExists(SdpError):
    """INSERT addressed a key that is already stored."""


class NotBootstrapped(SdpError):
    """The node has no controller-provisioned state and cannot serve."""


class AlreadyBootstrapped(SdpError):
    """Bootstrap was attempted twice without an intervening restart."""


# -- controller ---------------------------------------------------------------

class DuplicateApp(SdpError):
    pass


class UnknownApp(SdpError):
    pass


class UnknownUser(SdpError):
    pass


class UnknownPurpose(SdpError):
    pass


class UnknownNode(SdpError):
    pass


class ConsentExists(SdpError):
    """Consent already recorded for this pair (re-consent after revocation
    is refused: erasure is final)."""


class NoSuchConsent(SdpError):
    pass


class AttestationFailed(SdpError):
    """Node measurement or report signature did not match expectations."""


class NoNodeInRegion(SdpError):
    """No registered, serving node matches the purpose's region tag."""


# -- client -------------------------------------------------------------------

class NoNode(SdpError):
    """The client's node map offers no node for the requested route."""


class PartialScan(SdpError):
    """A fan-out scan failed on some nodes; partial results attached."""

    def __init__(self, items, failures):
        super().__init__(f"scan incomplete on {sorted(failures)}")
        self.items = items
        self.failures = failures


class RequestFailed(SdpError):
    """A storage node answered a client request with an error status."""

    def __init__(self, status: str):
        super().__init__(status)
        self.status = status


# -- simulation -----------------------------------------------------------------

class ScenarioError(SdpError):
    """A scenario step is malformed or references an undeclared actor."""
