"""The three ephemeral rule tables provisioned onto every storage node.

AT maps application ids to their public keys, PT maps (app, purpose) to
rights, KT holds cipher-key material in a shape fixed by the deployment
scheme. Together they are the node's entire policy state: purely
volatile, populated only by controller messages, and gone on power-off —
which is exactly what makes cryptographic erasure and leak prevention
work. Nothing in this module ever touches a file.

Absent PT entries mean no rights (deny by default); permissions are
orthogonal to key presence, so PT answers never depend on KT contents.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .crypto import (
    PurposeSecret,
    Scheme,
    UserSecret,
    check_sym_key,
    derive_tuple_key,
)
from .errors import MissingKey, SchemeMismatch
from .model import Rights


class AuthTable:
    """app id -> 32-byte public key; at most one key per app."""

    def __init__(self):
        self._keys: dict[bytes, bytes] = {}

    def upsert(self, app: bytes, pubkey: bytes) -> None:
        self._keys[app] = pubkey

    def remove(self, app: bytes) -> None:
        self._keys.pop(app, None)

    def lookup(self, app: bytes) -> bytes | None:
        return self._keys.get(app)

    def clear(self) -> None:
        self._keys.clear()

    def snapshot(self) -> dict[bytes, bytes]:
        return dict(self._keys)


class PermTable:
    """(app, purpose) -> Rights; absent entries are empty rights."""

    def __init__(self):
        self._rights: dict[tuple[bytes, bytes], Rights] = {}

    def set(self, app: bytes, purpose: bytes, rights: Rights) -> None:
        if rights is Rights.NONE:
            # Empty rights are indistinguishable from no entry; storing the
            # absence keeps the table minimal.
            self._rights.pop((app, purpose), None)
        else:
            self._rights[(app, purpose)] = rights

    def revoke(self, app: bytes, purpose: bytes) -> None:
        self._rights.pop((app, purpose), None)

    def lookup(self, app: bytes, purpose: bytes) -> Rights:
        return self._rights.get((app, purpose), Rights.NONE)

    def granted_purposes(self, app: bytes) -> list[bytes]:
        return sorted(p for (a, p), r in self._rights.items() if a == app)

    def clear(self) -> None:
        self._rights.clear()

    def snapshot(self) -> dict[tuple[bytes, bytes], Rights]:
        return dict(self._rights)


class KtKind(enum.Enum):
    USER = "user"
    PAIR = "pair"
    PURPOSE = "purpose"


@dataclass(frozen=True)
class KtEntry:
    """One installable unit of key material."""

    kind: KtKind
    user: bytes | None = None
    purpose: bytes | None = None
    material: bytes = b""


@dataclass(frozen=True)
class KtSelector:
    """Names the entry (or part) a removal targets."""

    kind: KtKind
    user: bytes | None = None
    purpose: bytes | None = None


_VALID_KINDS = {
    Scheme.PER_USER: {KtKind.USER},
    Scheme.PER_USER_PURPOSE: {KtKind.PAIR},
    Scheme.COMPOSITE: {KtKind.USER, KtKind.PURPOSE},
}


class KeyTable:
    """Ephemeral cipher-key table, shape fixed by the deployment scheme.

    Resolution is a dict probe (plus one HKDF run for derived schemes,
    memoised until any mutation), so it sustains per-request access rates.
    """

    def __init__(self, scheme: Scheme):
        self.scheme = scheme
        self._users: dict[bytes, UserSecret] = {}
        self._purposes: dict[bytes, PurposeSecret] = {}
        self._pairs: dict[tuple[bytes, bytes], bytes] = {}
        self._resolved: dict[tuple[bytes, bytes], bytes] = {}

    def _check_kind(self, kind: KtKind) -> None:
        if kind not in _VALID_KINDS[self.scheme]:
            raise SchemeMismatch(f"{kind.value} entries invalid under {self.scheme.name}")

    def install(self, entry: KtEntry) -> None:
        self._check_kind(entry.kind)
        self._resolved.clear()
        if entry.kind is KtKind.USER:
            if entry.user is None:
                raise SchemeMismatch("user entry needs a user id")
            self._users[entry.user] = UserSecret(entry.material)
        elif entry.kind is KtKind.PURPOSE:
            if entry.purpose is None:
                raise SchemeMismatch("purpose entry needs a purpose id")
            self._purposes[entry.purpose] = PurposeSecret(entry.material)
        else:
            if entry.user is None or entry.purpose is None:
                raise SchemeMismatch("pair entry needs user and purpose ids")
            self._pairs[(entry.user, entry.purpose)] = check_sym_key(entry.material)

    def remove(self, selector: KtSelector) -> int:
        """Remove matching entries; returns the count actually removed so
        the controller can verify erasure fan-out."""
        self._check_kind(selector.kind)
        self._resolved.clear()
        if selector.kind is KtKind.USER:
            return 1 if self._users.pop(selector.user, None) is not None else 0
        if selector.kind is KtKind.PURPOSE:
            return 1 if self._purposes.pop(selector.purpose, None) is not None else 0
        return 1 if self._pairs.pop((selector.user, selector.purpose), None) is not None else 0

    def resolve(self, user: bytes, purpose: bytes) -> bytes:
        """Return the tuple cipher key for (user, purpose) or raise
        :class:`MissingKey`."""
        if self.scheme is Scheme.PER_USER_PURPOSE:
            stored = self._pairs.get((user, purpose))
            if stored is None:
                raise MissingKey(f"no key for pair ({user!r}, {purpose!r})")
            return stored
        cached = self._resolved.get((user, purpose))
        if cached is not None:
            return cached
        if self.scheme is Scheme.PER_USER:
            secret = self._users.get(user)
            if secret is None:
                raise MissingKey(f"no key material for user {user!r}")
            key = derive_tuple_key(self.scheme, secret, user, purpose)
        else:
            us = self._users.get(user)
            ps = self._purposes.get(purpose)
            if us is None or ps is None:
                raise MissingKey(f"missing part for ({user!r}, {purpose!r})")
            key = derive_tuple_key(self.scheme, (us, ps), user, purpose)
        self._resolved[(user, purpose)] = key
        return key

    def clear(self) -> None:
        self._users.clear()
        self._purposes.clear()
        self._pairs.clear()
        self._resolved.clear()

    def live_keys(self) -> list[bytes]:
        """Every raw key byte-string currently held or derivable from this
        table. Test-support surface for leak scans and erasure soundness."""
        out = [s.data for s in self._users.values()]
        out += [s.data for s in self._purposes.values()]
        out += list(self._pairs.values())
        return out


@dataclass
class NodeTables:
    """The complete, wipeable policy state of one node."""

    at: AuthTable
    pt: PermTable
    kt: KeyTable

    @classmethod
    def empty(cls, scheme: Scheme) -> "NodeTables":
        return cls(AuthTable(), PermTable(), KeyTable(scheme))

    def wipe_all(self) -> None:
        """Equivalent to node restart: every lookup behaves as on a fresh
        table afterwards."""
        self.at.clear()
        self.pt.clear()
        self.kt.clear()
