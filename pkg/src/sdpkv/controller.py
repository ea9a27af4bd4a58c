"""The trusted control plane.

The controller owns every policy decision: who may access which purpose,
which cipher keys exist, where a (user, purpose) shard lives, when data
expires. Storage nodes only ever see the consequences, as table updates
over the control channel. After bootstrap the controller stays off the
hot path; it hears back from nodes only through violation events.

Erasure is orchestrated here and its cost profile depends on the key
scheme: per-user keys erase a user in one message per node but need
physical purges for a purpose; per-pair keys erase pair-by-pair (linear
in purposes); composite keys erase a whole user or whole purpose in one
message per node, while pair-granular revocation falls back to indexed
physical purges. Key removal is the compliance event; dead ciphertext is
swept out lazily at the next retention sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Protocol

from . import crypto, wire
from .errors import (
    AttestationFailed,
    ConsentExists,
    DuplicateApp,
    NoNodeInRegion,
    NoSuchConsent,
    SdpError,
    UnknownApp,
    UnknownNode,
    UnknownPurpose,
    UnknownUser,
)
from .model import Rights, ViolationEvent, ViolationKind, check_id
from .node import DEFAULT_BUILD_ID, attest_message
from .tables import KtKind

SNAPSHOT_FILE = "controller.snap"
NODECFG_CONTEXT = b"sdp/v1/nodecfg"
SHARD_CONTEXT = b"sdp/v1/shard"

DEFAULT_VIOLATION_WINDOW = 100
DEFAULT_VIOLATION_THRESHOLD = 10


def shard_select(user: bytes, purpose: bytes, candidates: list[bytes]) -> bytes:
    """Stable hash of (user, purpose) over a sorted candidate node list.
    Clients run the same function over the node map, so routing never
    needs the controller on the hot path."""
    h = crypto.digest(SHARD_CONTEXT + crypto.lp(user) + crypto.lp(purpose))
    return sorted(candidates)[int.from_bytes(h[:8], "big") % len(candidates)]


def fmt_id(b: bytes) -> str:
    """Printable identifier for receipts and logs."""
    try:
        t = b.decode("ascii")
        if t.isprintable() and " " not in t:
            return t
    except UnicodeDecodeError:
        pass
    return "0x" + b.hex()


class ControlChannel(Protocol):
    """Controller-side view of the controller->node links. Returns the
    node's encoded reply, or None when the message was lost."""

    def send(self, node: bytes, frame: bytes) -> bytes | None: ...


@dataclass
class Consent:
    granted_at: int
    revoked_at: int | None = None

    @property
    def active(self) -> bool:
        return self.revoked_at is None


@dataclass
class PurposeInfo:
    retention: int
    region: bytes
    erased: bool = False


@dataclass
class AppInfo:
    pubkey: bytes
    grants: dict[bytes, Rights]


@dataclass
class NodeInfo:
    region: bytes
    pubkey: bytes
    expected_build_id: bytes = DEFAULT_BUILD_ID
    status: str = "registered"  # registered | serving | quarantined


@dataclass
class ErasureReceipt:
    """Auditable record of one erasure: what was targeted, how the scheme
    carried it out, and the acknowledged fan-out."""

    selector: str
    scheme: crypto.Scheme
    control_messages_sent: int
    kt_entries_removed: int
    tuples_purged: int
    ts: int

    def line(self) -> str:
        return (
            f"erased {self.selector} scheme={self.scheme.name} "
            f"msgs={self.control_messages_sent} keys_removed={self.kt_entries_removed} "
            f"purged={self.tuples_purged} t={self.ts}"
        )


@dataclass(frozen=True)
class ComplianceRow:
    article: str
    functionality: str
    plane: str
    status: str
    detail: str


class KeyVault:
    """The deployment's only persistent holder of key material; persisted
    solely inside the sealed controller snapshot."""

    def __init__(self, scheme: crypto.Scheme, rng: crypto.RandomSource):
        self.scheme = scheme
        self._rng = rng
        self.user_secrets: dict[bytes, bytes] = {}
        self.purpose_secrets: dict[bytes, bytes] = {}
        self.pair_keys: dict[tuple[bytes, bytes], bytes] = {}
        self.node_log_keys: dict[bytes, bytes] = {}

    def ensure_user_secret(self, user: bytes) -> bytes:
        if user not in self.user_secrets:
            self.user_secrets[user] = self._rng(crypto.KEY_LEN)
        return self.user_secrets[user]

    def ensure_purpose_secret(self, purpose: bytes) -> bytes:
        if purpose not in self.purpose_secrets:
            self.purpose_secrets[purpose] = self._rng(crypto.KEY_LEN)
        return self.purpose_secrets[purpose]

    def ensure_pair_key(self, user: bytes, purpose: bytes) -> bytes:
        if (user, purpose) not in self.pair_keys:
            self.pair_keys[(user, purpose)] = self._rng(crypto.KEY_LEN)
        return self.pair_keys[(user, purpose)]

    def node_log_key(self, node: bytes) -> bytes:
        if node not in self.node_log_keys:
            self.node_log_keys[node] = self._rng(crypto.KEY_LEN)
        return self.node_log_keys[node]

    def resolvable_tuple_keys(self) -> dict[tuple[bytes, bytes] | bytes, bytes]:
        """Every tuple cipher key still derivable from vault material.
        Test-support door for erasure-soundness oracles; production code
        never calls it."""
        out: dict = {}
        if self.scheme is crypto.Scheme.PER_USER:
            for u, s in self.user_secrets.items():
                out[u] = crypto.derive_tuple_key(self.scheme, crypto.UserSecret(s), u, b"-")
        elif self.scheme is crypto.Scheme.PER_USER_PURPOSE:
            out.update(self.pair_keys)
        else:
            for u, us in self.user_secrets.items():
                for p, ps in self.purpose_secrets.items():
                    out[(u, p)] = crypto.derive_tuple_key(
                        self.scheme, (crypto.UserSecret(us), crypto.PurposeSecret(ps)), u, p
                    )
        return out

    def live_material(self) -> list[bytes]:
        """All raw secret byte-strings currently held (leak-scan support)."""
        return (
            list(self.user_secrets.values())
            + list(self.purpose_secrets.values())
            + list(self.pair_keys.values())
            + list(self.node_log_keys.values())
        )


class Controller:
    """Logically centralized policy engine over a control channel."""

    def __init__(
        self,
        scheme: crypto.Scheme,
        channel: ControlChannel,
        rng: crypto.RandomSource = crypto.default_rng,
        clock: Callable[[], int] = lambda: 0,
        snapshot_fs=None,
        master_key: bytes | None = None,
        violation_threshold: int = DEFAULT_VIOLATION_THRESHOLD,
        violation_window: int = DEFAULT_VIOLATION_WINDOW,
    ):
        self.scheme = scheme
        self.channel = channel
        self.rng = rng
        self.clock = clock
        self.snapshot_fs = snapshot_fs
        self.master_key = master_key
        self.violation_threshold = violation_threshold
        self.violation_window = violation_window

        self.users: dict[bytes, dict] = {}
        self.purposes: dict[bytes, PurposeInfo] = {}
        self.consents: dict[tuple[bytes, bytes], Consent] = {}
        self.apps: dict[bytes, AppInfo] = {}
        self.nodes: dict[bytes, NodeInfo] = {}

        self.vault = KeyVault(scheme, rng)
        self.receipts: list[ErasureReceipt] = []
        self.violations: list[ViolationEvent] = []
        self._recent_violations: list[ViolationEvent] = []
        self.actions: list[str] = []
        self.pending_purges: list[tuple[bytes, KtKind, bytes, bytes]] = []
        self._provisioned: dict[bytes, set[tuple]] = {}
        self.sweeps = 0
        self.erasure_count = 0
        self.violation_count = 0

    # -- plumbing ---------------------------------------------------------

    def _send(self, node: bytes, msg: wire.Message) -> wire.Message | None:
        reply = self.channel.send(node, wire.encode_frame(msg))
        if reply is None:
            return None
        return wire.decode_frame(reply)

    def _serving_nodes(self) -> list[bytes]:
        return sorted(n for n, i in self.nodes.items() if i.status == "serving")

    def _act(self, what: str) -> None:
        self.actions.append(what)

    def _persist(self) -> None:
        if self.snapshot_fs is not None and self.master_key is not None:
            sealed = crypto.seal(
                self.master_key, crypto.CTX_SNAPSHOT, self.serialize(), self.rng
            ).pack()
            self.snapshot_fs.write(SNAPSHOT_FILE, sealed)

    # -- registration ---------------------------------------------------------

    def register_node(
        self,
        node: bytes,
        region: bytes,
        pubkey: bytes,
        expected_build_id: bytes = DEFAULT_BUILD_ID,
    ) -> None:
        check_id(node, "node id")
        if node in self.nodes:
            raise SdpError(f"node {node!r} already registered")
        self.nodes[node] = NodeInfo(region=region, pubkey=pubkey, expected_build_id=expected_build_id)
        self._persist()

    def register_user(self, user: bytes) -> None:
        check_id(user, "user")
        if user in self.users:
            raise SdpError(f"user {user!r} already registered")
        self.users[user] = {"erased": False}
        self._persist()

    def register_purpose(self, purpose: bytes, retention: int, region: bytes) -> None:
        check_id(purpose, "purpose")
        if purpose in self.purposes:
            raise SdpError(f"purpose {purpose!r} already registered")
        self.purposes[purpose] = PurposeInfo(retention=retention, region=region)
        self._persist()

    def register_app(self, app: bytes, pubkey: bytes, grants: dict[bytes, Rights]) -> None:
        check_id(app, "app id")
        if app in self.apps:
            raise DuplicateApp(f"app {app!r} already registered")
        for purpose in grants:
            if purpose not in self.purposes:
                raise UnknownPurpose(f"grant references unknown purpose {purpose!r}")
        self.apps[app] = AppInfo(pubkey=pubkey, grants=dict(grants))
        for node in self._serving_nodes():
            self._push_app(node, app)
        self._persist()

    def revoke_app(self, app: bytes) -> None:
        info = self.apps.pop(app, None)
        if info is None:
            raise UnknownApp(f"app {app!r} not registered")
        for node in self._serving_nodes():
            self._send(node, wire.AtUpsert(app, b""))
            for purpose in sorted(info.grants):
                self._send(node, wire.PtSet(app, purpose, 0))
        self._act(f"app_revoked {app!r}")
        self._persist()

    def _push_app(self, node: bytes, app: bytes) -> None:
        info = self.apps[app]
        self._send(node, wire.AtUpsert(app, info.pubkey))
        for purpose in sorted(info.grants):
            self._send(node, wire.PtSet(app, purpose, info.grants[purpose].to_byte()))

    # -- consent and key provisioning ---------------------------------------------

    def record_consent(self, user: bytes, purpose: bytes) -> None:
        if user not in self.users or self.users[user]["erased"]:
            raise UnknownUser(f"user {user!r} not registered")
        pi = self.purposes.get(purpose)
        if pi is None or pi.erased:
            raise UnknownPurpose(f"purpose {purpose!r} not registered")
        if (user, purpose) in self.consents:
            raise ConsentExists(f"consent ({user!r}, {purpose!r}) already recorded")
        self.consents[(user, purpose)] = Consent(granted_at=self.clock())
        node = self.shard_for(user, purpose)
        if self.nodes[node].status == "serving":
            self._provision_pair(node, user, purpose)
        self._persist()

    def _provision_pair(self, node: bytes, user: bytes, purpose: bytes, force: bool = False) -> None:
        """Install the KT material the shard node needs for (user, purpose);
        idempotent per part unless forced (violation repair)."""
        marks = self._provisioned.setdefault(node, set())
        if self.scheme is crypto.Scheme.PER_USER:
            if force or ("user", user) not in marks:
                secret = self.vault.ensure_user_secret(user)
                self._send(node, wire.KtInstall(KtKind.USER, user, b"", secret))
                marks.add(("user", user))
        elif self.scheme is crypto.Scheme.PER_USER_PURPOSE:
            if force or ("pair", user, purpose) not in marks:
                key = self.vault.ensure_pair_key(user, purpose)
                self._send(node, wire.KtInstall(KtKind.PAIR, user, purpose, key))
                marks.add(("pair", user, purpose))
        else:
            if force or ("user", user) not in marks:
                us = self.vault.ensure_user_secret(user)
                self._send(node, wire.KtInstall(KtKind.USER, user, b"", us))
                marks.add(("user", user))
            if force or ("purpose", purpose) not in marks:
                ps = self.vault.ensure_purpose_secret(purpose)
                self._send(node, wire.KtInstall(KtKind.PURPOSE, b"", purpose, ps))
                marks.add(("purpose", purpose))

    # -- sharding ------------------------------------------------------------------

    def shard_for(self, user: bytes, purpose: bytes) -> bytes:
        pi = self.purposes.get(purpose)
        if pi is None:
            raise UnknownPurpose(f"purpose {purpose!r} not registered")
        candidates = sorted(
            n for n, i in self.nodes.items()
            if i.region == pi.region and i.status != "quarantined"
        )
        if not candidates:
            raise NoNodeInRegion(f"no node in region {pi.region!r}")
        return shard_select(user, purpose, candidates)

    # -- node bootstrap and attestation ------------------------------------------------

    def node_config_digest(self, node: bytes) -> bytes:
        info = self.nodes[node]
        return crypto.digest(
            NODECFG_CONTEXT
            + crypto.lp(node)
            + bytes([self.scheme.value])
            + crypto.lp(info.region)
        )

    def bootstrap_node(self, node: bytes) -> None:
        info = self.nodes.get(node)
        if info is None:
            raise UnknownNode(f"node {node!r} not registered")
        nonce = self.rng(32)
        cfg_digest = self.node_config_digest(node)
        reply = self._send(node, wire.AttestReq(nonce, cfg_digest))
        expected = crypto.digest(info.expected_build_id + cfg_digest)
        ok = (
            isinstance(reply, wire.AttestReport)
            and reply.node_pubkey == info.pubkey
            and reply.measurement == expected
            and crypto.verify(
                reply.node_pubkey,
                attest_message(reply.node_pubkey, reply.measurement, nonce),
                reply.signature,
            )
        )
        if not ok:
            info.status = "quarantined"
            self._act(f"attestation_failed {node!r}")
            self._persist()
            raise AttestationFailed(f"node {node!r} failed attestation")

        self._provisioned[node] = set()
        self._send(node, wire.Bootstrap(node, self.scheme, self.vault.node_log_key(node)))
        info.status = "serving"
        for app in sorted(self.apps):
            self._push_app(node, app)
        for (user, purpose) in sorted(self.consents):
            if self.consents[(user, purpose)].active and self.shard_for(user, purpose) == node:
                self._provision_pair(node, user, purpose)
        self._persist()

    # -- erasure -----------------------------------------------------------------------

    def _kt_remove(self, node: bytes, kind: KtKind, user: bytes, purpose: bytes) -> tuple[int, int]:
        """Returns (messages sent, entries acknowledged removed)."""
        reply = self._send(node, wire.KtRemove(kind, user, purpose))
        removed = reply.code if isinstance(reply, wire.Ack) and not reply.is_error else 0
        marks = self._provisioned.get(node, set())
        marks.discard({KtKind.USER: ("user", user),
                       KtKind.PAIR: ("pair", user, purpose),
                       KtKind.PURPOSE: ("purpose", purpose)}[kind])
        return 1, removed

    def _purge(self, node: bytes, kind: KtKind, user: bytes, purpose: bytes) -> tuple[int, int]:
        reply = self._send(node, wire.Purge(kind, user, purpose))
        purged = reply.code if isinstance(reply, wire.Ack) and not reply.is_error else 0
        return 1, purged

    def _nodes_holding(self, mark: tuple) -> list[bytes]:
        return sorted(n for n, marks in self._provisioned.items() if mark in marks)

    def revoke_consent(self, user: bytes, purpose: bytes) -> ErasureReceipt:
        consent = self.consents.get((user, purpose))
        if consent is None or not consent.active:
            raise NoSuchConsent(f"no active consent ({user!r}, {purpose!r})")
        msgs = removed = purged = 0
        node = self.shard_for(user, purpose)
        if self.scheme is crypto.Scheme.PER_USER_PURPOSE:
            # pair key exists: one removal message erases the pair
            m, r = self._kt_remove(node, KtKind.PAIR, user, purpose)
            msgs += m
            removed += r
            self.vault.pair_keys.pop((user, purpose), None)
            self.pending_purges.append((node, KtKind.PAIR, user, purpose))
        else:
            # shared key material: pair-granular erasure needs a physical purge
            m, p = self._purge(node, KtKind.PAIR, user, purpose)
            msgs += m
            purged += p
        consent.revoked_at = self.clock()
        receipt = self._receipt(f"pair:{fmt_id(user)}/{fmt_id(purpose)}", msgs, removed, purged)
        self._persist()
        return receipt

    def erase_user(self, user: bytes) -> ErasureReceipt:
        info = self.users.get(user)
        if info is None or info["erased"]:
            raise UnknownUser(f"user {user!r} not registered")
        msgs = removed = purged = 0
        pairs = sorted(p for (u, p), c in self.consents.items() if u == user and c.active)
        if self.scheme is crypto.Scheme.PER_USER_PURPOSE:
            # one key per pair: linear in the number of purposes
            for purpose in pairs:
                node = self.shard_for(user, purpose)
                m, r = self._kt_remove(node, KtKind.PAIR, user, purpose)
                msgs += m
                removed += r
                self.vault.pair_keys.pop((user, purpose), None)
                self.pending_purges.append((node, KtKind.PAIR, user, purpose))
        else:
            # single user secret (or user part): one message per holder node
            for node in self._nodes_holding(("user", user)):
                m, r = self._kt_remove(node, KtKind.USER, user, b"")
                msgs += m
                removed += r
                self.pending_purges.append((node, KtKind.USER, user, b""))
            self.vault.user_secrets.pop(user, None)
        for purpose in pairs:
            self.consents[(user, purpose)].revoked_at = self.clock()
        info["erased"] = True
        receipt = self._receipt(f"user:{fmt_id(user)}", msgs, removed, purged)
        self._persist()
        return receipt

    def erase_purpose(self, purpose: bytes) -> ErasureReceipt:
        pi = self.purposes.get(purpose)
        if pi is None or pi.erased:
            raise UnknownPurpose(f"purpose {purpose!r} not registered")
        msgs = removed = purged = 0
        pairs = sorted(u for (u, p), c in self.consents.items() if p == purpose and c.active)
        if self.scheme is crypto.Scheme.PER_USER:
            # user keys cannot erase a purpose: delegated indexed purge
            for node in sorted(
                n for n, i in self.nodes.items()
                if i.region == pi.region and i.status == "serving"
            ):
                m, p = self._purge(node, KtKind.PURPOSE, b"", purpose)
                msgs += m
                purged += p
        elif self.scheme is crypto.Scheme.PER_USER_PURPOSE:
            for user in pairs:
                node = self.shard_for(user, purpose)
                m, r = self._kt_remove(node, KtKind.PAIR, user, purpose)
                msgs += m
                removed += r
                self.vault.pair_keys.pop((user, purpose), None)
                self.pending_purges.append((node, KtKind.PAIR, user, purpose))
        else:
            # composite: destroying the purpose part erases the whole purpose
            for node in self._nodes_holding(("purpose", purpose)):
                m, r = self._kt_remove(node, KtKind.PURPOSE, b"", purpose)
                msgs += m
                removed += r
                self.pending_purges.append((node, KtKind.PURPOSE, b"", purpose))
            self.vault.purpose_secrets.pop(purpose, None)
        for user in pairs:
            self.consents[(user, purpose)].revoked_at = self.clock()
        pi.erased = True
        receipt = self._receipt(f"purpose:{fmt_id(purpose)}", msgs, removed, purged)
        self._persist()
        return receipt

    def _receipt(self, selector: str, msgs: int, removed: int, purged: int) -> ErasureReceipt:
        receipt = ErasureReceipt(
            selector=selector,
            scheme=self.scheme,
            control_messages_sent=msgs,
            kt_entries_removed=removed,
            tuples_purged=purged,
            ts=self.clock(),
        )
        self.receipts.append(receipt)
        self.erasure_count += 1
        self._act(receipt.line())
        return receipt

    # -- retention --------------------------------------------------------------------------

    def enforce_retention(self, now: int | None = None) -> list[ErasureReceipt]:
        """Revoke every consent past its purpose's retention (boundary
        inclusive), then run the physical purges earlier crypto-erasures
        left behind."""
        t = self.clock() if now is None else now
        self.sweeps += 1
        backlog, self.pending_purges = self.pending_purges, []
        receipts = []
        for (user, purpose) in sorted(self.consents):
            consent = self.consents[(user, purpose)]
            if not consent.active:
                continue
            retention = self.purposes[purpose].retention
            if consent.granted_at + retention <= t:
                receipts.append(self.revoke_consent(user, purpose))
        for (node, kind, user, purpose) in backlog:
            if self.nodes[node].status == "serving":
                self._purge(node, kind, user, purpose)
        self._persist()
        return receipts

    # -- violation handling -------------------------------------------------------------------

    def handle_violation(self, event: ViolationEvent) -> str:
        """Record the event and take the mandated action: repair missing
        keys for live consents, revoke grants that keep getting denied."""
        self.violations.append(event)
        self.violation_count += 1
        self._recent_violations.append(event)
        if len(self._recent_violations) > self.violation_window:
            self._recent_violations.pop(0)

        action = "recorded"
        if event.kind is ViolationKind.MISSING_KEY and event.user and event.purpose:
            consent = self.consents.get((event.user, event.purpose))
            known = event.user in self.users and event.purpose in self.purposes
            if consent is not None and consent.active:
                node = self.shard_for(event.user, event.purpose)
                self._provision_pair(node, event.user, event.purpose, force=True)
                action = "kt_reinstalled"
            elif not known:
                # data-plane saw a subject the control plane never issued:
                # keep it auditable under its own label
                action = "unknown_subject"
        elif event.kind is ViolationKind.PERMISSION_DENIED and event.app and event.purpose:
            denials = sum(
                1
                for v in self._recent_violations
                if v.kind is ViolationKind.PERMISSION_DENIED
                and v.app == event.app
                and v.purpose == event.purpose
            )
            info = self.apps.get(event.app)
            if denials >= self.violation_threshold and info and event.purpose in info.grants:
                del info.grants[event.purpose]
                for node in self._serving_nodes():
                    self._send(node, wire.PtSet(event.app, event.purpose, 0))
                action = "grant_revoked"
        self._act(f"violation {event.kind.value} node={event.node!r} -> {action}")
        self._persist()
        return action

    # -- client-facing ---------------------------------------------------------------------------

    def handle_app_frame(self, frame: bytes) -> bytes:
        msg = wire.decode_frame(frame)
        if not isinstance(msg, wire.AppHello):
            raise UnknownApp("expected APP_HELLO")
        if msg.app not in self.apps:
            raise UnknownApp(f"app {msg.app!r} not registered")
        return wire.encode_frame(self.node_map())

    def node_map(self) -> wire.NodeMap:
        return wire.NodeMap(
            nodes=tuple(
                (n, self.nodes[n].region)
                for n in self._serving_nodes()
            ),
            purposes=tuple(
                (p, self.purposes[p].region)
                for p in sorted(self.purposes)
                if not self.purposes[p].erased
            ),
        )

    # -- compliance report --------------------------------------------------------------------------

    def compliance_report(self) -> list[ComplianceRow]:
        """Live article-by-article status of the deployment."""
        n_nodes = len(self._serving_nodes())
        n_grants = sum(len(a.grants) for a in self.apps.values())
        revoked = sum(1 for c in self.consents.values() if not c.active)
        rows = [
            ComplianceRow("5.1", "Purpose limitation", "storage+controller", "active",
                          f"{n_grants} purpose grants enforced on {n_nodes} nodes"),
            ComplianceRow("21", "Right to object", "storage+controller", "active",
                          f"{revoked} consents revoked"),
            ComplianceRow("5.1", "Storage limitation", "controller", "active",
                          f"{self.sweeps} retention sweeps run"),
            ComplianceRow("17", "Right to be forgotten", "controller", "active",
                          f"{self.erasure_count} erasure receipts issued"),
            ComplianceRow("15", "Right of access", "storage", "active",
                          "user/purpose secondary indexes serve subject access scans"),
            ComplianceRow("20", "Right to portability", "storage", "active",
                          "scan export in canonical key order"),
            ComplianceRow("5.2", "Accountability", "storage+controller", "active",
                          "hash-chained audit logs verifiable per node"),
            ComplianceRow("30", "Records of processing", "storage", "active",
                          "one sealed audit record per request"),
            ComplianceRow("33,34", "Breach notification", "storage+controller", "active",
                          f"{self.violation_count} violation events recorded"),
            ComplianceRow("25", "Protection by design", "storage", "active",
                          "tuples sealed at rest, keys volatile"),
            ComplianceRow("32", "Security of data", "storage", "active",
                          "authenticated encryption plus per-purpose access control"),
            ComplianceRow("13", "Consent acquisition", "controller", "out-of-scope",
                          "consent registry only; policy tooling external"),
            ComplianceRow("46", "Transfer safeguards", "controller", "out-of-scope",
                          "region-tagged sharding only; transfer policy external"),
        ]
        return rows

    # -- persistence -----------------------------------------------------------------------------------

    def serialize(self) -> bytes:
        def hx(b: bytes) -> str:
            return b.hex()

        state = {
            "scheme": self.scheme.value,
            "users": {hx(u): i for u, i in sorted(self.users.items())},
            "purposes": {
                hx(p): {"retention": i.retention, "region": hx(i.region), "erased": i.erased}
                for p, i in sorted(self.purposes.items())
            },
            "consents": [
                {"user": hx(u), "purpose": hx(p), "granted_at": c.granted_at,
                 "revoked_at": c.revoked_at}
                for (u, p), c in sorted(self.consents.items())
            ],
            "apps": {
                hx(a): {
                    "pubkey": hx(i.pubkey),
                    "grants": {hx(p): r.to_byte() for p, r in sorted(i.grants.items())},
                }
                for a, i in sorted(self.apps.items())
            },
            "nodes": {
                hx(n): {"region": hx(i.region), "pubkey": hx(i.pubkey),
                        "build_id": hx(i.expected_build_id), "status": i.status}
                for n, i in sorted(self.nodes.items())
            },
            "vault": {
                "user_secrets": {hx(u): hx(s) for u, s in sorted(self.vault.user_secrets.items())},
                "purpose_secrets": {hx(p): hx(s) for p, s in sorted(self.vault.purpose_secrets.items())},
                "pair_keys": [
                    {"user": hx(u), "purpose": hx(p), "key": hx(k)}
                    for (u, p), k in sorted(self.vault.pair_keys.items())
                ],
                "node_log_keys": {hx(n): hx(k) for n, k in sorted(self.vault.node_log_keys.items())},
            },
            "pending_purges": [
                {"node": hx(n), "kind": k.value, "user": hx(u), "purpose": hx(p)}
                for (n, k, u, p) in self.pending_purges
            ],
            "sweeps": self.sweeps,
            "erasure_count": self.erasure_count,
            "violation_count": self.violation_count,
        }
        return json.dumps(state, sort_keys=True).encode()

    def restore(self, blob: bytes) -> None:
        """Rehydrate registry and vault from a decrypted snapshot."""
        state = json.loads(blob.decode())

        def uh(s: str) -> bytes:
            return bytes.fromhex(s)

        if state["scheme"] != self.scheme.value:
            raise SdpError("snapshot scheme differs from configured scheme")
        self.users = {uh(u): i for u, i in state["users"].items()}
        self.purposes = {
            uh(p): PurposeInfo(i["retention"], uh(i["region"]), i["erased"])
            for p, i in state["purposes"].items()
        }
        self.consents = {
            (uh(c["user"]), uh(c["purpose"])): Consent(c["granted_at"], c["revoked_at"])
            for c in state["consents"]
        }
        self.apps = {
            uh(a): AppInfo(
                pubkey=uh(i["pubkey"]),
                grants={uh(p): Rights.from_byte(r) for p, r in i["grants"].items()},
            )
            for a, i in state["apps"].items()
        }
        self.nodes = {
            uh(n): NodeInfo(uh(i["region"]), uh(i["pubkey"]), uh(i["build_id"]), i["status"])
            for n, i in state["nodes"].items()
        }
        self.vault.user_secrets = {uh(u): uh(s) for u, s in state["vault"]["user_secrets"].items()}
        self.vault.purpose_secrets = {
            uh(p): uh(s) for p, s in state["vault"]["purpose_secrets"].items()
        }
        self.vault.pair_keys = {
            (uh(e["user"]), uh(e["purpose"])): uh(e["key"]) for e in state["vault"]["pair_keys"]
        }
        self.vault.node_log_keys = {uh(n): uh(k) for n, k in state["vault"]["node_log_keys"].items()}
        self.pending_purges = [
            (uh(e["node"]), KtKind(e["kind"]), uh(e["user"]), uh(e["purpose"]))
            for e in state["pending_purges"]
        ]
        self.sweeps = state["sweeps"]
        self.erasure_count = state["erasure_count"]
        self.violation_count = state["violation_count"]
        # Provisioned marks are rebuilt at next bootstrap; nodes restart
        # when the controller does in operational deployments.
        self._provisioned = {}
