"""Storage node: the data plane.

A node authenticates sessions, runs every client request through a fixed
enforcement pipeline, persists sealed tuples with secondary indexes, and
appends one audit record per decision. It takes no policy decisions of
its own: the tables pushed by the controller are its entire policy
state, and they are volatile — a restarted node refuses every request
until the controller bootstraps it again.

Pipeline order (failures short-circuit, earliest stage wins):
session check, permission lookup, key resolution, seal/open, engine
operation, index maintenance, audit append, violation event.

Requests are handled one at a time to completion (control messages
serialize with them), which keeps traces deterministic; connections may
queue requests concurrently on top of this.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import crypto, wire
from .auditlog import AuditLog
from .errors import (
    AlreadyExists,
    AuthFailure,
    MalformedKey,
    MaterialMismatch,
    MissingKey,
    NotFound,
    ProtocolError,
    SchemeMismatch,
)
from .fs import Filesystem
from .kvengine import LogStructuredKV
from .model import (
    Op,
    Outcome,
    Rights,
    TupleKey,
    ViolationEvent,
    ViolationKind,
    check_id,
    decode_tuple_key,
    encode_tuple_key,
    rights_allow,
)
from .tables import KtEntry, KtKind, KtSelector, NodeTables

DEFAULT_BUILD_ID = b"sdp-node/1"
TUPLE_AAD_VERSION = b"\x01"

AUTH_CONTEXT = b"sdp/v1/session-auth"
ATTEST_CONTEXT = b"sdp/v1/attest"

# ACK code for control messages whose shape does not fit the deployment.
ACK_ERR_CONTROL = 0xFFFF

_OP_BY_TYPE = {
    wire.MsgType.GET: Op.GET,
    wire.MsgType.PUT: Op.PUT,
    wire.MsgType.INSERT: Op.INSERT,
    wire.MsgType.DELETE: Op.DELETE,
    wire.MsgType.SCAN_USER: Op.SCAN_USER,
    wire.MsgType.SCAN_PURPOSE: Op.SCAN_PURPOSE,
}


def session_auth_message(challenge: bytes, node: bytes, app: bytes) -> bytes:
    """Bytes an application signs to answer a session challenge."""
    return AUTH_CONTEXT + crypto.lp(challenge) + crypto.lp(node) + crypto.lp(app)


def attest_message(node_pubkey: bytes, measurement: bytes, nonce: bytes) -> bytes:
    """Bytes a node signs to attest its firmware measurement."""
    return ATTEST_CONTEXT + crypto.lp(node_pubkey) + crypto.lp(measurement) + crypto.lp(nonce)


def tuple_aad(key: TupleKey) -> bytes:
    """Associated data binding a ciphertext to its claimed identity."""
    return encode_tuple_key(key) + TUPLE_AAD_VERSION


@dataclass
class Session:
    app: bytes
    token: bytes
    established: int


class StorageNode:
    """One data-plane node over one persistence namespace."""

    def __init__(
        self,
        node_id: bytes,
        region: bytes,
        fs: Filesystem,
        rng: crypto.RandomSource = crypto.default_rng,
        build_id: bytes = DEFAULT_BUILD_ID,
        identity_seed: bytes | None = None,
    ):
        self.node_id = check_id(node_id, "node id")
        self.region = region
        self.fs = fs
        self.rng = rng
        self.build_id = build_id
        # identity keys are the device's fused signing identity, not cipher
        # material; a fixed seed keeps it stable across process restarts
        seed_rng = (lambda n: identity_seed[:n]) if identity_seed else rng
        self.identity_priv, self.identity_pub = crypto.generate_keypair(seed_rng)
        self._boot_volatile_state()

    def _boot_volatile_state(self) -> None:
        self.serving = False
        self.tables: NodeTables | None = None
        self.sessions: dict[str, Session] = {}
        self.challenges: dict[str, bytes] = {}
        self.audit = AuditLog(self.fs)
        self.kv = LogStructuredKV(self.fs)
        self.user_index: dict[bytes, set[TupleKey]] = {}
        self.purpose_index: dict[bytes, set[TupleKey]] = {}
        self.clock = 0
        self.event_seq = 0
        self.events: list[ViolationEvent] = []
        self._rebuild_indexes()

    def restart(self) -> None:
        """Power-cycle: all volatile state (tables, sessions, log key) is
        lost; persisted ciphertext survives."""
        self._boot_volatile_state()

    def _rebuild_indexes(self) -> None:
        for key_bytes, rec in self.kv.items():
            try:
                tk = decode_tuple_key(key_bytes)
            except MalformedKey:
                continue  # corrupt key bytes: unreachable via GET anyway
            self.user_index.setdefault(tk.user, set()).add(tk)
            self.purpose_index.setdefault(tk.purpose, set()).add(tk)
            self.clock = max(self.clock, rec.modified + 1)

    # -- events ------------------------------------------------------------

    def _emit(
        self,
        kind: ViolationKind,
        app: bytes | None = None,
        user: bytes | None = None,
        purpose: bytes | None = None,
        name: bytes | None = None,
    ) -> None:
        ev = ViolationEvent(
            kind=kind,
            node=self.node_id,
            seq=self.event_seq,
            app=app,
            user=user,
            purpose=purpose,
            name=name,
        )
        self.event_seq += 1
        self.events.append(ev)

    def drain_events(self) -> list[bytes]:
        """Encoded EVENT frames pending for the controller channel."""
        out = [
            wire.encode_frame(
                wire.Event(
                    kind=ev.kind.value.encode(),
                    seq=ev.seq,
                    node=ev.node,
                    app=ev.app or b"",
                    user=ev.user or b"",
                    purpose=ev.purpose or b"",
                    name=ev.name if ev.name is not None else b"",
                )
            )
            for ev in self.events
        ]
        self.events.clear()
        return out

    def _log(
        self,
        op: str,
        outcome: Outcome,
        app: bytes | None = None,
        tuple_key: TupleKey | None = None,
        detail: int = 0,
    ) -> None:
        self.clock += 1
        self.audit.append(self.clock, op, outcome, app=app, tuple_key=tuple_key, detail=detail)

    # -- client channel ------------------------------------------------------

    def handle_client_frame(self, conn_id: str, frame: bytes) -> bytes:
        """Process one client frame; returns the encoded reply. Violation
        events accumulate and are drained separately to the controller."""
        msg = wire.decode_frame(frame)
        if isinstance(msg, wire.Hello):
            return wire.encode_frame(self._hello(conn_id, msg))
        if isinstance(msg, wire.Auth):
            return wire.encode_frame(self._auth(conn_id, msg))
        if msg.TYPE in _OP_BY_TYPE:
            return wire.encode_frame(self._request(conn_id, msg))
        raise ProtocolError(ProtocolError.UNKNOWN_TYPE, f"client sent {msg.TYPE.name}")

    def _hello(self, conn_id: str, msg: wire.Hello) -> wire.Message:
        if not self.serving:
            self._emit(ViolationKind.NOT_BOOTSTRAPPED, app=msg.app)
            return wire.AuthFail(Outcome.NOT_BOOTSTRAPPED)
        challenge = self.rng(32)
        self.challenges[conn_id] = challenge
        return wire.Challenge(challenge)

    def _auth(self, conn_id: str, msg: wire.Auth) -> wire.Message:
        if not self.serving:
            self._emit(ViolationKind.NOT_BOOTSTRAPPED, app=msg.app)
            return wire.AuthFail(Outcome.NOT_BOOTSTRAPPED)
        challenge = self.challenges.pop(conn_id, None)
        pubkey = self.tables.at.lookup(msg.app)
        ok = (
            challenge is not None
            and pubkey is not None
            and crypto.verify(
                pubkey, session_auth_message(challenge, self.node_id, msg.app), msg.signature
            )
        )
        if not ok:
            self._emit(ViolationKind.AUTH_FAILURE, app=msg.app)
            self._log("AUTH", Outcome.AUTH_FAILURE, app=msg.app)
            return wire.AuthFail(Outcome.AUTH_FAILURE)
        self.clock += 1
        session = Session(app=msg.app, token=self.rng(16), established=self.clock)
        self.sessions[conn_id] = session
        self._log("AUTH", Outcome.OK, app=msg.app)
        return wire.AuthOk(session.token)

    # -- request pipeline -----------------------------------------------------

    def _request(self, conn_id: str, msg: wire.Message) -> wire.Response:
        op = _OP_BY_TYPE[msg.TYPE]
        # stage 1: session
        if not self.serving:
            self._emit(ViolationKind.NOT_BOOTSTRAPPED)
            return wire.Response(Outcome.NOT_BOOTSTRAPPED)
        session = self.sessions.get(conn_id)
        if session is None:
            self._emit(ViolationKind.AUTH_FAILURE)
            self._log(op.value, Outcome.AUTH_FAILURE)
            return wire.Response(Outcome.AUTH_FAILURE)
        if op is Op.SCAN_USER:
            return self._scan(session, op, user=msg.user)
        if op is Op.SCAN_PURPOSE:
            return self._scan(session, op, purpose=msg.purpose)
        return self._point_op(session, op, msg)

    def _point_op(self, session: Session, op: Op, msg: wire.Message) -> wire.Response:
        app = session.app
        try:
            tk = TupleKey(msg.user, msg.purpose, msg.name)
        except MalformedKey:
            self._emit(ViolationKind.UNKNOWN_SUBJECT, app=app)
            self._log(op.value, Outcome.UNKNOWN_SUBJECT, app=app)
            return wire.Response(Outcome.UNKNOWN_SUBJECT)

        outcome = Outcome.OK
        items: tuple[bytes, ...] = ()
        # stage 2: permissions
        if not rights_allow(self.tables.pt.lookup(app, tk.purpose), op):
            outcome = Outcome.PERMISSION_DENIED
        else:
            # stage 3: cipher key
            try:
                key = self.tables.kt.resolve(tk.user, tk.purpose)
            except MissingKey:
                outcome = Outcome.MISSING_KEY
            else:
                # stages 4+5: crypto and engine
                outcome, items = self._engine_op(op, tk, key, msg)
        if outcome in (Outcome.PERMISSION_DENIED, Outcome.MISSING_KEY, Outcome.INTEGRITY_FAILURE):
            self._emit(
                VIOLATION_BY_OUTCOME[outcome], app=app,
                user=tk.user, purpose=tk.purpose, name=tk.name,
            )
        self._log(op.value, outcome, app=app, tuple_key=tk)
        return wire.Response(outcome, items)

    def _engine_op(
        self, op: Op, tk: TupleKey, key: bytes, msg: wire.Message
    ) -> tuple[Outcome, tuple[bytes, ...]]:
        kb = encode_tuple_key(tk)
        aad = tuple_aad(tk)
        self.clock += 1
        try:
            if op is Op.GET:
                rec = self.kv.get(kb)
                value = crypto.open_packed(key, aad, rec.sealed)
                return Outcome.OK, (value,)
            if op is Op.PUT:
                sealed = crypto.seal_packed(key, aad, msg.value, self.rng)
                self.kv.put(kb, sealed, self.clock)
                return Outcome.OK, ()
            if op is Op.INSERT:
                sealed = crypto.seal_packed(key, aad, msg.value, self.rng)
                self.kv.insert(kb, sealed, self.clock)
                self._index_add(tk)
                return Outcome.OK, ()
            # DELETE
            self.kv.delete(kb)
            self._index_remove(tk)
            return Outcome.OK, ()
        except NotFound:
            return Outcome.NOT_FOUND, ()
        except AlreadyExists:
            return Outcome.ALREADY_EXISTS, ()
        except AuthFailure:
            return Outcome.INTEGRITY_FAILURE, ()

    def _scan(
        self, session: Session, op: Op,
        user: bytes | None = None, purpose: bytes | None = None,
    ) -> wire.Response:
        app = session.app
        subject = user if user is not None else purpose
        try:
            check_id(subject, "scan subject")
        except MalformedKey:
            self._emit(ViolationKind.UNKNOWN_SUBJECT, app=app)
            self._log(op.value, Outcome.UNKNOWN_SUBJECT, app=app)
            return wire.Response(Outcome.UNKNOWN_SUBJECT)

        if user is not None:
            readable = any(
                rights_allow(r, Op.SCAN_USER)
                for r in (self.tables.pt.lookup(app, p) for p in self._granted_purposes(app))
            )
            keys = sorted(self.user_index.get(user, ()))
        else:
            readable = rights_allow(self.tables.pt.lookup(app, purpose), Op.SCAN_PURPOSE)
            keys = sorted(self.purpose_index.get(purpose, ()))
        if not readable:
            self._emit(ViolationKind.PERMISSION_DENIED, app=app, user=user, purpose=purpose)
            self._log(op.value, Outcome.PERMISSION_DENIED, app=app)
            return wire.Response(Outcome.PERMISSION_DENIED)

        items: list[bytes] = []
        count = 0
        for tk in keys:
            # per-tuple purpose check for cross-purpose user scans
            if not rights_allow(self.tables.pt.lookup(app, tk.purpose), op):
                continue
            try:
                key = self.tables.kt.resolve(tk.user, tk.purpose)
            except MissingKey:
                self._emit(ViolationKind.MISSING_KEY, app=app,
                           user=tk.user, purpose=tk.purpose, name=tk.name)
                continue
            try:
                rec = self.kv.get(encode_tuple_key(tk))
                value = crypto.open_packed(key, tuple_aad(tk), rec.sealed)
            except NotFound:
                continue  # index raced a purge; treat as absent
            except AuthFailure:
                self._emit(ViolationKind.INTEGRITY_FAILURE, app=app,
                           user=tk.user, purpose=tk.purpose, name=tk.name)
                continue
            items += [encode_tuple_key(tk), value]
            count += 1
        self._log(op.value, Outcome.OK, app=app, detail=count)
        return wire.Response(Outcome.OK, tuple(items))

    def _granted_purposes(self, app: bytes) -> list[bytes]:
        return self.tables.pt.granted_purposes(app)

    def _index_add(self, tk: TupleKey) -> None:
        self.user_index.setdefault(tk.user, set()).add(tk)
        self.purpose_index.setdefault(tk.purpose, set()).add(tk)

    def _index_remove(self, tk: TupleKey) -> None:
        self.user_index.get(tk.user, set()).discard(tk)
        self.purpose_index.get(tk.purpose, set()).discard(tk)

    # -- controller channel -----------------------------------------------------

    def handle_control_frame(self, frame: bytes) -> bytes:
        msg = wire.decode_frame(frame)
        if isinstance(msg, wire.AttestReq):
            return wire.encode_frame(self._attest(msg))
        if isinstance(msg, wire.Bootstrap):
            return wire.encode_frame(self._bootstrap(msg))
        if not self.serving:
            return wire.encode_frame(wire.Ack.error(Outcome.NOT_BOOTSTRAPPED))
        if isinstance(msg, wire.AtUpsert):
            if msg.pubkey:
                self.tables.at.upsert(msg.app, msg.pubkey)
            else:
                self.tables.at.remove(msg.app)
            self._log("AT_UPSERT", Outcome.OK, app=msg.app)
            return wire.encode_frame(wire.Ack(0))
        if isinstance(msg, wire.PtSet):
            self.tables.pt.set(msg.app, msg.purpose, Rights.from_byte(msg.rights))
            self._log("PT_SET", Outcome.OK, app=msg.app)
            return wire.encode_frame(wire.Ack(0))
        if isinstance(msg, wire.KtInstall):
            try:
                self.tables.kt.install(
                    KtEntry(msg.kind, msg.user or None, msg.purpose or None, msg.material)
                )
            except (SchemeMismatch, MaterialMismatch):
                return wire.encode_frame(wire.Ack(ACK_ERR_CONTROL))
            self._log("KT_INSTALL", Outcome.OK)
            return wire.encode_frame(wire.Ack(0))
        if isinstance(msg, wire.KtRemove):
            try:
                n = self.tables.kt.remove(KtSelector(msg.kind, msg.user or None, msg.purpose or None))
            except SchemeMismatch:
                return wire.encode_frame(wire.Ack(ACK_ERR_CONTROL))
            self._log("KT_REMOVE", Outcome.OK, detail=n)
            return wire.encode_frame(wire.Ack.count(n))
        if isinstance(msg, wire.Purge):
            n = self._purge(msg)
            self._log("PURGE", Outcome.OK, detail=n)
            return wire.encode_frame(wire.Ack.count(n))
        raise ProtocolError(ProtocolError.UNKNOWN_TYPE, f"control sent {msg.TYPE.name}")

    def _attest(self, msg: wire.AttestReq) -> wire.AttestReport:
        measurement = crypto.digest(self.build_id + msg.config_digest)
        sig = crypto.sign(
            self.identity_priv, attest_message(self.identity_pub, measurement, msg.nonce)
        )
        return wire.AttestReport(self.identity_pub, measurement, sig)

    def _bootstrap(self, msg: wire.Bootstrap) -> wire.Message:
        if self.serving:
            return wire.Ack.error(Outcome.ALREADY_EXISTS)  # AlreadyBootstrapped
        self.tables = NodeTables.empty(msg.scheme)
        self.audit.install_key(msg.log_key, self.rng)
        self.serving = True
        self._log("BOOTSTRAP", Outcome.OK)
        return wire.Ack(0)

    def _purge(self, msg: wire.Purge) -> int:
        if msg.kind is KtKind.USER:
            targets = set(self.user_index.get(msg.user, ()))
        elif msg.kind is KtKind.PURPOSE:
            targets = set(self.purpose_index.get(msg.purpose, ()))
        else:
            targets = {
                tk for tk in self.user_index.get(msg.user, ()) if tk.purpose == msg.purpose
            }
        ordered = sorted(targets)
        n = self.kv.purge_many([encode_tuple_key(tk) for tk in ordered])
        for tk in ordered:
            self._index_remove(tk)
        return n

    # -- introspection for tests and oracles ----------------------------------------

    def index_snapshot(self) -> tuple[dict, dict]:
        return (
            {u: set(s) for u, s in self.user_index.items() if s},
            {p: set(s) for p, s in self.purpose_index.items() if s},
        )


VIOLATION_BY_OUTCOME = {
    Outcome.PERMISSION_DENIED: ViolationKind.PERMISSION_DENIED,
    Outcome.MISSING_KEY: ViolationKind.MISSING_KEY,
    Outcome.INTEGRITY_FAILURE: ViolationKind.INTEGRITY_FAILURE,
}
