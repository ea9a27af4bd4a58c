"""Bit-exact framing and message encoding for all three channels.

Frame: ``"SDP" | 0x01 | msg_type | u32 payload length | payload``, with
payloads capped at 17 MiB. Every payload is a fixed-order sequence of
fields, each a 2-byte big-endian length-prefixed byte string; nested
structures (scan results, node maps) are flattened in the documented
field order with an explicit count field. Encoding is canonical: one
message has exactly one byte representation.

The same frames travel over the in-process simulation bus and over TLS
sockets; decoding never crashes on arbitrary input, it raises
:class:`ProtocolError` with the rejection reason.

ACK carries a single u16 ``code``: removal/purge count when replying to
KT_REMOVE or PURGE, 0 for plain success, and 0xFF00|status for errors.
(Counts above 0xFEFF are not representable; callers cap fan-outs long
before that.)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field as dc_field

from .crypto import Scheme, lp
from .errors import ProtocolError
from .model import Outcome
from .tables import KtKind

MAGIC = b"SDP"
VERSION = 0x01
MAX_PAYLOAD = 17 * 1024 * 1024
HEADER_LEN = 9

_HEADER = struct.Struct(">3sBBI")
_U16 = struct.Struct(">H")
_U64 = struct.Struct(">Q")

ACK_ERROR_BASE = 0xFF00


class MsgType(enum.IntEnum):
    # client <-> storage
    HELLO = 0x01
    CHALLENGE = 0x02
    AUTH = 0x03
    AUTH_OK = 0x04
    AUTH_FAIL = 0x05
    GET = 0x10
    PUT = 0x11
    INSERT = 0x12
    DELETE = 0x13
    SCAN_USER = 0x14
    SCAN_PURPOSE = 0x15
    RESPONSE = 0x1F
    # controller <-> storage
    BOOTSTRAP = 0x20
    AT_UPSERT = 0x21
    PT_SET = 0x22
    KT_INSTALL = 0x23
    KT_REMOVE = 0x24
    PURGE = 0x25
    ATTEST_REQ = 0x26
    ATTEST_REPORT = 0x27
    EVENT = 0x28
    ACK = 0x29
    # client <-> controller
    APP_HELLO = 0x30
    NODE_MAP = 0x31


# Status bytes used in RESPONSE/AUTH_FAIL and in ACK error codes.
_STATUS_TO_BYTE = {
    Outcome.OK: 0,
    Outcome.PERMISSION_DENIED: 1,
    Outcome.MISSING_KEY: 2,
    Outcome.AUTH_FAILURE: 3,
    Outcome.INTEGRITY_FAILURE: 4,
    Outcome.NOT_FOUND: 5,
    Outcome.ALREADY_EXISTS: 6,
    Outcome.NOT_BOOTSTRAPPED: 7,
    Outcome.UNKNOWN_SUBJECT: 8,
}
_BYTE_TO_STATUS = {v: k for k, v in _STATUS_TO_BYTE.items()}

_KIND_TO_BYTE = {KtKind.USER: 1, KtKind.PAIR: 2, KtKind.PURPOSE: 3}
_BYTE_TO_KIND = {v: k for k, v in _KIND_TO_BYTE.items()}


def _split_fields(payload: bytes) -> list[bytes]:
    fields = []
    off = 0
    while off < len(payload):
        if off + 2 > len(payload):
            raise ProtocolError(ProtocolError.TRUNCATED, "field prefix overruns payload")
        (n,) = _U16.unpack_from(payload, off)
        off += 2
        if off + n > len(payload):
            raise ProtocolError(ProtocolError.TRUNCATED, "field overruns payload")
        fields.append(payload[off:off + n])
        off += n
    return fields


def _u16_field(f: bytes, what: str) -> int:
    if len(f) != 2:
        raise ProtocolError(ProtocolError.TRUNCATED, f"{what} must be 2 bytes")
    return _U16.unpack(f)[0]


def _u64_field(f: bytes, what: str) -> int:
    if len(f) != 8:
        raise ProtocolError(ProtocolError.TRUNCATED, f"{what} must be 8 bytes")
    return _U64.unpack(f)[0]


def _byte_field(f: bytes, what: str) -> int:
    if len(f) != 1:
        raise ProtocolError(ProtocolError.TRUNCATED, f"{what} must be 1 byte")
    return f[0]


def _status_field(f: bytes) -> Outcome:
    b = _byte_field(f, "status")
    if b not in _BYTE_TO_STATUS:
        raise ProtocolError(ProtocolError.TRUNCATED, f"unknown status {b}")
    return _BYTE_TO_STATUS[b]


def _kind_field(f: bytes) -> KtKind:
    b = _byte_field(f, "kind")
    if b not in _BYTE_TO_KIND:
        raise ProtocolError(ProtocolError.TRUNCATED, f"unknown kt kind {b}")
    return _BYTE_TO_KIND[b]


def _exactly(fields: list[bytes], n: int, what: str) -> list[bytes]:
    if len(fields) != n:
        raise ProtocolError(ProtocolError.TRUNCATED, f"{what} expects {n} fields, got {len(fields)}")
    return fields


# -- client <-> storage ------------------------------------------------------

@dataclass(frozen=True)
class Hello:
    TYPE = MsgType.HELLO
    app: bytes

    def to_fields(self):
        return [self.app]

    @classmethod
    def from_fields(cls, f):
        (app,) = _exactly(f, 1, "HELLO")
        return cls(app)


@dataclass(frozen=True)
class Challenge:
    TYPE = MsgType.CHALLENGE
    challenge: bytes

    def to_fields(self):
        return [self.challenge]

    @classmethod
    def from_fields(cls, f):
        (c,) = _exactly(f, 1, "CHALLENGE")
        return cls(c)


@dataclass(frozen=True)
class Auth:
    TYPE = MsgType.AUTH
    app: bytes
    signature: bytes

    def to_fields(self):
        return [self.app, self.signature]

    @classmethod
    def from_fields(cls, f):
        app, sig = _exactly(f, 2, "AUTH")
        return cls(app, sig)


@dataclass(frozen=True)
class AuthOk:
    TYPE = MsgType.AUTH_OK
    token: bytes

    def to_fields(self):
        return [self.token]

    @classmethod
    def from_fields(cls, f):
        (t,) = _exactly(f, 1, "AUTH_OK")
        return cls(t)


@dataclass(frozen=True)
class AuthFail:
    TYPE = MsgType.AUTH_FAIL
    status: Outcome

    def to_fields(self):
        return [bytes([_STATUS_TO_BYTE[self.status]])]

    @classmethod
    def from_fields(cls, f):
        (s,) = _exactly(f, 1, "AUTH_FAIL")
        return cls(_status_field(s))


@dataclass(frozen=True)
class Get:
    TYPE = MsgType.GET
    user: bytes
    purpose: bytes
    name: bytes

    def to_fields(self):
        return [self.user, self.purpose, self.name]

    @classmethod
    def from_fields(cls, f):
        u, p, n = _exactly(f, 3, "GET")
        return cls(u, p, n)


@dataclass(frozen=True)
class Put:
    TYPE = MsgType.PUT
    user: bytes
    purpose: bytes
    name: bytes
    value: bytes

    def to_fields(self):
        return [self.user, self.purpose, self.name, self.value]

    @classmethod
    def from_fields(cls, f):
        u, p, n, v = _exactly(f, 4, "PUT")
        return cls(u, p, n, v)


@dataclass(frozen=True)
class Insert:
    TYPE = MsgType.INSERT
    user: bytes
    purpose: bytes
    name: bytes
    value: bytes

    def to_fields(self):
        return [self.user, self.purpose, self.name, self.value]

    @classmethod
    def from_fields(cls, f):
        u, p, n, v = _exactly(f, 4, "INSERT")
        return cls(u, p, n, v)


@dataclass(frozen=True)
class Delete:
    TYPE = MsgType.DELETE
    user: bytes
    purpose: bytes
    name: bytes

    def to_fields(self):
        return [self.user, self.purpose, self.name]

    @classmethod
    def from_fields(cls, f):
        u, p, n = _exactly(f, 3, "DELETE")
        return cls(u, p, n)


@dataclass(frozen=True)
class ScanUser:
    TYPE = MsgType.SCAN_USER
    user: bytes

    def to_fields(self):
        return [self.user]

    @classmethod
    def from_fields(cls, f):
        (u,) = _exactly(f, 1, "SCAN_USER")
        return cls(u)


@dataclass(frozen=True)
class ScanPurpose:
    TYPE = MsgType.SCAN_PURPOSE
    purpose: bytes

    def to_fields(self):
        return [self.purpose]

    @classmethod
    def from_fields(cls, f):
        (p,) = _exactly(f, 1, "SCAN_PURPOSE")
        return cls(p)


@dataclass(frozen=True)
class Response:
    """Status plus op-dependent items: the value for GET, nothing for
    writes, flattened (encoded key, value) pairs for scans."""

    TYPE = MsgType.RESPONSE
    status: Outcome
    items: tuple[bytes, ...] = ()

    def to_fields(self):
        return [bytes([_STATUS_TO_BYTE[self.status]]), *self.items]

    @classmethod
    def from_fields(cls, f):
        if not f:
            raise ProtocolError(ProtocolError.TRUNCATED, "RESPONSE needs a status")
        return cls(_status_field(f[0]), tuple(f[1:]))


# -- controller <-> storage -----------------------------------------------------

@dataclass(frozen=True)
class Bootstrap:
    TYPE = MsgType.BOOTSTRAP
    node: bytes
    scheme: Scheme
    log_key: bytes

    def to_fields(self):
        return [self.node, bytes([self.scheme.value]), self.log_key]

    @classmethod
    def from_fields(cls, f):
        node, scheme_b, log_key = _exactly(f, 3, "BOOTSTRAP")
        b = _byte_field(scheme_b, "scheme")
        try:
            scheme = Scheme(b)
        except ValueError:
            raise ProtocolError(ProtocolError.TRUNCATED, f"unknown scheme {b}") from None
        return cls(node, scheme, log_key)


@dataclass(frozen=True)
class AtUpsert:
    """Install or replace an app's public key; empty pubkey removes it."""

    TYPE = MsgType.AT_UPSERT
    app: bytes
    pubkey: bytes

    def to_fields(self):
        return [self.app, self.pubkey]

    @classmethod
    def from_fields(cls, f):
        app, pk = _exactly(f, 2, "AT_UPSERT")
        return cls(app, pk)


@dataclass(frozen=True)
class PtSet:
    """Set rights for (app, purpose); rights byte 0 revokes the entry."""

    TYPE = MsgType.PT_SET
    app: bytes
    purpose: bytes
    rights: int

    def to_fields(self):
        return [self.app, self.purpose, bytes([self.rights])]

    @classmethod
    def from_fields(cls, f):
        app, purpose, r = _exactly(f, 3, "PT_SET")
        return cls(app, purpose, _byte_field(r, "rights"))


@dataclass(frozen=True)
class KtInstall:
    TYPE = MsgType.KT_INSTALL
    kind: KtKind
    user: bytes
    purpose: bytes
    material: bytes

    def to_fields(self):
        return [bytes([_KIND_TO_BYTE[self.kind]]), self.user, self.purpose, self.material]

    @classmethod
    def from_fields(cls, f):
        kind, user, purpose, material = _exactly(f, 4, "KT_INSTALL")
        return cls(_kind_field(kind), user, purpose, material)


@dataclass(frozen=True)
class KtRemove:
    TYPE = MsgType.KT_REMOVE
    kind: KtKind
    user: bytes
    purpose: bytes

    def to_fields(self):
        return [bytes([_KIND_TO_BYTE[self.kind]]), self.user, self.purpose]

    @classmethod
    def from_fields(cls, f):
        kind, user, purpose = _exactly(f, 3, "KT_REMOVE")
        return cls(_kind_field(kind), user, purpose)


@dataclass(frozen=True)
class Purge:
    TYPE = MsgType.PURGE
    kind: KtKind
    user: bytes
    purpose: bytes

    def to_fields(self):
        return [bytes([_KIND_TO_BYTE[self.kind]]), self.user, self.purpose]

    @classmethod
    def from_fields(cls, f):
        kind, user, purpose = _exactly(f, 3, "PURGE")
        return cls(_kind_field(kind), user, purpose)


@dataclass(frozen=True)
class AttestReq:
    TYPE = MsgType.ATTEST_REQ
    nonce: bytes
    config_digest: bytes

    def to_fields(self):
        return [self.nonce, self.config_digest]

    @classmethod
    def from_fields(cls, f):
        nonce, cfg = _exactly(f, 2, "ATTEST_REQ")
        return cls(nonce, cfg)


@dataclass(frozen=True)
class AttestReport:
    TYPE = MsgType.ATTEST_REPORT
    node_pubkey: bytes
    measurement: bytes
    signature: bytes

    def to_fields(self):
        return [self.node_pubkey, self.measurement, self.signature]

    @classmethod
    def from_fields(cls, f):
        pk, m, sig = _exactly(f, 3, "ATTEST_REPORT")
        return cls(pk, m, sig)


@dataclass(frozen=True)
class Event:
    """Violation notification, node -> controller."""

    TYPE = MsgType.EVENT
    kind: bytes
    seq: int
    node: bytes
    app: bytes = b""
    user: bytes = b""
    purpose: bytes = b""
    name: bytes = b""

    def to_fields(self):
        return [self.kind, _U64.pack(self.seq), self.node, self.app,
                self.user, self.purpose, self.name]

    @classmethod
    def from_fields(cls, f):
        kind, seq, node, app, user, purpose, name = _exactly(f, 7, "EVENT")
        return cls(kind, _u64_field(seq, "seq"), node, app, user, purpose, name)


@dataclass(frozen=True)
class Ack:
    TYPE = MsgType.ACK
    code: int = 0

    def to_fields(self):
        return [_U16.pack(self.code)]

    @classmethod
    def from_fields(cls, f):
        (c,) = _exactly(f, 1, "ACK")
        return cls(_u16_field(c, "code"))

    @property
    def is_error(self) -> bool:
        return self.code >= ACK_ERROR_BASE

    @property
    def status(self) -> Outcome:
        if not self.is_error:
            return Outcome.OK
        return _BYTE_TO_STATUS.get(self.code - ACK_ERROR_BASE, Outcome.AUTH_FAILURE)

    @classmethod
    def error(cls, status: Outcome) -> "Ack":
        return cls(ACK_ERROR_BASE + _STATUS_TO_BYTE[status])

    @classmethod
    def count(cls, n: int) -> "Ack":
        if n >= ACK_ERROR_BASE:
            raise ValueError("count too large for ACK code")
        return cls(n)


# -- client <-> controller ---------------------------------------------------------

@dataclass(frozen=True)
class AppHello:
    TYPE = MsgType.APP_HELLO
    app: bytes

    def to_fields(self):
        return [self.app]

    @classmethod
    def from_fields(cls, f):
        (app,) = _exactly(f, 1, "APP_HELLO")
        return cls(app)


@dataclass(frozen=True)
class NodeMap:
    """Routing state a client needs to reach shards without the
    controller: serving nodes with regions, purposes with regions."""

    TYPE = MsgType.NODE_MAP
    nodes: tuple[tuple[bytes, bytes], ...] = dc_field(default=())
    purposes: tuple[tuple[bytes, bytes], ...] = dc_field(default=())

    def to_fields(self):
        out = [_U16.pack(len(self.nodes))]
        for node, region in self.nodes:
            out += [node, region]
        out.append(_U16.pack(len(self.purposes)))
        for purpose, region in self.purposes:
            out += [purpose, region]
        return out

    @classmethod
    def from_fields(cls, f):
        if not f:
            raise ProtocolError(ProtocolError.TRUNCATED, "NODE_MAP empty")
        n_nodes = _u16_field(f[0], "node count")
        idx = 1
        if len(f) < idx + 2 * n_nodes + 1:
            raise ProtocolError(ProtocolError.TRUNCATED, "NODE_MAP node list short")
        nodes = tuple(
            (f[idx + 2 * i], f[idx + 2 * i + 1]) for i in range(n_nodes)
        )
        idx += 2 * n_nodes
        n_purposes = _u16_field(f[idx], "purpose count")
        idx += 1
        if len(f) != idx + 2 * n_purposes:
            raise ProtocolError(ProtocolError.TRUNCATED, "NODE_MAP purpose list mismatch")
        purposes = tuple(
            (f[idx + 2 * i], f[idx + 2 * i + 1]) for i in range(n_purposes)
        )
        return cls(nodes, purposes)


_CLASSES = [
    Hello, Challenge, Auth, AuthOk, AuthFail,
    Get, Put, Insert, Delete, ScanUser, ScanPurpose, Response,
    Bootstrap, AtUpsert, PtSet, KtInstall, KtRemove, Purge,
    AttestReq, AttestReport, Event, Ack,
    AppHello, NodeMap,
]
_BY_TYPE = {cls.TYPE: cls for cls in _CLASSES}

Message = (
    Hello | Challenge | Auth | AuthOk | AuthFail
    | Get | Put | Insert | Delete | ScanUser | ScanPurpose | Response
    | Bootstrap | AtUpsert | PtSet | KtInstall | KtRemove | Purge
    | AttestReq | AttestReport | Event | Ack
    | AppHello | NodeMap
)


def status_to_byte(status: Outcome) -> int:
    return _STATUS_TO_BYTE[status]


def encode_frame(msg: Message) -> bytes:
    payload = b"".join(lp(f) for f in msg.to_fields())
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(ProtocolError.OVERSIZE, f"payload {len(payload)} bytes")
    return _HEADER.pack(MAGIC, VERSION, msg.TYPE, len(payload)) + payload


def decode_frame(data: bytes) -> Message:
    """Strict inverse of :func:`encode_frame`; rejects anything else."""
    if len(data) < HEADER_LEN:
        raise ProtocolError(ProtocolError.TRUNCATED, "short header")
    magic, version, msg_type, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(ProtocolError.BAD_MAGIC)
    if version != VERSION:
        raise ProtocolError(ProtocolError.BAD_VERSION, f"version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(ProtocolError.OVERSIZE, f"declared {length} bytes")
    if msg_type not in _BY_TYPE:
        raise ProtocolError(ProtocolError.UNKNOWN_TYPE, f"type 0x{msg_type:02x}")
    if len(data) != HEADER_LEN + length:
        raise ProtocolError(ProtocolError.TRUNCATED, "length does not match buffer")
    fields = _split_fields(data[HEADER_LEN:])
    return _BY_TYPE[msg_type].from_fields(fields)


def golden_vectors() -> list[tuple[Message, bytes]]:
    """One frozen (message, exact bytes) pair per message type.

    These encodings are the wire contract; ``protocol_golden.bin`` in the
    package carries the same bytes and tests assert all three agree.
    """
    msgs: list[Message] = [
        Hello(app=b"a"),
        Challenge(challenge=bytes(range(32))),
        Auth(app=b"a", signature=bytes(64)),
        AuthOk(token=bytes(16)),
        AuthFail(status=Outcome.AUTH_FAILURE),
        Get(user=b"u", purpose=b"p", name=b"n"),
        Put(user=b"u", purpose=b"p", name=b"n", value=b"v"),
        Insert(user=b"u", purpose=b"p", name=b"n", value=b"v"),
        Delete(user=b"u", purpose=b"p", name=b"n"),
        ScanUser(user=b"u"),
        ScanPurpose(purpose=b"p"),
        Response(status=Outcome.OK, items=(b"v",)),
        Bootstrap(node=b"node0", scheme=Scheme.COMPOSITE, log_key=bytes(32)),
        AtUpsert(app=b"a", pubkey=bytes(32)),
        PtSet(app=b"a", purpose=b"p", rights=0x03),
        KtInstall(kind=KtKind.USER, user=b"u", purpose=b"", material=bytes(32)),
        KtRemove(kind=KtKind.PAIR, user=b"u", purpose=b"p"),
        Purge(kind=KtKind.PURPOSE, user=b"", purpose=b"p"),
        AttestReq(nonce=bytes(32), config_digest=bytes(32)),
        AttestReport(node_pubkey=bytes(32), measurement=bytes(32), signature=bytes(64)),
        Event(kind=b"MISSING_KEY", seq=7, node=b"node0", app=b"a",
              user=b"u", purpose=b"p", name=b"n"),
        Ack(code=0),
        AppHello(app=b"a"),
        NodeMap(nodes=((b"node0", b"eu"),), purposes=((b"p", b"eu"),)),
    ]
    return [(m, encode_frame(m)) for m in msgs]
