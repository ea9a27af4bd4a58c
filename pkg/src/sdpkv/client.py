"""Application-side library.

A handle registers with the controller once, receives the node map, and
from then on talks straight to storage nodes: routing is the same stable
hash the controller uses, authentication happens lazily per node and is
cached for the session. The handle never sees key material of any kind —
nothing key-shaped exists on the client channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from . import crypto, wire
from .controller import shard_select
from .errors import NoNode, PartialScan, RequestFailed, UnknownApp
from .model import Outcome, TupleKey, decode_tuple_key
from .node import session_auth_message


class Transport(Protocol):
    """Client-side view of the network; simulation and sockets both fit."""

    def to_controller(self, frame: bytes) -> bytes: ...

    def to_node(self, node: bytes, frame: bytes) -> bytes: ...


@dataclass
class ClientHandle:
    app: bytes
    priv_key: bytes
    transport: Transport
    nodes: dict[bytes, bytes] = field(default_factory=dict)      # node -> region
    purposes: dict[bytes, bytes] = field(default_factory=dict)   # purpose -> region
    _sessions: dict[bytes, bytes] = field(default_factory=dict)  # node -> token


def connect(app: bytes, priv_key: bytes, transport: Transport) -> ClientHandle:
    """Register presence with the controller and fetch the node map."""
    handle = ClientHandle(app=app, priv_key=priv_key, transport=transport)
    refresh_map(handle)
    return handle


def refresh_map(handle: ClientHandle) -> None:
    reply = wire.decode_frame(
        handle.transport.to_controller(wire.encode_frame(wire.AppHello(handle.app)))
    )
    if not isinstance(reply, wire.NodeMap):
        raise UnknownApp(f"controller refused app {handle.app!r}")
    handle.nodes = dict(reply.nodes)
    handle.purposes = dict(reply.purposes)
    handle._sessions.clear()


def _route(handle: ClientHandle, user: bytes, purpose: bytes) -> bytes:
    region = handle.purposes.get(purpose)
    candidates = [n for n, r in handle.nodes.items() if r == region]
    if region is None or not candidates:
        # stale map: ask the controller once before giving up
        refresh_map(handle)
        region = handle.purposes.get(purpose)
        candidates = [n for n, r in handle.nodes.items() if r == region]
        if region is None or not candidates:
            raise NoNode(f"no node serves purpose {purpose!r}")
    return shard_select(user, purpose, candidates)


def _authenticate(handle: ClientHandle, node: bytes) -> None:
    hello = handle.transport.to_node(node, wire.encode_frame(wire.Hello(handle.app)))
    reply = wire.decode_frame(hello)
    if isinstance(reply, wire.AuthFail):
        raise RequestFailed(reply.status.value)
    assert isinstance(reply, wire.Challenge)
    sig = crypto.sign(
        handle.priv_key, session_auth_message(reply.challenge, node, handle.app)
    )
    auth = handle.transport.to_node(
        node, wire.encode_frame(wire.Auth(handle.app, sig))
    )
    reply = wire.decode_frame(auth)
    if isinstance(reply, wire.AuthFail):
        raise RequestFailed(reply.status.value)
    assert isinstance(reply, wire.AuthOk)
    handle._sessions[node] = reply.token


def _exchange(handle: ClientHandle, node: bytes, msg: wire.Message) -> wire.Response:
    """Send one data request on an authenticated session, re-establishing
    the session once if the node forgot it (restart)."""
    had_session = node in handle._sessions
    if not had_session:
        _authenticate(handle, node)
    reply = wire.decode_frame(handle.transport.to_node(node, wire.encode_frame(msg)))
    assert isinstance(reply, wire.Response)
    if reply.status is Outcome.AUTH_FAILURE and had_session:
        handle._sessions.pop(node, None)
        _authenticate(handle, node)
        reply = wire.decode_frame(handle.transport.to_node(node, wire.encode_frame(msg)))
        assert isinstance(reply, wire.Response)
    return reply


def _data_op(handle: ClientHandle, msg: wire.Message, user: bytes, purpose: bytes) -> wire.Response:
    node = _route(handle, user, purpose)
    reply = _exchange(handle, node, msg)
    if reply.status is not Outcome.OK:
        raise RequestFailed(reply.status.value)
    return reply


def get(handle: ClientHandle, user: bytes, purpose: bytes, name: bytes) -> bytes:
    reply = _data_op(handle, wire.Get(user, purpose, name), user, purpose)
    return reply.items[0]


def put(handle: ClientHandle, user: bytes, purpose: bytes, name: bytes, value: bytes) -> None:
    _data_op(handle, wire.Put(user, purpose, name, value), user, purpose)


def insert(handle: ClientHandle, user: bytes, purpose: bytes, name: bytes, value: bytes) -> None:
    _data_op(handle, wire.Insert(user, purpose, name, value), user, purpose)


def delete(handle: ClientHandle, user: bytes, purpose: bytes, name: bytes) -> None:
    _data_op(handle, wire.Delete(user, purpose, name), user, purpose)


def _fan_out_scan(handle: ClientHandle, msg: wire.Message) -> list[tuple[TupleKey, bytes]]:
    if not handle.nodes:
        raise NoNode("node map is empty")
    items: list[tuple[TupleKey, bytes]] = []
    failures: dict[bytes, str] = {}
    denied: list[bytes] = []
    for node in sorted(handle.nodes):
        try:
            reply = _exchange(handle, node, msg)
        except RequestFailed as exc:
            failures[node] = exc.status
            continue
        if reply.status is Outcome.PERMISSION_DENIED:
            denied.append(node)
            continue
        if reply.status is not Outcome.OK:
            failures[node] = reply.status.value
            continue
        fields = reply.items
        for i in range(0, len(fields) - 1, 2):
            items.append((decode_tuple_key(fields[i]), fields[i + 1]))
    items.sort(key=lambda kv: kv[0].encode())
    if len(denied) == len(handle.nodes):
        raise RequestFailed(Outcome.PERMISSION_DENIED.value)
    for node in denied:
        failures[node] = Outcome.PERMISSION_DENIED.value
    if failures:
        raise PartialScan(items, failures)
    return items


def scan_user(handle: ClientHandle, user: bytes) -> list[tuple[TupleKey, bytes]]:
    """Everything stored for one user across all nodes, merged in
    canonical key order (the portability export)."""
    return _fan_out_scan(handle, wire.ScanUser(user))


def scan_purpose(handle: ClientHandle, purpose: bytes) -> list[tuple[TupleKey, bytes]]:
    return _fan_out_scan(handle, wire.ScanPurpose(purpose))
