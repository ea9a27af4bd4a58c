"""Socket transport: the same frames the simulation bus carries, over
TCP with optional mutual TLS.

The simulation harness is the reference environment; this module exists
so a node can be driven across process boundaries with identical message
handlers, and is exercised by smoke tests only. Frames are self-
delimiting (fixed header carries the payload length), so the stream
protocol is just back-to-back frames.
"""

from __future__ import annotations

import datetime
import socket
import ssl
import struct
import threading

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.x509.oid import NameOID

from . import wire
from .errors import ProtocolError
from .node import StorageNode

_LEN = struct.Struct(">I")


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock) -> bytes:
    header = _recv_exact(sock, wire.HEADER_LEN)
    if header[:3] != wire.MAGIC:
        raise ProtocolError(ProtocolError.BAD_MAGIC)
    (length,) = _LEN.unpack_from(header, 5)
    if length > wire.MAX_PAYLOAD:
        raise ProtocolError(ProtocolError.OVERSIZE, f"{length} bytes")
    return header + _recv_exact(sock, length)


def write_frame(sock, frame: bytes) -> None:
    sock.sendall(frame)


_CONTROL_TYPES = {
    wire.MsgType.BOOTSTRAP, wire.MsgType.AT_UPSERT, wire.MsgType.PT_SET,
    wire.MsgType.KT_INSTALL, wire.MsgType.KT_REMOVE, wire.MsgType.PURGE,
    wire.MsgType.ATTEST_REQ,
}


class NodeServer:
    """Serves one storage node: control frames and client frames arrive on
    the same listener and dispatch to the node's handlers, one request at
    a time (the node pipeline is serial by design)."""

    def __init__(self, node: StorageNode, host: str = "127.0.0.1", port: int = 0,
                 ssl_context: ssl.SSLContext | None = None):
        self.node = node
        self._lock = threading.Lock()
        self._sock = socket.create_server((host, port))
        self._ssl_context = ssl_context
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self.dropped_events = 0

    def start(self) -> "NodeServer":
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        self._sock.close()
        self._thread.join(timeout=2)

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except OSError:
                return
            if self._ssl_context is not None:
                try:
                    conn = self._ssl_context.wrap_socket(conn, server_side=True)
                except ssl.SSLError:
                    continue
            threading.Thread(
                target=self._serve_conn, args=(conn, f"{peer[0]}:{peer[1]}"), daemon=True
            ).start()

    def _serve_conn(self, conn, conn_id: str) -> None:
        with conn:
            while not self._stop.is_set():
                try:
                    frame = read_frame(conn)
                except (ConnectionError, OSError):
                    return
                except ProtocolError:
                    return  # garbage on the wire: drop the connection
                with self._lock:
                    try:
                        if wire.MsgType(frame[4]) in _CONTROL_TYPES:
                            reply = self.node.handle_control_frame(frame)
                        else:
                            reply = self.node.handle_client_frame(conn_id, frame)
                    except ProtocolError:
                        return
                    # no controller is attached in smoke mode; events are
                    # counted so tests can assert they were raised
                    self.dropped_events += len(self.node.drain_events())
                try:
                    write_frame(conn, reply)
                except OSError:
                    return


class FrameConnection:
    """Blocking request/response client for a frame server."""

    def __init__(self, host: str, port: int, ssl_context: ssl.SSLContext | None = None,
                 server_hostname: str = "sdp-node"):
        raw = socket.create_connection((host, port))
        if ssl_context is not None:
            raw = ssl_context.wrap_socket(raw, server_hostname=server_hostname)
        self._sock = raw

    def exchange(self, frame: bytes) -> bytes:
        write_frame(self._sock, frame)
        return read_frame(self._sock)

    def close(self) -> None:
        self._sock.close()


def generate_self_signed(common_name: str) -> tuple[bytes, bytes]:
    """(cert_pem, key_pem) for test deployments; mutual TLS contexts are
    built by trusting the peer's self-signed cert directly."""
    key = ed25519.Ed25519PrivateKey.generate()
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .sign(key, algorithm=None)
    )
    key_pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    return cert.public_bytes(serialization.Encoding.PEM), key_pem


def mutual_tls_contexts(
    server_cert: bytes, server_key: bytes, client_cert: bytes, client_key: bytes,
    tmpdir: str,
) -> tuple[ssl.SSLContext, ssl.SSLContext]:
    """Server and client contexts that each require the other's cert."""
    from pathlib import Path

    d = Path(tmpdir)
    paths = {}
    for stem, blob in (
        ("server_cert", server_cert), ("server_key", server_key),
        ("client_cert", client_cert), ("client_key", client_key),
    ):
        p = d / f"{stem}.pem"
        p.write_bytes(blob)
        paths[stem] = str(p)

    server_ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    server_ctx.load_cert_chain(paths["server_cert"], paths["server_key"])
    server_ctx.load_verify_locations(paths["client_cert"])
    server_ctx.verify_mode = ssl.CERT_REQUIRED

    client_ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    client_ctx.load_cert_chain(paths["client_cert"], paths["client_key"])
    client_ctx.load_verify_locations(paths["server_cert"])
    client_ctx.check_hostname = False
    return server_ctx, client_ctx
