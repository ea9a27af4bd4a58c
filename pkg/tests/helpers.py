"""Single-node harness: drives a storage node through real frames."""

from __future__ import annotations

import random

from sdpkv import crypto, wire
from sdpkv.fs import MemoryFilesystem
from sdpkv.model import Rights
from sdpkv.node import StorageNode, session_auth_message
from sdpkv.tables import KtKind


class NodeHarness:
    """One node, one app, a deterministic mini-vault, frame-level I/O."""

    def __init__(self, scheme: crypto.Scheme = crypto.Scheme.COMPOSITE, seed: int = 0):
        self.rng = random.Random(seed).randbytes
        self.scheme = scheme
        self.fs = MemoryFilesystem()
        self.node = StorageNode(b"node0", b"eu", self.fs, rng=self.rng)
        self.log_key = self.rng(32)
        self.app = b"app1"
        self.app_priv, self.app_pub = crypto.generate_keypair(self.rng)
        self.user_secrets: dict[bytes, bytes] = {}
        self.purpose_secrets: dict[bytes, bytes] = {}
        self.pair_keys: dict[tuple[bytes, bytes], bytes] = {}

    # -- control channel -----------------------------------------------------

    def control(self, msg) -> wire.Message:
        return wire.decode_frame(self.node.handle_control_frame(wire.encode_frame(msg)))

    def bootstrap(self) -> wire.Message:
        return self.control(wire.Bootstrap(b"node0", self.scheme, self.log_key))

    def install_app(self, grants: dict[bytes, Rights]) -> None:
        self.control(wire.AtUpsert(self.app, self.app_pub))
        for purpose, rights in sorted(grants.items()):
            self.control(wire.PtSet(self.app, purpose, rights.to_byte()))

    def install_key(self, user: bytes, purpose: bytes) -> None:
        if self.scheme is crypto.Scheme.PER_USER:
            secret = self.user_secrets.setdefault(user, self.rng(32))
            self.control(wire.KtInstall(KtKind.USER, user, b"", secret))
        elif self.scheme is crypto.Scheme.PER_USER_PURPOSE:
            key = self.pair_keys.setdefault((user, purpose), self.rng(32))
            self.control(wire.KtInstall(KtKind.PAIR, user, purpose, key))
        else:
            us = self.user_secrets.setdefault(user, self.rng(32))
            ps = self.purpose_secrets.setdefault(purpose, self.rng(32))
            self.control(wire.KtInstall(KtKind.USER, user, b"", us))
            self.control(wire.KtInstall(KtKind.PURPOSE, b"", purpose, ps))

    def remove_key(self, selector: wire.KtRemove) -> wire.Ack:
        return self.control(selector)

    def tuple_key_for(self, user: bytes, purpose: bytes) -> bytes:
        if self.scheme is crypto.Scheme.PER_USER:
            return crypto.derive_tuple_key(
                self.scheme, crypto.UserSecret(self.user_secrets[user]), user, purpose
            )
        if self.scheme is crypto.Scheme.PER_USER_PURPOSE:
            return self.pair_keys[(user, purpose)]
        return crypto.derive_tuple_key(
            self.scheme,
            (crypto.UserSecret(self.user_secrets[user]),
             crypto.PurposeSecret(self.purpose_secrets[purpose])),
            user, purpose,
        )

    # -- client channel -------------------------------------------------------

    def client(self, conn: str, msg) -> wire.Message:
        return wire.decode_frame(self.node.handle_client_frame(conn, wire.encode_frame(msg)))

    def auth(self, conn: str = "c1") -> wire.Message:
        reply = self.client(conn, wire.Hello(self.app))
        if not isinstance(reply, wire.Challenge):
            return reply
        sig = crypto.sign(
            self.app_priv, session_auth_message(reply.challenge, b"node0", self.app)
        )
        return self.client(conn, wire.Auth(self.app, sig))

    def ready(self, grants: dict[bytes, Rights], pairs: list[tuple[bytes, bytes]],
              conn: str = "c1") -> None:
        """Bootstrap, install app and keys, authenticate."""
        self.bootstrap()
        self.install_app(grants)
        for user, purpose in pairs:
            self.install_key(user, purpose)
        self.auth(conn)

    def events(self) -> list[wire.Event]:
        return [wire.decode_frame(f) for f in self.node.drain_events()]
