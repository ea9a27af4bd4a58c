"""Deterministic in-process deployment: controller + nodes + clients.

Everything — randomness, clocks, message delivery, persistence — is
driven from one seeded source under strict serialization, so a given
(scenario, seed) pair always produces byte-identical traces and files.
That determinism is what lets the compliance properties be asserted
exactly: message fan-outs, event counts, audit completeness, erasure
soundness.

The harness also provides the brute-force oracles the enforcement paths
are checked against (decrypt-everything scans via a test-only vault
door) and byte-precise fault injection: node restarts, dropped control
messages, bit flips in persisted files, clock jumps, firmware tampering.
Production modules never import this one.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass

from . import auditlog, client, crypto, wire
from .controller import Controller, ErasureReceipt
from .errors import (
    AttestationFailed,
    AuthFailure,
    MalformedKey,
    MissingKey,
    NoNodeInRegion,
    PartialScan,
    RequestFailed,
    ScenarioError,
    SdpError,
)
from .fs import MemoryFilesystem
from .kvengine import LogStructuredKV
from .model import (
    Outcome,
    Rights,
    TupleKey,
    ViolationEvent,
    ViolationKind,
    decode_tuple_key,
)
from .node import StorageNode, tuple_aad
from .tables import KtKind

_DATA_TYPES = {
    wire.MsgType.GET: "GET",
    wire.MsgType.PUT: "PUT",
    wire.MsgType.INSERT: "INSERT",
    wire.MsgType.DELETE: "DELETE",
    wire.MsgType.SCAN_USER: "SCAN_USER",
    wire.MsgType.SCAN_PURPOSE: "SCAN_PURPOSE",
}

CONTROLLER = "controller"


def _s(b: bytes) -> str:
    """Stable printable form of an identifier or value."""
    try:
        t = b.decode("ascii")
        if t.isprintable() and " " not in t:
            return t
    except UnicodeDecodeError:
        pass
    return "0x" + b.hex()


class _ControlChannel:
    def __init__(self, world: "SimWorld"):
        self.world = world

    def send(self, node_id: bytes, frame: bytes) -> bytes | None:
        w = self.world
        w._count(CONTROLLER, _s(node_id), frame)
        if w.drop_control > 0:
            w.drop_control -= 1
            w._trace(f"    dropped controller->{_s(node_id)} {wire.MsgType(frame[4]).name}")
            return None
        node = w.nodes[node_id]
        reply = node.handle_control_frame(frame)
        w._count(_s(node_id), CONTROLLER, reply)
        w._deliver_events(node_id)
        return reply


class _ClientTransport:
    def __init__(self, world: "SimWorld", app: bytes):
        self.world = world
        self.app = app
        self.actor = f"client:{_s(app)}"

    def to_controller(self, frame: bytes) -> bytes:
        w = self.world
        w._count(self.actor, CONTROLLER, frame)
        reply = w.controller.handle_app_frame(frame)
        w._count(CONTROLLER, self.actor, reply)
        return reply

    def to_node(self, node_id: bytes, frame: bytes) -> bytes:
        w = self.world
        w._count(self.actor, _s(node_id), frame)
        node = w.nodes[node_id]
        reply = node.handle_client_frame(f"{_s(self.app)}@{_s(node_id)}", frame)
        w._count(_s(node_id), self.actor, reply)
        req_type = wire.MsgType(frame[4])
        if req_type in _DATA_TYPES:
            decoded = wire.decode_frame(reply)
            w.request_truth.append((_DATA_TYPES[req_type], decoded.status.value))
        w._deliver_events(node_id)
        return reply


class SimWorld:
    """One fully wired deployment under simulation."""

    def __init__(
        self,
        seed: int = 0,
        scheme: crypto.Scheme = crypto.Scheme.COMPOSITE,
        violation_threshold: int = 10,
    ):
        self._random = random.Random(seed)
        self.rng: crypto.RandomSource = self._random.randbytes
        self.now = 0
        self.lines: list[str] = []
        self.link_frames: Counter = Counter()
        self.typed_frames: Counter = Counter()
        self.drop_control = 0
        self.scheme = scheme

        self.fss: dict[bytes, MemoryFilesystem] = {}
        self.nodes: dict[bytes, StorageNode] = {}
        self.controller_fs = MemoryFilesystem()
        self.master_key = self.rng(crypto.KEY_LEN)
        self.controller = Controller(
            scheme,
            channel=_ControlChannel(self),
            rng=self.rng,
            clock=lambda: self.now,
            snapshot_fs=self.controller_fs,
            master_key=self.master_key,
            violation_threshold=violation_threshold,
        )
        self.app_keys: dict[bytes, tuple[bytes, bytes]] = {}
        self.clients: dict[bytes, client.ClientHandle] = {}
        # every data request delivered to a node, as (op, outcome) ground truth
        self.request_truth: list[tuple[str, str]] = []

    # -- bookkeeping -------------------------------------------------------

    def _trace(self, line: str) -> None:
        self.lines.append(line)

    def _count(self, src: str, dst: str, frame: bytes) -> None:
        t = wire.MsgType(frame[4])
        self.link_frames[(src, dst)] += 1
        self.typed_frames[(src, dst, t)] += 1
        self._trace(f"    msg {src}->{dst} {t.name} {len(frame)}B")

    def _deliver_events(self, node_id: bytes) -> None:
        node = self.nodes[node_id]
        for frame in node.drain_events():
            self._count(_s(node_id), CONTROLLER, frame)
            ev = wire.decode_frame(frame)
            violation = ViolationEvent(
                kind=ViolationKind(ev.kind.decode()),
                node=ev.node,
                seq=ev.seq,
                app=ev.app or None,
                user=ev.user or None,
                purpose=ev.purpose or None,
                name=ev.name or None,
            )
            action = self.controller.handle_violation(violation)
            self._trace(
                f"    event {_s(node_id)} {violation.kind.value} seq={violation.seq} -> {action}"
            )

    def message_counter(self, src: str, dst: str) -> int:
        """Exact frames sent on one directed link since world start."""
        return self.link_frames[(src, dst)]

    def frames_of_type(self, src: str, dst: str, msg_type: wire.MsgType) -> int:
        return self.typed_frames[(src, dst, msg_type)]

    def controller_link_frames(self) -> int:
        """Every frame touching the controller, any direction, any peer."""
        return sum(
            n for (src, dst), n in self.link_frames.items()
            if CONTROLLER in (src, dst)
        )

    # -- deployment assembly ---------------------------------------------------

    def add_node(self, node_id: bytes, region: bytes) -> StorageNode:
        fs = MemoryFilesystem()
        node = StorageNode(node_id, region, fs, rng=self.rng)
        self.fss[node_id] = fs
        self.nodes[node_id] = node
        self.controller.register_node(node_id, region, node.identity_pub)
        return node

    def bootstrap_node(self, node_id: bytes) -> None:
        self.controller.bootstrap_node(node_id)

    def register_app(self, app: bytes, grants: dict[bytes, Rights]) -> None:
        priv, pub = crypto.generate_keypair(self.rng)
        self.app_keys[app] = (priv, pub)
        self.controller.register_app(app, pub, grants)

    def client_for(self, app: bytes) -> client.ClientHandle:
        if app not in self.clients:
            priv, _ = self.app_keys[app]
            self.clients[app] = client.connect(app, priv, _ClientTransport(self, app))
        return self.clients[app]

    def tick(self, n: int = 1) -> None:
        self.now += n

    # -- faults ------------------------------------------------------------------

    def restart_node(self, node_id: bytes) -> None:
        self.nodes[node_id].restart()

    def drop_next_control(self, n: int = 1) -> None:
        self.drop_control += n

    def flip_bit(self, node_id: bytes, filename: str, bit_offset: int) -> None:
        self.fss[node_id].flip_bit(filename, bit_offset)

    def tamper_node(self, node_id: bytes) -> None:
        """Simulates compromised firmware: the next attestation measures a
        different build."""
        self.nodes[node_id].build_id = self.nodes[node_id].build_id + b"+evil"

    # -- oracles and test-only doors ------------------------------------------------

    def candidate_tuple_keys(self) -> list[bytes]:
        """Every tuple cipher key resolvable anywhere: vault material plus
        whatever the nodes still hold in their KTs."""
        keys = set(self.controller.vault.resolvable_tuple_keys().values())
        users = sorted(self.controller.users)
        purposes = sorted(self.controller.purposes)
        for node in self.nodes.values():
            if node.tables is None:
                continue
            for u in users:
                for p in purposes:
                    try:
                        keys.add(node.tables.kt.resolve(u, p))
                    except MissingKey:
                        pass
        return sorted(keys)

    def persisted_tuples(self) -> list[tuple[bytes, TupleKey, bytes]]:
        """(node, key, sealed bytes) for every tuple on any disk, re-read
        from the persisted files rather than live state."""
        out = []
        for node_id in sorted(self.fss):
            kv = LogStructuredKV(self.fss[node_id])
            for kb, rec in kv.items():
                try:
                    out.append((node_id, decode_tuple_key(kb), rec.sealed))
                except MalformedKey:
                    continue
        return out

    def oracle_scan(
        self, user: bytes | None = None, purpose: bytes | None = None
    ) -> list[tuple[TupleKey, bytes]]:
        """Ground truth: decrypt every persisted tuple matching the
        selector with every key still resolvable anywhere."""
        keys = self.candidate_tuple_keys()
        out = []
        for _, tk, sealed in self.persisted_tuples():
            if user is not None and tk.user != user:
                continue
            if purpose is not None and tk.purpose != purpose:
                continue
            aad = tuple_aad(tk)
            for key in keys:
                try:
                    value = crypto.open_sealed(key, aad, crypto.unpack_sealed(sealed))
                except AuthFailure:
                    continue
                out.append((tk, value))
                break
        out.sort(key=lambda kv: kv[0].encode())
        return out

    def decryptable_count(self, user: bytes | None = None, purpose: bytes | None = None) -> int:
        return len(self.oracle_scan(user=user, purpose=purpose))

    def live_cipher_material(self) -> list[bytes]:
        """All secret bytes that must never appear in persisted files."""
        material = set(self.controller.vault.live_material())
        material.update(self.controller.vault.resolvable_tuple_keys().values())
        for node in self.nodes.values():
            if node.tables is not None:
                material.update(node.tables.kt.live_keys())
        material.add(self.master_key)
        return sorted(material)

    def persisted_files(self) -> dict[str, bytes]:
        out = {}
        for node_id in sorted(self.fss):
            fs = self.fss[node_id]
            for name in fs.list_files():
                out[f"{_s(node_id)}/{name}"] = fs.read(name)
        for name in self.controller_fs.list_files():
            out[f"controller/{name}"] = self.controller_fs.read(name)
        return out

    def assert_no_key_material_persisted(self) -> None:
        files = self.persisted_files()
        for key in self.live_cipher_material():
            for name, blob in files.items():
                if key in blob:
                    raise AssertionError(f"cipher material found in {name}")

    def audit_records(self, node_id: bytes) -> list[auditlog.LogRecord]:
        """Decrypt one node's audit log with the vault's log key."""
        log_key = self.controller.vault.node_log_key(node_id)
        fs = self.fss[node_id]
        if not fs.exists(auditlog.AUDIT_FILE):
            return []
        return auditlog.export(fs.read(auditlog.AUDIT_FILE), log_key)

    def verify_audit(self, node_id: bytes) -> auditlog.VerifyResult:
        log_key = self.controller.vault.node_log_key(node_id)
        fs = self.fss[node_id]
        data = fs.read(auditlog.AUDIT_FILE) if fs.exists(auditlog.AUDIT_FILE) else b""
        return auditlog.verify_chain(data, log_key)

    def final_digests(self) -> list[str]:
        lines = []
        for name, blob in sorted(self.persisted_files().items()):
            lines.append(f"final {name} sha256={crypto.digest(blob).hex()}")
        return lines


# -- scenario scripts -----------------------------------------------------------

@dataclass(frozen=True)
class Step:
    lineno: int
    tokens: tuple[str, ...]
    raw: str


_FAULTS = {"restart", "drop_control", "bitflip", "tamper"}


def parse_scenario(text: str) -> list[Step]:
    """Line-oriented scenario: one step per line, ``#`` comments. Raises
    :class:`ScenarioError` for malformed steps or undeclared actors."""
    steps: list[Step] = []
    declared: dict[str, set[str]] = {"node": set(), "app": set(), "user": set(), "purpose": set()}

    def need(kind: str, name: str, lineno: int) -> None:
        if name not in declared[kind]:
            raise ScenarioError(f"line {lineno}: undeclared {kind} {name!r}")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        t = tuple(line.split())
        cmd = t[0]
        if cmd == "node" and len(t) == 3:
            declared["node"].add(t[1])
        elif cmd == "user" and len(t) == 2:
            declared["user"].add(t[1])
        elif cmd == "purpose" and len(t) == 4 and t[2].isdigit():
            declared["purpose"].add(t[1])
        elif cmd == "app" and len(t) >= 2:
            for grant in t[2:]:
                if ":" not in grant:
                    raise ScenarioError(f"line {lineno}: grant must be purpose:rights")
                purpose, rights = grant.split(":", 1)
                need("purpose", purpose, lineno)
                if not set(rights) <= {"r", "w", "i"}:
                    raise ScenarioError(f"line {lineno}: rights must be subset of rwi")
            declared["app"].add(t[1])
        elif cmd == "bootstrap" and len(t) == 2:
            need("node", t[1], lineno)
        elif cmd in ("consent", "revoke") and len(t) == 3:
            need("user", t[1], lineno)
            need("purpose", t[2], lineno)
        elif cmd == "erase":
            if len(t) == 3 and t[1] == "user":
                need("user", t[2], lineno)
            elif len(t) == 3 and t[1] == "purpose":
                need("purpose", t[2], lineno)
            elif len(t) == 4 and t[1] == "pair":
                need("user", t[2], lineno)
                need("purpose", t[3], lineno)
            else:
                raise ScenarioError(f"line {lineno}: erase user|purpose|pair ...")
        elif cmd == "sweep" and len(t) == 1:
            pass
        elif cmd in ("insert", "put") and len(t) == 6:
            need("app", t[1], lineno)
            need("user", t[2], lineno)
            need("purpose", t[3], lineno)
        elif cmd in ("get", "delete") and len(t) == 5:
            need("app", t[1], lineno)
            need("user", t[2], lineno)
            need("purpose", t[3], lineno)
        elif cmd == "scan_user" and len(t) == 3:
            need("app", t[1], lineno)
            need("user", t[2], lineno)
        elif cmd == "scan_purpose" and len(t) == 3:
            need("app", t[1], lineno)
            need("purpose", t[2], lineno)
        elif cmd == "tick" and len(t) == 2 and t[1].isdigit():
            pass
        elif cmd == "fault" and len(t) >= 2 and t[1] in _FAULTS:
            if t[1] == "restart" and len(t) == 3:
                need("node", t[2], lineno)
            elif t[1] == "drop_control" and len(t) == 2:
                pass
            elif t[1] == "bitflip" and len(t) == 5 and t[4].isdigit():
                need("node", t[2], lineno)
            elif t[1] == "tamper" and len(t) == 3:
                need("node", t[2], lineno)
            else:
                raise ScenarioError(f"line {lineno}: malformed fault")
        elif cmd == "report" and len(t) == 1:
            pass
        elif cmd == "audit_verify" and len(t) == 2:
            need("node", t[1], lineno)
        else:
            raise ScenarioError(f"line {lineno}: unknown step {line!r}")
        steps.append(Step(lineno, t, line))
    return steps


@dataclass
class Trace:
    lines: list[str]
    world: SimWorld

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def digest(self) -> str:
        return crypto.digest(self.text().encode()).hex()


def _parse_rights(spec: str) -> Rights:
    r = Rights.NONE
    if "r" in spec:
        r |= Rights.READ
    if "w" in spec:
        r |= Rights.WRITE
    if "i" in spec:
        r |= Rights.INSERT
    return r


def run(scenario: str | list[Step], seed: int = 0,
        scheme: crypto.Scheme = crypto.Scheme.COMPOSITE) -> Trace:
    """Execute a scenario under strict serialization and return its trace."""
    steps = parse_scenario(scenario) if isinstance(scenario, str) else scenario
    world = SimWorld(seed=seed, scheme=scheme)

    def receipt_line(r: ErasureReceipt) -> str:
        return f"    receipt {r.line()}"

    for step in steps:
        t = step.tokens
        world._trace(f"# {step.raw}")
        b = lambda s: s.encode()  # noqa: E731 - scenario tokens to ids
        try:
            if t[0] == "node":
                world.add_node(b(t[1]), b(t[2]))
            elif t[0] == "user":
                world.controller.register_user(b(t[1]))
            elif t[0] == "purpose":
                world.controller.register_purpose(b(t[1]), int(t[2]), b(t[3]))
            elif t[0] == "app":
                grants = {}
                for grant in t[2:]:
                    purpose, rights = grant.split(":", 1)
                    grants[b(purpose)] = _parse_rights(rights)
                world.register_app(b(t[1]), grants)
            elif t[0] == "bootstrap":
                world.bootstrap_node(b(t[1]))
                world._trace(f"    serving {t[1]}")
            elif t[0] == "consent":
                world.controller.record_consent(b(t[1]), b(t[2]))
            elif t[0] == "revoke":
                world._trace(receipt_line(world.controller.revoke_consent(b(t[1]), b(t[2]))))
            elif t[0] == "erase" and t[1] == "user":
                world._trace(receipt_line(world.controller.erase_user(b(t[2]))))
            elif t[0] == "erase" and t[1] == "purpose":
                world._trace(receipt_line(world.controller.erase_purpose(b(t[2]))))
            elif t[0] == "erase" and t[1] == "pair":
                world._trace(receipt_line(world.controller.revoke_consent(b(t[2]), b(t[3]))))
            elif t[0] == "sweep":
                for r in world.controller.enforce_retention():
                    world._trace(receipt_line(r))
            elif t[0] in ("insert", "put"):
                h = world.client_for(b(t[1]))
                op = client.insert if t[0] == "insert" else client.put
                op(h, b(t[2]), b(t[3]), b(t[4]), b(t[5]))
                world._trace("    ok")
            elif t[0] == "get":
                h = world.client_for(b(t[1]))
                value = client.get(h, b(t[2]), b(t[3]), b(t[4]))
                world._trace(f"    value {_s(value)}")
            elif t[0] == "delete":
                h = world.client_for(b(t[1]))
                client.delete(h, b(t[2]), b(t[3]), b(t[4]))
                world._trace("    ok")
            elif t[0] == "scan_user":
                h = world.client_for(b(t[1]))
                items = client.scan_user(h, b(t[2]))
                for tk, value in items:
                    world._trace(f"    item {_s(tk.user)}/{_s(tk.purpose)}/{_s(tk.name)} = {_s(value)}")
                world._trace(f"    scanned {len(items)}")
            elif t[0] == "scan_purpose":
                h = world.client_for(b(t[1]))
                items = client.scan_purpose(h, b(t[2]))
                for tk, value in items:
                    world._trace(f"    item {_s(tk.user)}/{_s(tk.purpose)}/{_s(tk.name)} = {_s(value)}")
                world._trace(f"    scanned {len(items)}")
            elif t[0] == "tick":
                world.tick(int(t[1]))
                world._trace(f"    t={world.now}")
            elif t[0] == "fault" and t[1] == "restart":
                world.restart_node(b(t[2]))
            elif t[0] == "fault" and t[1] == "drop_control":
                world.drop_next_control()
            elif t[0] == "fault" and t[1] == "bitflip":
                world.flip_bit(b(t[2]), t[3], int(t[4]))
            elif t[0] == "fault" and t[1] == "tamper":
                world.tamper_node(b(t[2]))
            elif t[0] == "report":
                for row in world.controller.compliance_report():
                    world._trace(
                        f"    art {row.article}: {row.functionality} [{row.plane}] "
                        f"{row.status} - {row.detail}"
                    )
            elif t[0] == "audit_verify":
                result = world.verify_audit(b(t[1]))
                if result.ok:
                    world._trace(f"    audit OK records={result.records}")
                else:
                    world._trace(f"    audit Broken(at={result.broken_at})")
        except PartialScan as exc:
            world._trace(
                f"    partial items={len(exc.items)} failures="
                + ",".join(f"{_s(n)}:{v}" for n, v in sorted(exc.failures.items()))
            )
        except (RequestFailed, AttestationFailed, NoNodeInRegion) as exc:
            world._trace(f"    error {type(exc).__name__}: {exc}")
        except SdpError as exc:
            world._trace(f"    error {type(exc).__name__}: {exc}")
    world.lines.extend(world.final_digests())
    return Trace(world.lines, world)


def oracle_scan(world: SimWorld, user: bytes | None = None, purpose: bytes | None = None):
    return world.oracle_scan(user=user, purpose=purpose)


def message_counter(world: SimWorld, src: str, dst: str) -> int:
    return world.message_counter(src, dst)
