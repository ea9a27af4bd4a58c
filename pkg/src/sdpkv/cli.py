"""Operator tooling: ``gdprctl`` drives a deployment, ``sdp-demo`` runs
scenario scripts.

A deployment lives in a directory: the controller's sealed snapshot,
one subdirectory per storage node (tuple log, audit log, identity seed)
and a plain-text config. ``gdprctl`` points at that directory
(``--controller`` or ``SDP_CONTROLLER``), unseals the snapshot with the
vault key from the operator credential file, boots the nodes in-process,
executes exactly one command, and persists the result — so any command
sequence is equivalent to the same calls against the controller API.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
from pathlib import Path

from . import auditlog, crypto, sim, wire
from .controller import SNAPSHOT_FILE, Controller
from .errors import ScenarioError, SdpError
from .fs import DirFilesystem
from .model import Rights, ViolationEvent, ViolationKind
from .node import StorageNode

CONFIG_FILE = "config.json"
IDENTITY_FILE = "identity.seed"


def _parse_rights(spec: str) -> Rights:
    r = Rights.NONE
    for ch in spec:
        if ch == "r":
            r |= Rights.READ
        elif ch == "w":
            r |= Rights.WRITE
        elif ch == "i":
            r |= Rights.INSERT
        else:
            raise SdpError(f"unknown right {ch!r} (use r/w/i)")
    return r


class _LocalChannel:
    """Controller->node link inside one gdprctl invocation."""

    def __init__(self, deployment: "Deployment"):
        self.deployment = deployment

    def send(self, node_id: bytes, frame: bytes) -> bytes | None:
        node = self.deployment.nodes[node_id]
        reply = node.handle_control_frame(frame)
        for ev_frame in node.drain_events():
            ev = wire.decode_frame(ev_frame)
            self.deployment.controller.handle_violation(
                ViolationEvent(
                    kind=ViolationKind(ev.kind.decode()),
                    node=ev.node,
                    seq=ev.seq,
                    app=ev.app or None,
                    user=ev.user or None,
                    purpose=ev.purpose or None,
                    name=ev.name or None,
                )
            )
        return reply


class Deployment:
    """One on-disk deployment, booted for the duration of a command."""

    def __init__(self, root: Path, master_key: bytes):
        self.root = root
        cfg_path = root / CONFIG_FILE
        if not cfg_path.exists():
            raise SdpError(f"no deployment at {root} (missing {CONFIG_FILE})")
        self.config = json.loads(cfg_path.read_text())
        self.scheme = crypto.Scheme[self.config["scheme"]]
        self.controller = Controller(
            self.scheme,
            channel=_LocalChannel(self),
            rng=secrets.token_bytes,
            clock=lambda: self.config["clock"],
            snapshot_fs=DirFilesystem(root),
            master_key=master_key,
            violation_threshold=self.config.get("violation_threshold", 10),
        )
        self.nodes: dict[bytes, StorageNode] = {}

        snap_path = root / SNAPSHOT_FILE
        if snap_path.exists():
            sealed = crypto.unpack_sealed(snap_path.read_bytes())
            blob = crypto.open_sealed(master_key, crypto.CTX_SNAPSHOT, sealed)
            self.controller.restore(blob)

        for name, region in sorted(self.config["nodes"].items()):
            node_id = name.encode()
            fs = DirFilesystem(root / "nodes" / name)
            seed = fs.read(IDENTITY_FILE)
            self.nodes[node_id] = StorageNode(
                node_id, region.encode(), fs, identity_seed=seed
            )

    def boot(self) -> None:
        """Fresh processes mean fresh (empty) node tables: re-attest and
        re-provision everything the registry says should be there."""
        for node_id, info in sorted(self.controller.nodes.items()):
            if info.status == "serving":
                info.status = "registered"
        for node_id in sorted(self.nodes):
            if self.controller.nodes[node_id].status != "quarantined":
                self.controller.bootstrap_node(node_id)

    def save_config(self) -> None:
        (self.root / CONFIG_FILE).write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")


def _init_deployment(args, out) -> int:
    root = Path(args.controller)
    root.mkdir(parents=True, exist_ok=True)
    if (root / CONFIG_FILE).exists():
        raise SdpError(f"deployment already exists at {root}")
    master_key = secrets.token_bytes(32)
    Path(args.cred).write_text(json.dumps({"vault_key": master_key.hex()}) + "\n")
    os.chmod(args.cred, 0o600)

    nodes = {}
    controller = Controller(
        crypto.Scheme[args.scheme],
        channel=None,
        rng=secrets.token_bytes,
        clock=lambda: 0,
        snapshot_fs=DirFilesystem(root),
        master_key=master_key,
        violation_threshold=args.threshold,
    )
    for spec in args.node:
        name, _, region = spec.partition(":")
        if not region:
            raise SdpError(f"node spec {spec!r} must be NAME:REGION")
        fs = DirFilesystem(root / "nodes" / name)
        seed = secrets.token_bytes(32)
        fs.write(IDENTITY_FILE, seed)
        node = StorageNode(name.encode(), region.encode(), fs, identity_seed=seed)
        controller.register_node(name.encode(), region.encode(), node.identity_pub)
        nodes[name] = region
    config = {
        "scheme": args.scheme,
        "nodes": nodes,
        "violation_threshold": args.threshold,
        "clock": 0,
    }
    (root / CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    out(f"initialized scheme={args.scheme} nodes={len(nodes)} at {root}")
    out(f"credential written to {args.cred}")
    return 0


def _receipt_lines(receipt, porcelain: bool) -> list[str]:
    if porcelain:
        return [
            "receipt selector={} scheme={} msgs={} kt_removed={} purged={} t={}".format(
                receipt.selector, receipt.scheme.name,
                receipt.control_messages_sent, receipt.kt_entries_removed,
                receipt.tuples_purged, receipt.ts,
            )
        ]
    return [
        f"erased {receipt.selector} under {receipt.scheme.name}:",
        f"  control messages sent: {receipt.control_messages_sent}",
        f"  key-table entries removed: {receipt.kt_entries_removed}",
        f"  tuples physically purged: {receipt.tuples_purged}",
    ]


def gdprctl_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gdprctl", description="operate a policy-controlled storage deployment"
    )
    parser.add_argument("--controller", default=os.environ.get("SDP_CONTROLLER"),
                        help="deployment directory (or $SDP_CONTROLLER)")
    parser.add_argument("--cred", default=os.environ.get("SDP_CRED", "operator.cred"),
                        help="operator credential file")
    parser.add_argument("--porcelain", action="store_true",
                        help="stable machine-readable output")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("init", help="create a deployment")
    p.add_argument("--scheme", required=True,
                   choices=[s.name for s in crypto.Scheme])
    p.add_argument("--node", action="append", required=True, metavar="NAME:REGION")
    p.add_argument("--threshold", type=int, default=10)

    p = sub.add_parser("app")
    app_sub = p.add_subparsers(dest="sub", required=True)
    q = app_sub.add_parser("register")
    q.add_argument("id")
    q.add_argument("--grant", action="append", default=[], metavar="PURPOSE:RIGHTS")
    q = app_sub.add_parser("revoke")
    q.add_argument("id")

    p = sub.add_parser("user")
    user_sub = p.add_subparsers(dest="sub", required=True)
    q = user_sub.add_parser("register")
    q.add_argument("id")

    p = sub.add_parser("purpose")
    purpose_sub = p.add_subparsers(dest="sub", required=True)
    q = purpose_sub.add_parser("register")
    q.add_argument("id")
    q.add_argument("--retention", type=int, required=True)
    q.add_argument("--region", required=True)

    p = sub.add_parser("consent")
    consent_sub = p.add_subparsers(dest="sub", required=True)
    for name in ("grant", "revoke"):
        q = consent_sub.add_parser(name)
        q.add_argument("user")
        q.add_argument("purpose")

    p = sub.add_parser("erase")
    erase_sub = p.add_subparsers(dest="sub", required=True)
    q = erase_sub.add_parser("user")
    q.add_argument("id")
    q = erase_sub.add_parser("purpose")
    q.add_argument("id")
    q = erase_sub.add_parser("pair")
    q.add_argument("user")
    q.add_argument("purpose")

    p = sub.add_parser("retention")
    retention_sub = p.add_subparsers(dest="sub", required=True)
    retention_sub.add_parser("sweep")

    p = sub.add_parser("tick", help="advance the deployment's logical clock")
    p.add_argument("n", type=int)

    p = sub.add_parser("node")
    node_sub = p.add_subparsers(dest="sub", required=True)
    node_sub.add_parser("list")
    q = node_sub.add_parser("bootstrap")
    q.add_argument("id")

    p = sub.add_parser("audit")
    audit_sub = p.add_subparsers(dest="sub", required=True)
    q = audit_sub.add_parser("verify")
    q.add_argument("node")
    q = audit_sub.add_parser("export")
    q.add_argument("node")
    q.add_argument("--start", type=int, default=0)
    q.add_argument("--stop", type=int, default=None)

    p = sub.add_parser("report")
    report_sub = p.add_subparsers(dest="sub", required=True)
    report_sub.add_parser("compliance")

    args = parser.parse_args(argv)
    lines: list[str] = []
    out = lines.append
    try:
        code = _dispatch(args, out)
    except SdpError as exc:
        if lines:
            print("\n".join(lines))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if lines:
        print("\n".join(lines))
    return code


def _load(args) -> Deployment:
    if not args.controller:
        raise SdpError("no deployment: pass --controller or set SDP_CONTROLLER")
    cred_path = Path(args.cred)
    if not cred_path.exists():
        raise SdpError(f"credential file {cred_path} not found")
    try:
        cred = json.loads(cred_path.read_text())
        master_key = bytes.fromhex(cred["vault_key"])
    except (ValueError, KeyError) as exc:
        raise SdpError(f"credential file {cred_path} unreadable: {exc}") from exc
    if len(master_key) != 32:
        raise SdpError("vault_key must be 32 bytes of hex")
    return Deployment(Path(args.controller), master_key)


def _dispatch(args, out) -> int:
    porcelain = args.porcelain
    if args.cmd == "init":
        return _init_deployment(args, out)

    deployment = _load(args)
    ctl = deployment.controller

    if args.cmd == "audit":
        # audit inspection works without booting the data plane
        node_id = args.node.encode()
        if node_id not in deployment.nodes:
            raise SdpError(f"unknown node {args.node}")
        fs = deployment.nodes[node_id].fs
        data = fs.read(auditlog.AUDIT_FILE) if fs.exists(auditlog.AUDIT_FILE) else b""
        log_key = ctl.vault.node_log_key(node_id)
        if args.sub == "verify":
            result = auditlog.verify_chain(data, log_key)
            if result.ok:
                out(f"audit ok node={args.node} records={result.records}"
                    if porcelain else f"{args.node}: chain OK ({result.records} records)")
                return 0
            out(f"audit broken node={args.node} at={result.broken_at}"
                if porcelain else f"{args.node}: chain Broken(at={result.broken_at})")
            return 1
        try:
            records = auditlog.export(data, log_key, start=args.start, stop=args.stop)
        except auditlog.AuditBroken as exc:
            out(f"audit broken node={args.node} at={exc.at}")
            return 1
        for r in records:
            subject = ""
            if r.tuple_key:
                subject = f" {r.tuple_key.user.decode(errors='replace')}/" \
                          f"{r.tuple_key.purpose.decode(errors='replace')}/" \
                          f"{r.tuple_key.name.decode(errors='replace')}"
            app = r.app.decode(errors="replace") if r.app else "-"
            out(f"record seq={r.seq} t={r.ts} op={r.op} app={app} outcome={r.outcome.value}"
                f" detail={r.detail}{subject}")
        return 0

    deployment.boot()

    if args.cmd == "app" and args.sub == "register":
        grants = {}
        for g in args.grant:
            purpose, _, rights = g.partition(":")
            grants[purpose.encode()] = _parse_rights(rights)
        priv, pub = crypto.generate_keypair()
        ctl.register_app(args.id.encode(), pub, grants)
        out(f"app registered id={args.id} grants={len(grants)}")
        out(f"app key (keep secret): {priv.hex()}")
    elif args.cmd == "app" and args.sub == "revoke":
        ctl.revoke_app(args.id.encode())
        out(f"app revoked id={args.id}")
    elif args.cmd == "user":
        ctl.register_user(args.id.encode())
        out(f"user registered id={args.id}")
    elif args.cmd == "purpose":
        ctl.register_purpose(args.id.encode(), args.retention, args.region.encode())
        out(f"purpose registered id={args.id} retention={args.retention} region={args.region}")
    elif args.cmd == "consent" and args.sub == "grant":
        ctl.record_consent(args.user.encode(), args.purpose.encode())
        out(f"consent granted user={args.user} purpose={args.purpose} t={deployment.config['clock']}")
    elif args.cmd == "consent" and args.sub == "revoke":
        receipt = ctl.revoke_consent(args.user.encode(), args.purpose.encode())
        for line in _receipt_lines(receipt, porcelain):
            out(line)
    elif args.cmd == "erase" and args.sub == "user":
        receipt = ctl.erase_user(args.id.encode())
        for line in _receipt_lines(receipt, porcelain):
            out(line)
    elif args.cmd == "erase" and args.sub == "purpose":
        receipt = ctl.erase_purpose(args.id.encode())
        for line in _receipt_lines(receipt, porcelain):
            out(line)
    elif args.cmd == "erase" and args.sub == "pair":
        receipt = ctl.revoke_consent(args.user.encode(), args.purpose.encode())
        for line in _receipt_lines(receipt, porcelain):
            out(line)
    elif args.cmd == "retention":
        receipts = ctl.enforce_retention(deployment.config["clock"])
        out(f"sweep t={deployment.config['clock']} receipts={len(receipts)}")
        for receipt in receipts:
            for line in _receipt_lines(receipt, porcelain):
                out(line)
    elif args.cmd == "tick":
        deployment.config["clock"] += args.n
        deployment.save_config()
        out(f"clock t={deployment.config['clock']}")
    elif args.cmd == "node" and args.sub == "list":
        for node_id, info in sorted(ctl.nodes.items()):
            out(f"node id={node_id.decode()} region={info.region.decode()} status={info.status}")
    elif args.cmd == "node" and args.sub == "bootstrap":
        node_id = args.id.encode()
        if node_id not in deployment.nodes:
            raise SdpError(f"unknown node {args.id}")
        # boot() already attested it; restart to demonstrate a clean handshake
        deployment.nodes[node_id].restart()
        ctl.nodes[node_id].status = "registered"
        ctl.bootstrap_node(node_id)
        out(f"node bootstrapped id={args.id} status={ctl.nodes[node_id].status}")
    elif args.cmd == "report":
        for row in ctl.compliance_report():
            if porcelain:
                out(f"row article={row.article} functionality={row.functionality}"
                    f" plane={row.plane} status={row.status}")
            else:
                out(f"art {row.article:<6} {row.functionality:<24} [{row.plane}] "
                    f"{row.status}: {row.detail}")
    else:  # pragma: no cover - argparse enforces the command set
        raise SdpError(f"unhandled command {args.cmd}")
    return 0


def demo_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdp-demo", description="run a scenario script in the simulator"
    )
    parser.add_argument("scenario", help="scenario file (one step per line)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--scheme", default="COMPOSITE",
                        choices=[s.name for s in crypto.Scheme])
    args = parser.parse_args(argv)
    try:
        text = Path(args.scenario).read_text()
        trace = sim.run(text, seed=args.seed, scheme=crypto.Scheme[args.scheme])
    except (OSError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(trace.text())
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(gdprctl_main())
