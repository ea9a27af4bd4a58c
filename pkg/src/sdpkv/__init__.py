"""Policy-controlled distributed key-value store.

A trusted controller translates privacy policy into ephemeral rule
tables pushed onto storage nodes; the nodes enforce encryption,
permissions, indexing, audit logging and cryptographic erasure per
request without taking any policy decisions of their own.
"""

from .controller import ComplianceRow, Controller, ErasureReceipt, KeyVault
from .crypto import Scheme
from .errors import SdpError
from .model import Outcome, Rights, TupleKey, ViolationEvent, ViolationKind
from .node import StorageNode
from .sim import SimWorld, Trace, parse_scenario, run

__all__ = [
    "ComplianceRow",
    "Controller",
    "ErasureReceipt",
    "KeyVault",
    "Outcome",
    "Rights",
    "Scheme",
    "SdpError",
    "SimWorld",
    "StorageNode",
    "Trace",
    "TupleKey",
    "ViolationEvent",
    "ViolationKind",
    "parse_scenario",
    "run",
]

__version__ = "0.1.0"
