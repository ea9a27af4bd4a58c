"""Persistence namespaces for storage nodes.

Nodes write through this tiny interface so the simulation can keep every
"disk" in memory — giving byte-precise fault injection (bit flips at
exact offsets), instant restart, and cheap whole-state digests — while
operational deployments back the same calls with a real directory.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Protocol


class Filesystem(Protocol):
    def read(self, name: str) -> bytes: ...

    def write(self, name: str, data: bytes) -> None: ...

    def append(self, name: str, data: bytes) -> None: ...

    def exists(self, name: str) -> bool: ...

    def list_files(self) -> list[str]: ...


class MemoryFilesystem:
    """Dict-backed namespace; the default under simulation."""

    def __init__(self):
        self._files: dict[str, bytearray] = {}

    def read(self, name: str) -> bytes:
        if name not in self._files:
            raise FileNotFoundError(name)
        return bytes(self._files[name])

    def write(self, name: str, data: bytes) -> None:
        self._files[name] = bytearray(data)

    def append(self, name: str, data: bytes) -> None:
        self._files.setdefault(name, bytearray()).extend(data)

    def exists(self, name: str) -> bool:
        return name in self._files

    def list_files(self) -> list[str]:
        return sorted(self._files)

    def flip_bit(self, name: str, bit_offset: int) -> None:
        """Fault injection: flip one bit at ``bit_offset`` into the file."""
        buf = self._files[name]
        byte, bit = divmod(bit_offset, 8)
        if byte >= len(buf):
            raise IndexError(f"{name}: bit offset {bit_offset} beyond EOF")
        buf[byte] ^= 1 << bit

    def digests(self) -> dict[str, str]:
        return {
            name: hashlib.sha256(bytes(data)).hexdigest()
            for name, data in sorted(self._files.items())
        }


class DirFilesystem:
    """Real-directory namespace for operational (CLI) deployments."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root.resolve() not in p.parents and p != self.root.resolve():
            raise ValueError(f"path escapes namespace: {name}")
        return p

    def read(self, name: str) -> bytes:
        return self._path(name).read_bytes()

    def write(self, name: str, data: bytes) -> None:
        self._path(name).write_bytes(data)

    def append(self, name: str, data: bytes) -> None:
        with open(self._path(name), "ab") as f:
            f.write(data)

    def exists(self, name: str) -> bool:
        return self._path(name).exists()

    def list_files(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_file())
