"""Agent-side device registry: append-only journal plus snapshot.

Every state change is one JSON line ``{ts, id_hex, po_hex, event,
key_hex?}`` appended (and flushed) before the device gets its
acknowledgment, so a crash can lose an unacknowledged step but never an
acknowledged one.  Reload replays the snapshot (if any) and then the
journal.  A torn final line is the expected residue of a crash and is
dropped; damage anywhere else means the registry is corrupt and the
agent refuses to start.

Key material is stored hex-encoded.  This is a desk-scale tool; sealing
the journal at rest is out of scope.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import CorruptRegistry

logger = logging.getLogger(__name__)

SNAPSHOT_SUFFIX = ".snapshot.json"


class EntryStatus(Enum):
    UNSEEN = "unseen"
    PENDING_AK = "pending_ak"
    ACTIVE = "active"
    REVOKED = "revoked"


# journal event names
EV_AK_PENDING = "ak_pending"
EV_AK_ACTIVE = "ak_active"
EV_ROTATE_PENDING = "rotate_pending"
EV_ROTATE_ACTIVE = "rotate_active"
EV_CK_UPDATED = "ck_updated"
EV_REVOKED = "revoked"
EV_RESET = "reset"  # operator override: id may provision from scratch again


@dataclass
class ProductOrderRecord:
    po: bytes
    pk: bytes
    expected_count: int
    window_start: float
    window_end: float

    def in_window(self, ts: float) -> bool:
        return self.window_start <= ts <= self.window_end


# issued-but-unconfirmed keys kept per device; a wire attacker can force
# re-issues, and dropping an older pending would strand a device that
# committed it, so they accumulate up to this depth
MAX_PENDING_KEYS = 8


@dataclass
class RegistryEntry:
    device_id: bytes
    po: bytes
    status: EntryStatus = EntryStatus.UNSEEN
    ak: bytes | None = None
    pending_aks: list[bytes] = field(default_factory=list)
    cloud_key_seq: int = 0
    activated_at: float | None = None
    audit: list[dict] = field(default_factory=list)
    # replay window, deliberately not persisted
    consumed_nonces: set = field(default_factory=set, repr=False)

    def accept_keys(self, pk: bytes) -> list[bytes]:
        """Keys this device may currently authenticate with.

        While issued keys are unconfirmed the set spans all of them plus
        the previous generation, the agent-side twin of the cloud's
        dual-key window.
        """
        if self.status == EntryStatus.REVOKED:
            return []
        if self.status == EntryStatus.ACTIVE:
            return [self.ak, *self.pending_aks]
        if self.status == EntryStatus.PENDING_AK:
            return [pk, *self.pending_aks]
        return [pk]

    def to_json(self) -> dict:
        return {
            "id_hex": self.device_id.hex(),
            "po_hex": self.po.hex(),
            "status": self.status.value,
            "ak_hex": self.ak.hex() if self.ak else None,
            "pending_ak_hexes": [k.hex() for k in self.pending_aks],
            "cloud_key_seq": self.cloud_key_seq,
            "activated_at": self.activated_at,
            "audit": self.audit,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RegistryEntry":
        return cls(
            device_id=bytes.fromhex(obj["id_hex"]),
            po=bytes.fromhex(obj["po_hex"]),
            status=EntryStatus(obj["status"]),
            ak=bytes.fromhex(obj["ak_hex"]) if obj.get("ak_hex") else None,
            pending_aks=[bytes.fromhex(h) for h in obj.get("pending_ak_hexes", [])],
            cloud_key_seq=obj.get("cloud_key_seq", 0),
            activated_at=obj.get("activated_at"),
            audit=list(obj.get("audit", [])),
        )


class Journal:
    def __init__(self, path: Path, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, event: dict):
        self._fh.write(json.dumps(event) + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def truncate(self):
        self._fh.close()
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.flush()

    def close(self):
        self._fh.close()

    @staticmethod
    def load_events(path: Path) -> list[dict]:
        events = []
        raw = Path(path).read_text(encoding="utf-8")
        lines = raw.split("\n")
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    # unterminated tail from a crash mid-append; the
                    # matching ack was never sent, safe to drop
                    logger.warning("dropping torn trailing journal line")
                    continue
                raise CorruptRegistry(f"malformed journal line {i + 1} in {path}")
        return events


class Registry:
    """In-memory registry backed by the journal; one writer at a time."""

    def __init__(self, path: Path, fsync: bool = False, clock=time.time):
        self.path = Path(path)
        self.clock = clock
        self.entries: dict[bytes, RegistryEntry] = {}
        self._journal: Journal | None = None
        self._fsync = fsync

    @classmethod
    def open(cls, path, fsync: bool = False, clock=time.time) -> "Registry":
        reg = cls(path, fsync=fsync, clock=clock)
        snap = reg.path.with_name(reg.path.name + SNAPSHOT_SUFFIX)
        if snap.exists():
            try:
                data = json.loads(snap.read_text(encoding="utf-8"))
                for obj in data["entries"]:
                    entry = RegistryEntry.from_json(obj)
                    reg.entries[entry.device_id] = entry
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorruptRegistry(f"bad snapshot {snap}: {exc}") from None
        if reg.path.exists():
            for event in Journal.load_events(reg.path):
                reg._apply(event)
        reg._journal = Journal(reg.path, fsync=fsync)
        return reg

    def close(self):
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    # event log

    def record(self, event: str, device_id: bytes, po: bytes, key: bytes | None = None):
        """Journal first, then apply: the write-ahead step of every commit."""
        entry = {"ts": self.clock(), "id_hex": device_id.hex(), "po_hex": po.hex(),
                 "event": event}
        if key is not None:
            entry["key_hex"] = key.hex()
        if self._journal is not None:
            self._journal.append(entry)
        self._apply(entry)

    def _apply(self, ev: dict):
        device_id = bytes.fromhex(ev["id_hex"])
        po = bytes.fromhex(ev["po_hex"])
        key = bytes.fromhex(ev["key_hex"]) if ev.get("key_hex") else None
        entry = self.entries.get(device_id)
        if entry is None:
            entry = RegistryEntry(device_id=device_id, po=po)
            self.entries[device_id] = entry
        kind = ev["event"]
        if kind in (EV_AK_PENDING, EV_ROTATE_PENDING):
            if kind == EV_AK_PENDING:
                entry.status = EntryStatus.PENDING_AK
            entry.pending_aks.append(key)
            del entry.pending_aks[:-MAX_PENDING_KEYS]
        elif kind in (EV_AK_ACTIVE, EV_ROTATE_ACTIVE):
            entry.status = EntryStatus.ACTIVE
            entry.ak = key
            entry.pending_aks.clear()
            if kind == EV_AK_ACTIVE and entry.activated_at is None:
                entry.activated_at = ev["ts"]
        elif kind == EV_CK_UPDATED:
            entry.cloud_key_seq += 1
        elif kind == EV_REVOKED:
            entry.status = EntryStatus.REVOKED
            entry.pending_aks.clear()
        elif kind == EV_RESET:
            entry.status = EntryStatus.UNSEEN
            entry.ak = None
            entry.pending_aks.clear()
            entry.activated_at = None
        else:
            raise CorruptRegistry(f"unknown journal event {kind!r}")
        entry.audit.append({"ts": ev["ts"], "event": kind})

    def compact(self):
        """Fold the journal into a snapshot and start a fresh journal."""
        snap = self.path.with_name(self.path.name + SNAPSHOT_SUFFIX)
        tmp = snap.with_suffix(".tmp")
        tmp.write_text(json.dumps({
            "compacted_at": self.clock(),
            "entries": [e.to_json() for e in self.entries.values()],
        }), encoding="utf-8")
        os.replace(tmp, snap)
        if self._journal is not None:
            self._journal.truncate()

    # queries

    def get(self, device_id: bytes) -> RegistryEntry | None:
        return self.entries.get(device_id)

    def get_or_create(self, device_id: bytes, po: bytes) -> RegistryEntry:
        entry = self.entries.get(device_id)
        if entry is None:
            entry = RegistryEntry(device_id=device_id, po=po)
            self.entries[device_id] = entry
        return entry

    def by_po(self, po: bytes) -> list[RegistryEntry]:
        return [e for e in self.entries.values() if e.po == po]


def load_po_file(path) -> dict[bytes, ProductOrderRecord]:
    """Operator-supplied product order config.

    JSON array of {po_hex, pk_hex, expected_count, window_start, window_end}.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        table = {}
        for obj in raw:
            rec = ProductOrderRecord(
                po=bytes.fromhex(obj["po_hex"]),
                pk=bytes.fromhex(obj["pk_hex"]),
                expected_count=int(obj["expected_count"]),
                window_start=float(obj["window_start"]),
                window_end=float(obj["window_end"]),
            )
            table[rec.po] = rec
        return table
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptRegistry(f"bad product order file {path}: {exc}") from None


def save_po_file(path, records: list[ProductOrderRecord]):
    Path(path).write_text(json.dumps([
        {"po_hex": r.po.hex(), "pk_hex": r.pk.hex(), "expected_count": r.expected_count,
         "window_start": r.window_start, "window_end": r.window_end}
        for r in records
    ], indent=2), encoding="utf-8")
