"""Emulated device flash with dual key slots and power-cut injection.

Layout (2 KiB pages, base 0x08000000, matching the STM32F4 map):

    0x08000000  vector table            2 KiB
    0x08000800  key area A, small slot  2 KiB   agent/product key record
    0x08001000  key area A, large slot  16 KiB  cloud key record + endpoint info
    0x08005000  key area B, small slot  2 KiB   redundant copy space
    0x08005800  key area B, large slot  16 KiB  redundant copy space
    0x08009800  reserved tail           1280 B  unused remainder of area B
    0x08009D00  feature firmware        rest of the part

Both areas of a pair can hold either generation of a key, so an update
writes the new record into the slot not holding the active one and only
then erases the old slot.  The active record of a kind is the valid
(magic + CRC32) record with the highest sequence number; a torn record
fails its CRC and is ignored, which makes recovery after an interrupted
update a pure read.

Flash semantics enforced here: writes may only touch erased (0xFF)
bytes, erase works on whole pages, and an injected power cut silently
drops every mutating operation past the cut point, truncating the
operation at the cut to a byte prefix.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import (
    CommitRefused,
    NotErasedError,
    OrderingViolation,
    PowerLost,
    SizeError,
    StaleSlotOccupied,
    Unprovisioned,
)

FLASH_BASE = 0x08000000
PAGE_SIZE = 2048
DEFAULT_PAGE_COUNT = 64  # 128 KiB part

VECTOR_TABLE = (0x08000000, 0x08000800)
AREA_A_AGENT = (0x08000800, 0x08001000)
AREA_A_CLOUD = (0x08001000, 0x08005000)
AREA_B = (0x08005000, 0x08009D00)
AREA_B_AGENT = (0x08005000, 0x08005800)
AREA_B_CLOUD = (0x08005800, 0x08009800)
FEATURE_FIRMWARE_START = 0x08009D00

RECORD_MAGIC = b"OTAK"
MAX_RECORD_PAYLOAD = 512

_HEADER = struct.Struct(">4sIB16sH")  # magic, seq, kind, key, payload length
_CRC = struct.Struct(">I")


class KeyKind(IntEnum):
    PRODUCT = 1
    AGENT = 2
    CLOUD = 3


@dataclass(frozen=True)
class Slot:
    start: int
    pages: int

    @property
    def end(self) -> int:
        return self.start + self.pages * PAGE_SIZE

    @property
    def page_range(self) -> range:
        first = (self.start - FLASH_BASE) // PAGE_SIZE
        return range(first, first + self.pages)


SMALL_SLOTS = (Slot(AREA_A_AGENT[0], 1), Slot(AREA_B_AGENT[0], 1))
LARGE_SLOTS = (Slot(AREA_A_CLOUD[0], 8), Slot(AREA_B_CLOUD[0], 8))


def slot_pair(kind: KeyKind) -> tuple[Slot, Slot]:
    # product and agent keys share the small pair; cloud records use the large one
    return LARGE_SLOTS if kind == KeyKind.CLOUD else SMALL_SLOTS


@dataclass(frozen=True)
class KeySlotRecord:
    seq: int
    kind: KeyKind
    key: bytes
    payload: bytes = b""

    def encode(self) -> bytes:
        if len(self.payload) > MAX_RECORD_PAYLOAD:
            raise SizeError(f"record payload {len(self.payload)} exceeds {MAX_RECORD_PAYLOAD}")
        body = _HEADER.pack(RECORD_MAGIC, self.seq, self.kind, self.key, len(self.payload))
        body += self.payload
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def decode(cls, buf: bytes) -> "KeySlotRecord | None":
        """Parse a record at the head of ``buf``; None when invalid/torn."""
        if len(buf) < _HEADER.size + _CRC.size:
            return None
        magic, seq, kind, key, plen = _HEADER.unpack_from(buf)
        if magic != RECORD_MAGIC or plen > MAX_RECORD_PAYLOAD:
            return None
        total = _HEADER.size + plen + _CRC.size
        if len(buf) < total:
            return None
        body = buf[:_HEADER.size + plen]
        (crc,) = _CRC.unpack_from(buf, _HEADER.size + plen)
        if crc != zlib.crc32(body):
            return None
        try:
            kind = KeyKind(kind)
        except ValueError:
            return None
        return cls(seq=seq, kind=kind, key=key, payload=buf[_HEADER.size:_HEADER.size + plen])


class FaultPlan:
    """Event counter shared between a flow driver and a FlashImage.

    The fault-sweep harness installs one of these to stop a device at a
    precise point: ``cut_event`` indexes the event timeline (wire frames
    and flash mutations), ``cut_byte`` truncates the flash operation at
    the cut to that byte prefix.
    """

    def __init__(self, cut_event: int | None = None, cut_byte: int | None = None):
        self.cut_event = cut_event
        self.cut_byte = cut_byte
        self.events: list[tuple[str, int]] = []  # (label, mutable byte span)

    def frame_event(self, label: str):
        idx = len(self.events)
        self.events.append((label, 0))
        if self.cut_event is not None and idx >= self.cut_event:
            raise PowerLost(f"cut at event {idx} ({label})")

    def flash_event(self, label: str, nbytes: int) -> int | None:
        """Returns how many bytes of the op to apply, or None for all."""
        idx = len(self.events)
        self.events.append((label, nbytes))
        if self.cut_event is None or idx < self.cut_event:
            return None
        if idx == self.cut_event:
            return min(self.cut_byte or 0, nbytes)
        return 0


class FlashImage:
    """Byte-addressed emulated flash; one owner mutates it at a time."""

    def __init__(self, page_count: int = DEFAULT_PAGE_COUNT, data: bytes | None = None):
        if data is not None:
            if len(data) % PAGE_SIZE:
                raise ValueError("image length must be a multiple of the page size")
            self._buf = bytearray(data)
            page_count = len(data) // PAGE_SIZE
        else:
            self._buf = bytearray(b"\xff" * (page_count * PAGE_SIZE))
        self.page_count = page_count
        self.base = FLASH_BASE
        # power-cut state (silent-drop mode)
        self._ops_done = 0
        self._cut_at: int | None = None
        self._cut_partial: int | None = None
        # harness hook (raising mode); takes precedence when set
        self.fault_plan: FaultPlan | None = None

    @property
    def size(self) -> int:
        return len(self._buf)

    @property
    def end(self) -> int:
        return self.base + self.size

    def _offset(self, addr: int, n: int) -> int:
        if addr < self.base or addr + n > self.end:
            raise ValueError(f"address 0x{addr:08X}+{n} outside flash")
        return addr - self.base

    def read(self, addr: int, n: int) -> bytes:
        off = self._offset(addr, n)
        return bytes(self._buf[off:off + n])

    def _cut_budget(self, label: str, nbytes: int) -> int | None:
        """Bytes of the op to apply under the active cut model, None = all."""
        if self.fault_plan is not None:
            return self.fault_plan.flash_event(label, nbytes)
        if self._cut_at is None:
            return None
        self._ops_done += 1
        if self._ops_done <= self._cut_at:
            return None
        if self._ops_done == self._cut_at + 1:
            part = self._cut_partial
            return min(part if part is not None else nbytes // 2, nbytes)
        return 0

    def write(self, addr: int, data: bytes):
        """Program bytes; every target byte must currently read 0xFF."""
        off = self._offset(addr, len(data))
        budget = self._cut_budget(f"write@0x{addr:08X}", len(data))
        if budget == 0 and self.fault_plan is None:
            return  # power already lost, op silently dropped
        if any(b != 0xFF for b in self._buf[off:off + len(data)]):
            raise NotErasedError(f"write to non-erased range at 0x{addr:08X}")
        take = len(data) if budget is None else budget
        self._buf[off:off + take] = data[:take]
        if budget is not None and self.fault_plan is not None:
            raise PowerLost(f"cut inside write at 0x{addr:08X} after {take} bytes")

    def erase_page(self, page_index: int):
        if not 0 <= page_index < self.page_count:
            raise ValueError(f"page {page_index} out of range")
        off = page_index * PAGE_SIZE
        budget = self._cut_budget(f"erase@page{page_index}", PAGE_SIZE)
        if budget == 0 and self.fault_plan is None:
            return
        take = PAGE_SIZE if budget is None else budget
        self._buf[off:off + take] = b"\xff" * take
        if budget is not None and self.fault_plan is not None:
            raise PowerLost(f"cut inside erase of page {page_index} after {take} bytes")

    def erase_slot(self, slot: Slot):
        for p in slot.page_range:
            self.erase_page(p)

    def inject_power_cut(self, op_index: int, partial_bytes: int | None = None):
        """Silently drop every mutating op after the ``op_index``-th one.

        The first dropped operation is applied as a byte prefix
        (``partial_bytes``, default half) to model a torn write or a
        half-finished erase.
        """
        self._ops_done = 0
        self._cut_at = op_index
        self._cut_partial = partial_bytes

    def clear_power_cut(self):
        self._cut_at = None
        self._cut_partial = None
        self._ops_done = 0
        self.fault_plan = None

    def to_bytes(self) -> bytes:
        return bytes(self._buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FlashImage":
        return cls(data=data)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FlashImage":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class BootState:
    """Result of scanning the key slots at boot."""

    records: dict[KeyKind, tuple[KeySlotRecord, Slot]] = field(default_factory=dict)
    superseded: list[tuple[KeySlotRecord, Slot]] = field(default_factory=list)

    def active(self, kind: KeyKind) -> KeySlotRecord | None:
        hit = self.records.get(kind)
        return hit[0] if hit else None


def _scan_slot(image: FlashImage, slot: Slot) -> KeySlotRecord | None:
    return KeySlotRecord.decode(image.read(slot.start, min(slot.pages * PAGE_SIZE, 600)))


def boot_scan(image: FlashImage, require: tuple[KeyKind, ...] = ()) -> BootState:
    """Pick the active record per kind: valid (magic+CRC) and highest seq."""
    state = BootState()
    for slot in (*SMALL_SLOTS, *LARGE_SLOTS):
        rec = _scan_slot(image, slot)
        if rec is None:
            continue
        held = state.records.get(rec.kind)
        if held is None:
            state.records[rec.kind] = (rec, slot)
        elif rec.seq > held[0].seq:
            state.superseded.append(held)
            state.records[rec.kind] = (rec, slot)
        else:
            state.superseded.append((rec, slot))
    for kind in require:
        if kind not in state.records:
            raise Unprovisioned(f"no valid {kind.name} record")
    return state


def first_stage_burn(image: FlashImage, product_key: bytes, firmware: bytes) -> FlashImage:
    """Factory programming: product key record into area B plus firmware."""
    if FEATURE_FIRMWARE_START + len(firmware) > image.end:
        raise SizeError(f"firmware of {len(firmware)} bytes exceeds the feature region")
    record = KeySlotRecord(seq=0, kind=KeyKind.PRODUCT, key=product_key)
    image.write(SMALL_SLOTS[1].start, record.encode())
    if firmware:
        image.write(FEATURE_FIRMWARE_START, firmware)
    return image


@dataclass(frozen=True)
class PendingWrite:
    """Handle returned by begin_key_write, consumed by commit_key."""

    record: KeySlotRecord
    slot: Slot
    supersedes: Slot | None


def _slot_blank(image: FlashImage, slot: Slot) -> bool:
    data = image.read(slot.start, slot.pages * PAGE_SIZE)
    return all(b == 0xFF for b in data)


def begin_key_write(image: FlashImage, kind: KeyKind, key: bytes,
                    payload: bytes = b"") -> PendingWrite:
    """Write the next-generation record into the inactive slot of its pair.

    The active record stays untouched; activation is implicit in the
    higher sequence number once the new record is fully on flash.
    """
    a, b = slot_pair(kind)
    state = boot_scan(image)
    active = state.records.get(kind)
    # sequence numbers are monotone across the pair, so records of the
    # two kinds sharing the small slots can never collide
    pair_seqs = [rec.seq for rec, slot in state.records.values() if slot in (a, b)]
    pair_seqs += [rec.seq for rec, slot in state.superseded if slot in (a, b)]
    seq = (max(pair_seqs) + 1) if pair_seqs else 0

    if active is not None:
        target = b if active[1] == a else a
    else:
        # no active record of this kind: prefer A unless something else
        # (e.g. the factory product key in B) already sits there
        occupied = {slot.start for _, slot in state.records.values()}
        target = a if a.start not in occupied else b
        if target.start in occupied:
            raise StaleSlotOccupied(f"both {kind.name} slots hold active records")
    if not _slot_blank(image, target):
        raise StaleSlotOccupied(f"slot 0x{target.start:08X} holds stale data")

    record = KeySlotRecord(seq=seq, kind=kind, key=key, payload=payload)
    image.write(target.start, record.encode())
    return PendingWrite(record=record, slot=target, supersedes=active[1] if active else None)


def commit_key(image: FlashImage, pending: PendingWrite):
    """Erase the superseded record once the new one reads back valid."""
    readback = _scan_slot(image, pending.slot)
    if readback != pending.record:
        raise CommitRefused("pending record is not valid on flash")
    if pending.supersedes is not None:
        image.erase_slot(pending.supersedes)


def erase_stale_slot(image: FlashImage, kind: KeyKind):
    """Erase whichever slot of the pair does not hold the active record."""
    a, b = slot_pair(kind)
    state = boot_scan(image)
    keep = {slot.start for _, slot in state.records.values()}
    for slot in (a, b):
        if slot.start not in keep and not _slot_blank(image, slot):
            image.erase_slot(slot)


def erase_product_key(image: FlashImage):
    """Drop the factory key; only legal once an agent key is committed."""
    state = boot_scan(image)
    if KeyKind.AGENT not in state.records:
        raise OrderingViolation("product key erase before agent key commit")
    targets = [slot for rec, slot in [*state.records.values(), *state.superseded]
               if rec.kind == KeyKind.PRODUCT]
    for slot in targets:
        image.erase_slot(slot)


def hexdump(image: FlashImage, start: int | None = None, length: int | None = None,
            width: int = 16) -> str:
    """Pretty printer for image regions, 0xFF runs collapsed."""
    start = image.base if start is None else start
    length = (image.end - start) if length is None else length
    data = image.read(start, length)
    out = []
    skipping = False
    for off in range(0, len(data), width):
        row = data[off:off + width]
        if all(b == 0xFF for b in row):
            if not skipping:
                out.append(f"{start + off:08X}  *")
                skipping = True
            continue
        skipping = False
        hexpart = " ".join(f"{b:02X}" for b in row)
        asc = "".join(chr(b) if 32 <= b < 127 else "." for b in row)
        out.append(f"{start + off:08X}  {hexpart:<{width * 3}} {asc}")
    return "\n".join(out)
