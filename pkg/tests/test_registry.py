"""Journal persistence: replay equivalence, torn tails, corruption
refusal, compaction, and the product order config file."""

import json

import pytest

from otaprov.envelope import Rng
from otaprov.errors import CorruptRegistry
from otaprov.registry import (
    EV_AK_ACTIVE,
    EV_AK_PENDING,
    EV_CK_UPDATED,
    EV_REVOKED,
    EV_ROTATE_ACTIVE,
    EV_ROTATE_PENDING,
    EntryStatus,
    ProductOrderRecord,
    Registry,
    load_po_file,
    save_po_file,
)

RNG = Rng(7)
DID = RNG.bytes(12)
PO = RNG.bytes(8)
PK = RNG.key()
AK1 = RNG.key()
AK2 = RNG.key()


def drive(reg: Registry):
    reg.record(EV_AK_PENDING, DID, PO, AK1)
    reg.record(EV_AK_ACTIVE, DID, PO, AK1)
    reg.record(EV_CK_UPDATED, DID, PO)
    reg.record(EV_ROTATE_PENDING, DID, PO, AK2)
    reg.record(EV_ROTATE_ACTIVE, DID, PO, AK2)


def test_journal_replay_rebuilds_state(tmp_path):
    path = tmp_path / "reg.jsonl"
    reg = Registry.open(path)
    drive(reg)
    reg.close()

    again = Registry.open(path)
    entry = again.get(DID)
    assert entry.status == EntryStatus.ACTIVE
    assert entry.ak == AK2 and entry.pending_aks == []
    assert entry.cloud_key_seq == 1
    assert entry.activated_at is not None
    assert [a["event"] for a in entry.audit] == [
        EV_AK_PENDING, EV_AK_ACTIVE, EV_CK_UPDATED, EV_ROTATE_PENDING, EV_ROTATE_ACTIVE]
    again.close()


def test_journal_format_is_flat_json_lines(tmp_path):
    path = tmp_path / "reg.jsonl"
    reg = Registry.open(path)
    reg.record(EV_AK_PENDING, DID, PO, AK1)
    reg.close()
    line = json.loads(path.read_text().splitlines()[0])
    assert set(line) == {"ts", "id_hex", "po_hex", "event", "key_hex"}
    assert line["id_hex"] == DID.hex() and line["key_hex"] == AK1.hex()


def test_torn_trailing_line_is_dropped(tmp_path):
    path = tmp_path / "reg.jsonl"
    reg = Registry.open(path)
    drive(reg)
    reg.close()
    with open(path, "a", encoding="utf-8") as fh:
        fh.write('{"ts": 1.0, "id_hex": "aabb')  # crash mid-append
    again = Registry.open(path)
    assert again.get(DID).ak == AK2
    again.close()


def test_interior_corruption_refuses_to_start(tmp_path):
    path = tmp_path / "reg.jsonl"
    reg = Registry.open(path)
    drive(reg)
    reg.close()
    lines = path.read_text().splitlines()
    lines[1] = "<<<garbage>>>"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptRegistry):
        Registry.open(path)


def test_compaction_preserves_state_and_truncates(tmp_path):
    path = tmp_path / "reg.jsonl"
    reg = Registry.open(path)
    drive(reg)
    reg.compact()
    assert path.read_text() == ""
    reg.record(EV_REVOKED, DID, PO)
    reg.close()

    again = Registry.open(path)
    entry = again.get(DID)
    assert entry.status == EntryStatus.REVOKED
    assert entry.cloud_key_seq == 1  # snapshot carried the pre-compaction state
    again.close()


def test_bad_snapshot_refuses_to_start(tmp_path):
    path = tmp_path / "reg.jsonl"
    Registry.open(path).close()
    path.with_name(path.name + ".snapshot.json").write_text("{broken")
    with pytest.raises(CorruptRegistry):
        Registry.open(path)


def test_pending_keys_accumulate_until_activation(tmp_path):
    reg = Registry.open(tmp_path / "reg.jsonl")
    reg.record(EV_AK_PENDING, DID, PO, AK1)
    reg.record(EV_AK_PENDING, DID, PO, AK2)
    entry = reg.get(DID)
    assert entry.pending_aks == [AK1, AK2]
    assert entry.accept_keys(PK) == [PK, AK1, AK2]
    reg.record(EV_AK_ACTIVE, DID, PO, AK2)
    assert entry.accept_keys(PK) == [AK2]
    reg.close()


def test_po_file_round_trip(tmp_path):
    path = tmp_path / "po.json"
    rec = ProductOrderRecord(PO, PK, expected_count=10,
                             window_start=100.0, window_end=200.0)
    save_po_file(path, [rec])
    table = load_po_file(path)
    assert table[PO] == rec
    assert rec.in_window(150.0) and not rec.in_window(201.0)


def test_po_file_rejects_malformed(tmp_path):
    path = tmp_path / "po.json"
    path.write_text('[{"po_hex": "zz"}]')
    with pytest.raises(CorruptRegistry):
        load_po_file(path)
