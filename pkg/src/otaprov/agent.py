"""Agent: issues and rotates per-device keys, brokers cloud-key updates,
persists every commitment to the registry journal before acknowledging.

Key lookup per request:

* A request that MACs under the product key of its order is a first
  provisioning.  An id that is already active is refused; re-issuing
  would let anyone with the product key knock a live device offline.
* Otherwise the request is tried against every issued (or pending) key
  of that order; a match means rotation under that device's current
  key.  The id stays encrypted in transit, which is why the lookup is a
  trial verification rather than an index hit.

A pending key is journaled before the response leaves, so the accept
set for a device covers both generations until the device confirms;
a message that verifies under a pending key is itself proof the device
switched, and promotes it.  An invalid confirmation voids the session
but keeps the pending key: dropping it on an unauthenticated failure
would let a wire attacker strand a device that already committed.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum

from . import envelope, messages
from .envelope import Rng, SealedMessage
from .errors import AgentKilled, CloudUnavailable, ProtocolError, TagMismatch
from .messages import ErrorCode, Frame, MsgType, error_frame
from .registry import (
    EV_AK_ACTIVE,
    EV_AK_PENDING,
    EV_CK_UPDATED,
    EV_RESET,
    EV_REVOKED,
    EV_ROTATE_ACTIVE,
    EV_ROTATE_PENDING,
    EntryStatus,
    ProductOrderRecord,
    Registry,
    RegistryEntry,
    load_po_file,
)

logger = logging.getLogger(__name__)


class Verdict(Enum):
    NORMAL = "normal"
    SUSPECTED_PK_LEAK = "suspected_pk_leak"


@dataclass
class AnomalyReport:
    po: bytes
    observed_activations: int
    expected_count: int
    out_of_window: int
    verdict: Verdict

    def to_json(self) -> dict:
        return {"po_hex": self.po.hex(), "observed_activations": self.observed_activations,
                "expected_count": self.expected_count, "out_of_window": self.out_of_window,
                "verdict": self.verdict.value}


@dataclass
class Session:
    device_id: bytes
    po: bytes
    kind: str  # "init" | "rotate" | "ck"
    nonce1: bytes
    nonce2: bytes
    auth_key: bytes          # key the confirm must verify under
    issued_key: bytes | None  # ak being issued (None for ck sessions)
    response: Frame          # cached for duplicate request delivery
    done: bool = False


class AgentCore:
    """Protocol brain shared by the TCP server and in-process harnesses."""

    def __init__(self, registry: Registry, po_records: dict[bytes, ProductOrderRecord],
                 cloud, rng: Rng | None = None):
        self.registry = registry
        self.po_records = po_records
        self.cloud = cloud
        self.rng = rng if rng is not None else Rng()
        self.sessions: dict[int, Session] = {}
        self._by_device: dict[bytes, int] = {}
        self._conn_seq = 0
        self._lock = threading.RLock()
        # crash drill hooks
        self._ops = 0
        self.crash_after: int | None = None

    # connection plumbing

    def open_conn(self) -> int:
        with self._lock:
            self._conn_seq += 1
            return self._conn_seq

    def close_conn(self, conn_id: int):
        with self._lock:
            sess = self.sessions.pop(conn_id, None)
            if sess is not None and self._by_device.get(sess.device_id) == conn_id:
                del self._by_device[sess.device_id]

    def shutdown(self):
        self.registry.close()

    def _tick(self):
        if self.crash_after is not None:
            self._ops += 1
            if self._ops > self.crash_after:
                raise AgentKilled(f"injected crash at op {self._ops}")

    def _record(self, event: str, device_id: bytes, po: bytes, key: bytes | None = None):
        self._tick()
        self.registry.record(event, device_id, po, key)
        self._tick()

    # dispatch

    def handle_frame(self, conn_id: int, frame: Frame) -> Frame:
        with self._lock:
            self._tick()
            try:
                if frame.msg_type == MsgType.AK_REQUEST:
                    reply = self._ak_request(conn_id, frame)
                elif frame.msg_type == MsgType.AK_CONFIRM:
                    reply = self._confirm(conn_id, frame, ("init", "rotate"))
                elif frame.msg_type == MsgType.CK_REQUEST:
                    reply = self._ck_request(conn_id, frame)
                elif frame.msg_type == MsgType.CK_CONFIRM:
                    reply = self._confirm(conn_id, frame, ("ck",))
                else:
                    reply = error_frame(ErrorCode.PROTOCOL)
            except (ProtocolError, TagMismatch, ValueError):
                reply = error_frame(ErrorCode.PROTOCOL)
            except OSError as exc:
                # journal write failed (e.g. disk full); nothing was
                # applied, the session just cannot commit right now
                logger.error("registry journal write failed: %s", exc)
                reply = error_frame(ErrorCode.BUSY)
            self._tick()
            return reply

    # agent key issuance and rotation

    def _ak_request(self, conn_id: int, frame: Frame) -> Frame:
        po_rec = self.po_records.get(frame.header)
        if po_rec is None:
            return error_frame(ErrorCode.UNKNOWN_PO)
        sealed = SealedMessage.from_bytes(frame.body)

        if envelope.verify_tag(po_rec.pk, sealed):
            return self._ak_initial(conn_id, po_rec, sealed)

        for entry in self.registry.by_po(po_rec.po):
            for key, is_pending in self._device_keys(entry):
                if envelope.verify_tag(key, sealed):
                    return self._ak_rotation(conn_id, po_rec, entry, key, is_pending, sealed)
        return error_frame(ErrorCode.PROTOCOL)

    @staticmethod
    def _device_keys(entry: RegistryEntry):
        if entry.ak is not None:
            yield entry.ak, False
        for key in entry.pending_aks:
            yield key, True

    def _ak_initial(self, conn_id: int, po_rec: ProductOrderRecord,
                    sealed: SealedMessage) -> Frame:
        plain = envelope.decrypt_noverify(po_rec.pk, sealed)
        device_id, nonce1 = messages.parse_ak_request(plain)
        entry = self.registry.get_or_create(device_id, po_rec.po)
        if entry.status == EntryStatus.REVOKED:
            return error_frame(ErrorCode.REVOKED)
        if entry.status == EntryStatus.ACTIVE:
            # one id, one key: a second product-key request for a live
            # device is exactly the abuse this scheme exists to stop
            return error_frame(ErrorCode.ALREADY_PROVISIONED)
        dup = self._duplicate_response(device_id, "init", nonce1)
        if dup is not None:
            return dup
        if nonce1 in entry.consumed_nonces:
            return error_frame(ErrorCode.REPLAY)
        entry.consumed_nonces.add(nonce1)

        ak = self.rng.key()
        nonce2 = self.rng.nonce()
        self._record(EV_AK_PENDING, device_id, po_rec.po, ak)
        body = envelope.seal(po_rec.pk, messages.encode_ak_response(ak, nonce1, nonce2),
                             self.rng, mac_key=ak)
        response = Frame(MsgType.AK_RESPONSE, b"", body.to_bytes())
        self._open_session(conn_id, Session(
            device_id=device_id, po=po_rec.po, kind="init", nonce1=nonce1,
            nonce2=nonce2, auth_key=ak, issued_key=ak, response=response))
        return response

    def _ak_rotation(self, conn_id: int, po_rec: ProductOrderRecord, entry: RegistryEntry,
                     request_key: bytes, key_was_pending: bool,
                     sealed: SealedMessage) -> Frame:
        if entry.status == EntryStatus.REVOKED:
            return error_frame(ErrorCode.REVOKED)
        plain = envelope.decrypt_noverify(request_key, sealed)
        device_id, nonce1 = messages.parse_ak_request(plain)
        if device_id != entry.device_id:
            return error_frame(ErrorCode.PROTOCOL)
        if key_was_pending:
            self._promote(entry, request_key)
        dup = self._duplicate_response(device_id, "rotate", nonce1)
        if dup is not None:
            return dup
        if nonce1 in entry.consumed_nonces:
            return error_frame(ErrorCode.REPLAY)
        entry.consumed_nonces.add(nonce1)

        new_ak = self.rng.key()
        nonce2 = self.rng.nonce()
        self._record(EV_ROTATE_PENDING, device_id, entry.po, new_ak)
        body = envelope.seal(request_key, messages.encode_ak_response(new_ak, nonce1, nonce2),
                             self.rng, mac_key=new_ak)
        response = Frame(MsgType.AK_RESPONSE, b"", body.to_bytes())
        self._open_session(conn_id, Session(
            device_id=device_id, po=entry.po, kind="rotate", nonce1=nonce1,
            nonce2=nonce2, auth_key=new_ak, issued_key=new_ak, response=response))
        return response

    # cloud key flow

    def _ck_request(self, conn_id: int, frame: Frame) -> Frame:
        device_id = frame.header
        entry = self.registry.get(device_id)
        if entry is None:
            return error_frame(ErrorCode.PROTOCOL)
        if entry.status == EntryStatus.REVOKED:
            return error_frame(ErrorCode.REVOKED)
        sealed = SealedMessage.from_bytes(frame.body)
        agent_key = None
        for key, is_pending in self._device_keys(entry):
            if envelope.verify_tag(key, sealed):
                agent_key = key
                if is_pending:
                    self._promote(entry, key)
                break
        if agent_key is None:
            return error_frame(ErrorCode.PROTOCOL)
        plain = envelope.decrypt_noverify(agent_key, sealed)
        nonce1 = messages.parse_ck_request(plain)
        dup = self._duplicate_response(device_id, "ck", nonce1)
        if dup is not None:
            return dup
        if nonce1 in entry.consumed_nonces:
            return error_frame(ErrorCode.REPLAY)
        entry.consumed_nonces.add(nonce1)

        # dual-key window must be open before the device can see the new
        # key, so registration happens before the response is built
        try:
            cloud_key, info = self.cloud.register_new_key(device_id)
        except CloudUnavailable:
            return error_frame(ErrorCode.CLOUD_UNAVAILABLE)
        nonce2 = self.rng.nonce()
        body = envelope.seal(
            agent_key, messages.encode_ck_response(cloud_key, info, nonce1, nonce2), self.rng)
        response = Frame(MsgType.CK_RESPONSE, b"", body.to_bytes())
        self._open_session(conn_id, Session(
            device_id=device_id, po=entry.po, kind="ck", nonce1=nonce1,
            nonce2=nonce2, auth_key=agent_key, issued_key=None, response=response))
        return response

    # confirmations

    def _confirm(self, conn_id: int, frame: Frame, kinds: tuple[str, ...]) -> Frame:
        sess = self.sessions.get(conn_id)
        if sess is None or sess.done or sess.kind not in kinds:
            return error_frame(ErrorCode.PROTOCOL)
        entry = self.registry.get(sess.device_id)
        if entry is None or entry.status == EntryStatus.REVOKED:
            return error_frame(ErrorCode.REVOKED)
        try:
            plain = envelope.open(sess.auth_key, SealedMessage.from_bytes(frame.body))
            if sess.kind == "ck":
                nonce2_echo, nonce3 = messages.parse_ck_confirm(plain)
            else:
                nonce2_echo, nonce3 = messages.parse_ak_confirm(plain)
            if nonce2_echo != sess.nonce2:
                raise ProtocolError("confirm echoed a foreign nonce")
        except (TagMismatch, ProtocolError, ValueError):
            # session is dead but the journaled pending key survives: the
            # device may have committed before this frame was corrupted
            sess.done = True
            return error_frame(ErrorCode.PROTOCOL)
        logger.debug("confirm nonce3=%s from %s", nonce3.hex(), sess.device_id.hex())

        if sess.kind == "ck":
            try:
                self.cloud.activate_new_disable_old(sess.device_id)
            except CloudUnavailable:
                # leave the window open; the device's first login under
                # the new key will retire the old one
                return error_frame(ErrorCode.CLOUD_UNAVAILABLE)
            self._record(EV_CK_UPDATED, sess.device_id, sess.po)
            ack_body = messages.encode_ck_ack(nonce3)
            ack_type = MsgType.CK_ACK
        else:
            event = EV_AK_ACTIVE if sess.kind == "init" else EV_ROTATE_ACTIVE
            self._record(event, sess.device_id, sess.po, sess.issued_key)
            ack_body = messages.encode_ak_ack(nonce3)
            ack_type = MsgType.AK_ACK
        sess.done = True
        ack = envelope.seal(sess.auth_key, ack_body, self.rng)
        return Frame(ack_type, b"", ack.to_bytes())

    # helpers

    def _open_session(self, conn_id: int, sess: Session):
        old_conn = self._by_device.get(sess.device_id)
        if old_conn is not None and old_conn in self.sessions:
            self.sessions[old_conn].done = True  # superseded
        self.sessions[conn_id] = sess
        self._by_device[sess.device_id] = conn_id

    def _duplicate_response(self, device_id: bytes, kind: str, nonce1: bytes) -> Frame | None:
        conn = self._by_device.get(device_id)
        sess = self.sessions.get(conn) if conn is not None else None
        if sess is not None and not sess.done and sess.kind == kind and sess.nonce1 == nonce1:
            return sess.response  # duplicate frame delivery, idempotent resend
        return None

    def _promote(self, entry: RegistryEntry, key: bytes):
        """A message verified under a pending key: the device holds it."""
        event = EV_AK_ACTIVE if entry.status == EntryStatus.PENDING_AK else EV_ROTATE_ACTIVE
        self._record(event, entry.device_id, entry.po, key)
        logger.info("promoted pending key for %s on first use", entry.device_id.hex())

    # operator surface

    def accept_keys(self, device_id: bytes, po: bytes | None = None) -> list[bytes]:
        """Keys the agent currently accepts from this device (harness oracle)."""
        with self._lock:
            entry = self.registry.get(device_id)
            if entry is None:
                rec = self.po_records.get(po) if po else None
                return [rec.pk] if rec else []
            rec = self.po_records.get(entry.po)
            return entry.accept_keys(rec.pk if rec else b"")

    def revoke(self, device_id: bytes | None = None, po: bytes | None = None) -> int:
        with self._lock:
            if device_id is not None:
                targets = [e] if (e := self.registry.get(device_id)) else []
            elif po is not None:
                targets = self.registry.by_po(po)
            else:
                raise ValueError("revoke needs a device id or a product order")
            count = 0
            for entry in targets:
                if entry.status == EntryStatus.REVOKED:
                    continue
                self._record(EV_REVOKED, entry.device_id, entry.po)
                try:
                    self.cloud.disable_device(entry.device_id)
                except CloudUnavailable:
                    logger.warning("cloud unreachable while revoking %s",
                                   entry.device_id.hex())
                count += 1
            return count

    def reset_device(self, device_id: bytes) -> bool:
        """Operator override: allow an id to provision from scratch again."""
        with self._lock:
            entry = self.registry.get(device_id)
            if entry is None:
                return False
            self._record(EV_RESET, device_id, entry.po)
            entry.consumed_nonces.clear()
            return True

    def anomaly_scan(self, po: bytes) -> AnomalyReport:
        with self._lock:
            rec = self.po_records.get(po)
            if rec is None:
                raise ValueError(f"unknown product order {po.hex()}")
            activated = [e for e in self.registry.by_po(po) if e.activated_at is not None]
            out = sum(1 for e in activated if not rec.in_window(e.activated_at))
            verdict = (Verdict.SUSPECTED_PK_LEAK
                       if len(activated) > rec.expected_count or out > 0
                       else Verdict.NORMAL)
            return AnomalyReport(po=po, observed_activations=len(activated),
                                 expected_count=rec.expected_count,
                                 out_of_window=out, verdict=verdict)


def build_agent(registry_path, po_file, cloud, rng: Rng | None = None,
                fsync: bool = False) -> AgentCore:
    """Load (or create) the registry and wire up an AgentCore.

    Raises CorruptRegistry rather than starting from damaged state.
    """
    registry = Registry.open(registry_path, fsync=fsync)
    po_records = load_po_file(po_file)
    return AgentCore(registry, po_records, cloud, rng)
