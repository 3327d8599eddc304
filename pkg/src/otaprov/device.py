"""Device-side protocol state machine.

A device owns one flash image plus its chip identity and drives three
flows against the agent: the first agent-key request (bootstrapped by
the factory product key), agent-key rotation (same flow keyed by the
current agent key) and cloud-key update.  Every flow leaves the flash
with a usable key at any interruption point: the new record goes to the
redundant slot first, the superseded one is erased only after the new
record is fully on flash, and boot-time recovery finishes whatever an
interruption left half-done.

Validation of the agent-key response follows the requesting algorithm
exactly: decrypt, then check the nonce echo, then server-nonce
freshness, then the MAC (which is keyed by the new key and therefore
cannot be checked earlier).  Each check is recorded in ``check_log`` so
tests can observe the order.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from enum import IntEnum

from . import envelope, flash, messages
from .envelope import Rng, SealedMessage
from .errors import (
    AgentRejected,
    LinkTimeout,
    Nonce1Mismatch,
    OrderingViolation,
    ProtocolError,
    ReplayedNonce2,
    StaleSlotOccupied,
    TagMismatch,
    Unprovisioned,
)
from .flash import KeyKind
from .messages import Frame, MsgType

logger = logging.getLogger(__name__)

BACKOFF_SECONDS = (1.0, 2.0, 4.0)
NONCE_WINDOW = 4096


@dataclass(frozen=True)
class DeviceIdentity:
    """Chip-level identity: 96-bit id plus the 8-byte product order."""

    device_id: bytes
    product_order: bytes

    def __post_init__(self):
        if len(self.device_id) != messages.DEVICE_ID_SIZE:
            raise ValueError("device id must be 12 bytes")
        if len(self.product_order) != messages.PRODUCT_ORDER_SIZE:
            raise ValueError("product order must be 8 bytes")


class Phase(IntEnum):
    BURNED = 1
    AK_ISSUED = 2
    CLOUD_PROVISIONED = 3


class Device:
    def __init__(self, identity: DeviceIdentity, image: flash.FlashImage,
                 rng: Rng | None = None, sleep=time.sleep):
        self.identity = identity
        self.image = image
        self.rng = rng if rng is not None else Rng()
        self._sleep = sleep
        self.seen_nonce2: set[bytes] = set()
        self.check_log: list[tuple[str, bool]] = []
        self.boot()

    # boot and state inspection

    def boot(self):
        """Recover from an interrupted update: finish pending commits."""
        state = flash.boot_scan(self.image)
        for _, slot in state.superseded:
            self.image.erase_slot(slot)
        state = flash.boot_scan(self.image)
        if KeyKind.AGENT in state.records and KeyKind.PRODUCT in state.records:
            # provisioning completed the key write but died before
            # dropping the factory key
            flash.erase_product_key(self.image)

    def _scan(self) -> flash.BootState:
        return flash.boot_scan(self.image)

    @property
    def phase(self) -> Phase:
        state = self._scan()
        if state.active(KeyKind.AGENT) is not None:
            if state.active(KeyKind.CLOUD) is not None:
                return Phase.CLOUD_PROVISIONED
            return Phase.AK_ISSUED
        if state.active(KeyKind.PRODUCT) is not None:
            return Phase.BURNED
        raise Unprovisioned("device holds no valid key record")

    @property
    def product_key(self) -> bytes | None:
        rec = self._scan().active(KeyKind.PRODUCT)
        return rec.key if rec else None

    @property
    def agent_key(self) -> bytes | None:
        rec = self._scan().active(KeyKind.AGENT)
        return rec.key if rec else None

    @property
    def cloud_key(self) -> bytes | None:
        rec = self._scan().active(KeyKind.CLOUD)
        return rec.key if rec else None

    @property
    def cloud_connection_info(self) -> bytes | None:
        rec = self._scan().active(KeyKind.CLOUD)
        return rec.payload if rec else None

    # helpers

    def _check(self, name: str, ok: bool, exc: type[Exception]):
        self.check_log.append((name, bool(ok)))
        if not ok:
            raise exc(name)

    def _remember_nonce(self, nonce2: bytes):
        if len(self.seen_nonce2) >= NONCE_WINDOW:
            self.seen_nonce2.pop()
        self.seen_nonce2.add(nonce2)

    def _retry(self, attempt_fn):
        """Run a flow attempt, retrying on transport timeouts with fresh
        nonces and exponential backoff.  Validation failures abort."""
        last = None
        for attempt in range(1 + len(BACKOFF_SECONDS)):
            if attempt:
                self._sleep(BACKOFF_SECONDS[attempt - 1])
            try:
                return attempt_fn()
            except LinkTimeout as exc:
                last = exc
        raise last

    def _store_key(self, kind: KeyKind, key: bytes, payload: bytes = b""):
        try:
            pending = flash.begin_key_write(self.image, kind, key, payload)
        except StaleSlotOccupied:
            flash.erase_stale_slot(self.image, kind)
            pending = flash.begin_key_write(self.image, kind, key, payload)
        return pending

    # agent key flows

    def request_ak(self, link) -> bytes:
        """First provisioning: trade the product key for a unique agent key."""
        if self.phase != Phase.BURNED:
            raise OrderingViolation("agent key already provisioned; use rotate_ak")
        return self._retry(lambda: self._ak_attempt(self.product_key, initial=True, link=link))

    def rotate_ak(self, link) -> bytes:
        """Replace the current agent key, authenticating with the old one."""
        if self.agent_key is None:
            raise OrderingViolation("no agent key to rotate")
        return self._retry(lambda: self._ak_attempt(self.agent_key, initial=False, link=link))

    def _ak_attempt(self, request_key: bytes, initial: bool, link) -> bytes:
        with link.connect() as conn:
            nonce1 = self.rng.nonce()
            body = envelope.seal(
                request_key,
                messages.encode_ak_request(self.identity.device_id, nonce1),
                self.rng,
            )
            reply = conn.roundtrip(
                Frame(MsgType.AK_REQUEST, self.identity.product_order, body.to_bytes()))
            if reply.msg_type == MsgType.ERROR:
                raise AgentRejected(messages.error_code(reply))
            if reply.msg_type != MsgType.AK_RESPONSE:
                raise ProtocolError(f"unexpected {reply.msg_type.name}")
            sealed = SealedMessage.from_bytes(reply.body)

            # response MAC is keyed by the new key carried inside the
            # ciphertext, so the order is fixed: decrypt and parse,
            # nonce echo, server-nonce freshness, then the MAC
            plain = envelope.decrypt_noverify(request_key, sealed)
            agent_key, echoed1, nonce2 = messages.parse_ak_response(plain)
            self._check("nonce1", echoed1 == nonce1, Nonce1Mismatch)
            self._check("nonce2", nonce2 not in self.seen_nonce2, ReplayedNonce2)
            self._check("mac", envelope.verify_tag(agent_key, sealed), TagMismatch)
            self._remember_nonce(nonce2)

            # new key to flash before telling the agent it is in place
            pending = self._store_key(KeyKind.AGENT, agent_key)
            flash.commit_key(self.image, pending)
            if initial:
                flash.erase_product_key(self.image)

            nonce3 = self.rng.nonce()
            confirm = envelope.seal(
                agent_key, messages.encode_ak_confirm(nonce2, nonce3), self.rng)
            self._finish(conn, Frame(MsgType.AK_CONFIRM, b"", confirm.to_bytes()),
                         agent_key, nonce3, messages.parse_ak_ack)
            return agent_key

    # cloud key flow

    def update_cloud_key(self, link) -> bytes:
        """Fetch (or replace) the cloud key and connection info via the agent."""
        if self.agent_key is None:
            raise OrderingViolation("cloud key update requires an agent key")
        return self._retry(lambda: self._ck_attempt(link))

    def _ck_attempt(self, link) -> bytes:
        agent_key = self.agent_key
        with link.connect() as conn:
            nonce1 = self.rng.nonce()
            body = envelope.seal(agent_key, messages.encode_ck_request(nonce1), self.rng)
            reply = conn.roundtrip(
                Frame(MsgType.CK_REQUEST, self.identity.device_id, body.to_bytes()))
            if reply.msg_type == MsgType.ERROR:
                raise AgentRejected(messages.error_code(reply))
            if reply.msg_type != MsgType.CK_RESPONSE:
                raise ProtocolError(f"unexpected {reply.msg_type.name}")
            sealed = SealedMessage.from_bytes(reply.body)

            # MAC key is known up front here, so it is checked first
            self._check("mac", envelope.verify_tag(agent_key, sealed), TagMismatch)
            plain = envelope.decrypt_noverify(agent_key, sealed)
            cloud_key, info, echoed1, nonce2 = messages.parse_ck_response(plain)
            self._check("nonce1", echoed1 == nonce1, Nonce1Mismatch)
            self._check("nonce2", nonce2 not in self.seen_nonce2, ReplayedNonce2)
            self._remember_nonce(nonce2)

            # redundant slot first (update in flight), confirm, then
            # finish the commit by erasing the superseded record
            pending = self._store_key(KeyKind.CLOUD, cloud_key, payload=info)
            nonce3 = self.rng.nonce()
            confirm = envelope.seal(
                agent_key, messages.encode_ck_confirm(nonce2, nonce3), self.rng)
            ack_frame = Frame(MsgType.CK_CONFIRM, b"", confirm.to_bytes())
            try:
                ack = conn.roundtrip(ack_frame)
            except LinkTimeout:
                ack = None
            flash.commit_key(self.image, pending)
            if ack is not None:
                self._validate_ack(ack, agent_key, nonce3, messages.parse_ck_ack)
            return cloud_key

    def _finish(self, conn, confirm_frame: Frame, key: bytes, nonce3: bytes, parse_ack):
        """Send the confirmation; a lost/invalid ack does not undo the
        committed key, the agent keeps accepting it as pending."""
        try:
            ack = conn.roundtrip(confirm_frame)
        except LinkTimeout:
            logger.warning("ack lost; local key update already committed")
            return
        self._validate_ack(ack, key, nonce3, parse_ack)

    def _validate_ack(self, ack: Frame, key: bytes, nonce3: bytes, parse_ack):
        try:
            if ack.msg_type == MsgType.ERROR:
                raise AgentRejected(messages.error_code(ack))
            plain = envelope.open(key, SealedMessage.from_bytes(ack.body))
            echoed3 = parse_ack(plain)
            if echoed3 != nonce3:
                raise ProtocolError("ack echoed a stale nonce")
        except (AgentRejected, ProtocolError, TagMismatch, ValueError) as exc:
            logger.warning("invalid ack ignored (%s); key already committed", exc)

    # cloud authentication

    def authenticate_to_cloud(self, cloud) -> bool:
        """Challenge-response login using the stored cloud key."""
        key = self.cloud_key
        if key is None:
            raise Unprovisioned("no cloud key on flash")
        challenge = cloud.challenge(self.identity.device_id)
        proof = envelope.hmac_sha256(key, challenge)
        return cloud.authenticate(self.identity.device_id, proof)
