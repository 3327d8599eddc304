"""Mock IoT cloud: per-device key registration with a dual-key
acceptance window, activation switching and challenge-response login.

While a key update is in flight the cloud accepts both generations.
Registration opens that window before the device ever sees the new key;
it closes when the agent sends the activation notice, or automatically
on the device's first successful login with the new key (the lost-
confirmation case).  Once the old key is disabled it never comes back.

Cloud keys are minted here when the agent registers a device without
supplying one, which is the normal path.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
from dataclasses import dataclass, field

from . import envelope
from .envelope import Rng
from .errors import CloudUnavailable
from .messages import ErrorCode, Frame, MsgType, error_frame

logger = logging.getLogger(__name__)

CHALLENGE_SIZE = 16


@dataclass
class CloudDeviceRecord:
    device_id: bytes
    old_key: bytes | None = None
    new_key: bytes | None = None
    old_enabled: bool = False
    new_enabled: bool = False
    activated: bool = False  # current new_key confirmed as the sole credential
    connection_info: bytes = b""
    revoked: bool = False
    pending_challenge: bytes | None = None
    auth_log: list[str] = field(default_factory=list)

    def enabled_keys(self) -> list[bytes]:
        keys = []
        if self.old_enabled and self.old_key is not None:
            keys.append(self.old_key)
        if self.new_enabled and self.new_key is not None:
            keys.append(self.new_key)
        return keys


class CloudStub:
    def __init__(self, rng: Rng | None = None, auto_activate: bool = True,
                 endpoint: str = "mqtts://cloud.example.net:8883"):
        self.rng = rng if rng is not None else Rng()
        self.auto_activate = auto_activate
        self.endpoint = endpoint
        self.records: dict[bytes, CloudDeviceRecord] = {}
        self.events: list[tuple[str, bytes]] = []
        self._lock = threading.Lock()

    def _connection_info(self, device_id: bytes) -> bytes:
        info = {"endpoint": self.endpoint, "client": device_id.hex(),
                "topic": f"fleet/{device_id.hex()}/up", "qos": 1}
        return json.dumps(info).encode()

    def register_new_key(self, device_id: bytes, key: bytes | None = None,
                         connection_info: bytes | None = None) -> tuple[bytes, bytes]:
        """Stage the next key generation; the previous one stays enabled.

        Returns (key, connection_info), minting both when not supplied.
        """
        with self._lock:
            rec = self.records.get(device_id)
            if rec is None:
                rec = CloudDeviceRecord(device_id=device_id)
                self.records[device_id] = rec
            if rec.new_key is not None and not rec.activated:
                # a staged generation is still unconfirmed; the device may
                # already hold it, so hand out the same one again instead
                # of stranding it behind a fresh key
                self.events.append(("register", device_id))
                return rec.new_key, rec.connection_info
            if rec.new_key is not None:
                # confirmed sole key becomes the old generation
                rec.old_key, rec.old_enabled = rec.new_key, True
            rec.new_key = key if key is not None else self.rng.key()
            rec.new_enabled = True
            rec.activated = False
            rec.connection_info = (connection_info if connection_info is not None
                                   else self._connection_info(device_id))
            self.events.append(("register", device_id))
            return rec.new_key, rec.connection_info

    def activate_new_disable_old(self, device_id: bytes) -> bool:
        """Close the window: the new key becomes the sole credential.

        Returns False (no-op) when nothing is pending.
        """
        with self._lock:
            return self._activate_locked(device_id)

    def _activate_locked(self, device_id: bytes) -> bool:
        rec = self.records.get(device_id)
        if rec is None or rec.new_key is None or rec.activated:
            return False
        rec.old_key = None
        rec.old_enabled = False
        rec.activated = True
        self.events.append(("activate", device_id))
        return True

    def challenge(self, device_id: bytes) -> bytes:
        with self._lock:
            rec = self.records.get(device_id)
            nonce = self.rng.bytes(CHALLENGE_SIZE)
            if rec is not None:
                rec.pending_challenge = nonce
            return nonce

    def authenticate(self, device_id: bytes, proof: bytes) -> bool:
        """Accept iff the proof MACs the outstanding challenge under an
        enabled key; first success under the new key retires the old one."""
        with self._lock:
            rec = self.records.get(device_id)
            if rec is None or rec.revoked or rec.pending_challenge is None:
                return False
            challenge = rec.pending_challenge
            rec.pending_challenge = None  # single use
            for key in rec.enabled_keys():
                expected = envelope.hmac_sha256(key, challenge)
                if envelope.constant_time_eq(expected, proof):
                    used_new = rec.new_key is not None and key == rec.new_key
                    rec.auth_log.append("new" if used_new else "old")
                    if used_new and rec.old_enabled and self.auto_activate:
                        # the device moved on without the agent's notice
                        self._activate_locked(device_id)
                        logger.info("auto-activated new key for %s after first login",
                                    device_id.hex())
                    return True
            return False

    def disable_device(self, device_id: bytes) -> bool:
        with self._lock:
            rec = self.records.get(device_id)
            if rec is None:
                return False
            rec.revoked = True
            self.events.append(("disable", device_id))
            return True

    def enabled_keys(self, device_id: bytes) -> list[bytes]:
        with self._lock:
            rec = self.records.get(device_id)
            if rec is None or rec.revoked:
                return []
            return rec.enabled_keys()

    def dump_state(self) -> dict:
        with self._lock:
            return {
                rec.device_id.hex(): {
                    "old_key": rec.old_key.hex() if rec.old_key else None,
                    "new_key": rec.new_key.hex() if rec.new_key else None,
                    "old_enabled": rec.old_enabled,
                    "new_enabled": rec.new_enabled,
                    "activated": rec.activated,
                    "revoked": rec.revoked,
                    "connection_info": base64.b64encode(rec.connection_info).decode(),
                    "auth_log": list(rec.auth_log),
                }
                for rec in self.records.values()
            }

    # frame handler for `cloud serve` (trusted admin/device channel)

    def open_conn(self) -> int:
        return 0

    def close_conn(self, conn_id: int):
        pass

    def handle_frame(self, conn_id: int, frame: Frame) -> Frame:
        try:
            body = json.loads(frame.body.decode() or "{}")
            if frame.msg_type == MsgType.CLOUD_REGISTER:
                key = bytes.fromhex(body["key"]) if body.get("key") else None
                info = base64.b64decode(body["conn"]) if body.get("conn") else None
                key, info = self.register_new_key(bytes.fromhex(body["id"]), key, info)
                return _reply({"key": key.hex(), "conn": base64.b64encode(info).decode()})
            if frame.msg_type == MsgType.CLOUD_ACTIVATE:
                changed = self.activate_new_disable_old(bytes.fromhex(body["id"]))
                return _reply({"changed": changed})
            if frame.msg_type == MsgType.CLOUD_CHALLENGE:
                nonce = self.challenge(bytes.fromhex(body["id"]))
                return _reply({"challenge": nonce.hex()})
            if frame.msg_type == MsgType.CLOUD_AUTH:
                ok = self.authenticate(bytes.fromhex(body["id"]), bytes.fromhex(body["proof"]))
                return _reply({"accepted": ok})
            if frame.msg_type == MsgType.CLOUD_DISABLE:
                return _reply({"changed": self.disable_device(bytes.fromhex(body["id"]))})
            if frame.msg_type == MsgType.CLOUD_DUMP:
                return _reply(self.dump_state())
            return error_frame(ErrorCode.PROTOCOL)
        except (KeyError, ValueError, json.JSONDecodeError):
            return error_frame(ErrorCode.PROTOCOL)


def _reply(obj: dict) -> Frame:
    return Frame(MsgType.CLOUD_REPLY, b"", json.dumps(obj).encode())


class CloudSocketClient:
    """Same API as CloudStub, speaking frames to a remote `cloud serve`."""

    def __init__(self, link):
        self._link = link

    def _call(self, msg_type: MsgType, obj: dict) -> dict:
        try:
            with self._link.connect() as conn:
                reply = conn.roundtrip(Frame(msg_type, b"", json.dumps(obj).encode()))
        except (OSError, ConnectionError) as exc:
            raise CloudUnavailable(str(exc)) from None
        if reply.msg_type != MsgType.CLOUD_REPLY:
            raise CloudUnavailable("cloud refused the request")
        return json.loads(reply.body.decode())

    def register_new_key(self, device_id, key=None, connection_info=None):
        out = self._call(MsgType.CLOUD_REGISTER, {
            "id": device_id.hex(),
            "key": key.hex() if key else None,
            "conn": base64.b64encode(connection_info).decode() if connection_info else None,
        })
        return bytes.fromhex(out["key"]), base64.b64decode(out["conn"])

    def activate_new_disable_old(self, device_id) -> bool:
        return self._call(MsgType.CLOUD_ACTIVATE, {"id": device_id.hex()})["changed"]

    def challenge(self, device_id) -> bytes:
        return bytes.fromhex(self._call(MsgType.CLOUD_CHALLENGE, {"id": device_id.hex()})["challenge"])

    def authenticate(self, device_id, proof) -> bool:
        return self._call(MsgType.CLOUD_AUTH, {"id": device_id.hex(), "proof": proof.hex()})["accepted"]

    def disable_device(self, device_id) -> bool:
        return self._call(MsgType.CLOUD_DISABLE, {"id": device_id.hex()})["changed"]

    def dump_state(self) -> dict:
        return self._call(MsgType.CLOUD_DUMP, {})
