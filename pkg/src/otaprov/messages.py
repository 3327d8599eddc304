"""Wire grammar for the key-provisioning protocol.

Frame layout on a stream transport:

    length (4, big-endian) | msg_type (1) | header | body

The header is plaintext and fixed per type: the agent-key request
carries the 8-byte product order, the cloud-key request carries the
12-byte device id, error frames carry a single code byte, everything
else has an empty header.  For protocol messages the body is a
``SealedMessage``; for the cloud admin channel it is UTF-8 JSON.

Sealed payloads always start with a byte repeating the frame's
msg_type, binding the envelope to its intent; re-framing a captured
body under another type fails that check.  Field layouts:

    AK_REQUEST   type | id (12)  | nonce1 (16)
    AK_RESPONSE  type | agent key (16) | nonce1 (16) | nonce2 (16)
    AK_CONFIRM   type | nonce2 (16) | nonce3 (16) | success marker (1)
    AK_ACK       type | nonce3 (16)
    CK_REQUEST   type | request marker (1) | nonce1 (16)
    CK_RESPONSE  type | cloud key (16) | info len (2, BE) | info | nonce1 (16) | nonce2 (16)
    CK_CONFIRM   type | success marker (1) | nonce2 (16) | nonce3 (16)
    CK_ACK       type | nonce3 (16)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from .errors import ProtocolError

DEVICE_ID_SIZE = 12
PRODUCT_ORDER_SIZE = 8
NONCE_SIZE = 16
KEY_SIZE = 16
MAX_CONNECTION_INFO = 512

SUCCESS_TX = 0x01
REQUEST_TX = 0x02


class MsgType(IntEnum):
    AK_REQUEST = 1
    AK_RESPONSE = 2
    AK_CONFIRM = 3
    AK_ACK = 4
    CK_REQUEST = 5
    CK_RESPONSE = 6
    CK_CONFIRM = 7
    CK_ACK = 8
    ERROR = 9
    # cloud admin channel (trusted link, JSON bodies)
    CLOUD_REGISTER = 0x20
    CLOUD_ACTIVATE = 0x21
    CLOUD_CHALLENGE = 0x22
    CLOUD_AUTH = 0x23
    CLOUD_DISABLE = 0x24
    CLOUD_DUMP = 0x25
    CLOUD_REPLY = 0x2F


HEADER_SIZES = {
    MsgType.AK_REQUEST: PRODUCT_ORDER_SIZE,
    MsgType.CK_REQUEST: DEVICE_ID_SIZE,
    MsgType.ERROR: 1,
}


class ErrorCode(IntEnum):
    UNKNOWN_PO = 1
    ALREADY_PROVISIONED = 2
    CLOUD_UNAVAILABLE = 3
    BUSY = 4
    PROTOCOL = 5
    REVOKED = 6
    REPLAY = 7


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    header: bytes
    body: bytes

    def encode(self) -> bytes:
        return bytes([self.msg_type]) + self.header + self.body

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        if not data:
            raise ProtocolError("empty frame")
        try:
            msg_type = MsgType(data[0])
        except ValueError:
            raise ProtocolError(f"unknown msg type {data[0]}") from None
        hsize = HEADER_SIZES.get(msg_type, 0)
        if len(data) < 1 + hsize:
            raise ProtocolError("frame shorter than its header")
        return cls(msg_type=msg_type, header=data[1:1 + hsize], body=data[1 + hsize:])


def error_frame(code: ErrorCode) -> Frame:
    return Frame(MsgType.ERROR, bytes([code]), b"")


def error_code(frame: Frame) -> ErrorCode:
    return ErrorCode(frame.header[0])


def _expect(buf: bytes, msg_type: MsgType, size: int | None):
    if not buf or buf[0] != msg_type:
        raise ProtocolError(f"payload does not bind to {msg_type.name}")
    if size is not None and len(buf) != size:
        raise ProtocolError(f"{msg_type.name} payload has wrong length {len(buf)}")


# agent key flow

def encode_ak_request(device_id: bytes, nonce1: bytes) -> bytes:
    return bytes([MsgType.AK_REQUEST]) + device_id + nonce1


def parse_ak_request(buf: bytes) -> tuple[bytes, bytes]:
    _expect(buf, MsgType.AK_REQUEST, 1 + DEVICE_ID_SIZE + NONCE_SIZE)
    return buf[1:13], buf[13:29]


def encode_ak_response(agent_key: bytes, nonce1: bytes, nonce2: bytes) -> bytes:
    return bytes([MsgType.AK_RESPONSE]) + agent_key + nonce1 + nonce2


def parse_ak_response(buf: bytes) -> tuple[bytes, bytes, bytes]:
    _expect(buf, MsgType.AK_RESPONSE, 1 + KEY_SIZE + 2 * NONCE_SIZE)
    return buf[1:17], buf[17:33], buf[33:49]


def encode_ak_confirm(nonce2: bytes, nonce3: bytes) -> bytes:
    return bytes([MsgType.AK_CONFIRM]) + nonce2 + nonce3 + bytes([SUCCESS_TX])


def parse_ak_confirm(buf: bytes) -> tuple[bytes, bytes]:
    _expect(buf, MsgType.AK_CONFIRM, 1 + 2 * NONCE_SIZE + 1)
    if buf[-1] != SUCCESS_TX:
        raise ProtocolError("confirm lacks the success marker")
    return buf[1:17], buf[17:33]


def encode_ak_ack(nonce3: bytes) -> bytes:
    return bytes([MsgType.AK_ACK]) + nonce3


def parse_ak_ack(buf: bytes) -> bytes:
    _expect(buf, MsgType.AK_ACK, 1 + NONCE_SIZE)
    return buf[1:17]


# cloud key flow

def encode_ck_request(nonce1: bytes) -> bytes:
    return bytes([MsgType.CK_REQUEST, REQUEST_TX]) + nonce1


def parse_ck_request(buf: bytes) -> bytes:
    _expect(buf, MsgType.CK_REQUEST, 2 + NONCE_SIZE)
    if buf[1] != REQUEST_TX:
        raise ProtocolError("request lacks the request marker")
    return buf[2:18]


def encode_ck_response(cloud_key: bytes, connection_info: bytes,
                       nonce1: bytes, nonce2: bytes) -> bytes:
    if len(connection_info) > MAX_CONNECTION_INFO:
        raise ProtocolError(f"connection info of {len(connection_info)} bytes too large")
    return (bytes([MsgType.CK_RESPONSE]) + cloud_key
            + struct.pack(">H", len(connection_info)) + connection_info
            + nonce1 + nonce2)


def parse_ck_response(buf: bytes) -> tuple[bytes, bytes, bytes, bytes]:
    _expect(buf, MsgType.CK_RESPONSE, None)
    if len(buf) < 1 + KEY_SIZE + 2 + 2 * NONCE_SIZE:
        raise ProtocolError("cloud key response too short")
    (ilen,) = struct.unpack_from(">H", buf, 1 + KEY_SIZE)
    if ilen > MAX_CONNECTION_INFO or len(buf) != 1 + KEY_SIZE + 2 + ilen + 2 * NONCE_SIZE:
        raise ProtocolError("cloud key response has wrong length")
    off = 1 + KEY_SIZE + 2
    info = buf[off:off + ilen]
    nonce1 = buf[off + ilen:off + ilen + NONCE_SIZE]
    nonce2 = buf[off + ilen + NONCE_SIZE:]
    return buf[1:17], info, nonce1, nonce2


def encode_ck_confirm(nonce2: bytes, nonce3: bytes) -> bytes:
    return bytes([MsgType.CK_CONFIRM, SUCCESS_TX]) + nonce2 + nonce3


def parse_ck_confirm(buf: bytes) -> tuple[bytes, bytes]:
    _expect(buf, MsgType.CK_CONFIRM, 2 + 2 * NONCE_SIZE)
    if buf[1] != SUCCESS_TX:
        raise ProtocolError("confirm lacks the success marker")
    return buf[2:18], buf[18:34]


def encode_ck_ack(nonce3: bytes) -> bytes:
    return bytes([MsgType.CK_ACK]) + nonce3


def parse_ck_ack(buf: bytes) -> bytes:
    _expect(buf, MsgType.CK_ACK, 1 + NONCE_SIZE)
    return buf[1:17]
