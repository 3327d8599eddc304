"""Symmetric sealing of protocol payloads.

Every payload on the device/agent wire travels inside a ``SealedMessage``:

    iv (16) | tag (32) | ciphertext (16 * k)

The plaintext is PKCS#7-padded and encrypted with AES-128-CBC under a
fresh random IV; the tag is HMAC-SHA256 over ``iv || ciphertext``.
Encryption and MAC normally share one key.  The agent-key response is
the exception: it is encrypted under the requesting key but MACed under
the newly issued key, so the receiver can only check the tag after
decrypting and parsing.  ``decrypt_noverify`` / ``verify_tag`` exist for
that flow; everything else should use ``seal`` / ``open``.

Key, IV and nonce size is 128 bits, the tag is 256 bits.  A padding
failure inside ``open`` is reported as ``TagMismatch`` so the two causes
are indistinguishable to a peer.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import random
import secrets
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import SizeError, TagMismatch

KEY_SIZE = 16
IV_SIZE = 16
NONCE_SIZE = 16
TAG_SIZE = 32
BLOCK_SIZE = 16

MAX_PLAINTEXT = 1 << 24


class Rng:
    """Random byte source: seeded (deterministic, test mode) or OS entropy.

    Each thread/actor owns its handle; handles are not thread-safe.
    """

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self._prng = random.Random(seed) if seed is not None else None

    def bytes(self, n: int) -> bytes:
        if self._prng is not None:
            return self._prng.randbytes(n)
        return secrets.token_bytes(n)

    def key(self) -> bytes:
        return self.bytes(KEY_SIZE)

    def nonce(self) -> bytes:
        return self.bytes(NONCE_SIZE)

    def spawn(self) -> "Rng":
        """Derive an independent child stream (deterministic when seeded)."""
        if self._prng is not None:
            return Rng(self._prng.getrandbits(64))
        return Rng()


def generate_key(rng_seed: int | None = None) -> bytes:
    """Generate a fresh 128-bit key; a seed makes the result reproducible."""
    return Rng(rng_seed).key()


@dataclass(frozen=True)
class SealedMessage:
    iv: bytes
    ciphertext: bytes
    tag: bytes

    def __post_init__(self):
        if len(self.iv) != IV_SIZE:
            raise ValueError(f"iv must be {IV_SIZE} bytes")
        if len(self.tag) != TAG_SIZE:
            raise ValueError(f"tag must be {TAG_SIZE} bytes")
        if len(self.ciphertext) < BLOCK_SIZE or len(self.ciphertext) % BLOCK_SIZE:
            raise ValueError("ciphertext must be a positive multiple of 16 bytes")

    def to_bytes(self) -> bytes:
        return self.iv + self.tag + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedMessage":
        if len(data) < IV_SIZE + TAG_SIZE + BLOCK_SIZE:
            raise ValueError(f"sealed message too short: {len(data)} bytes")
        return cls(
            iv=data[:IV_SIZE],
            tag=data[IV_SIZE:IV_SIZE + TAG_SIZE],
            ciphertext=data[IV_SIZE + TAG_SIZE:],
        )


def _check_key(key: bytes):
    if len(key) != KEY_SIZE:
        raise ValueError(f"key must be {KEY_SIZE} bytes, got {len(key)}")


def _cbc_encrypt(key: bytes, iv: bytes, padded: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    return enc.update(padded) + enc.finalize()


def _cbc_decrypt(key: bytes, iv: bytes, ciphertext: bytes) -> bytes:
    dec = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    return dec.update(ciphertext) + dec.finalize()


def _pad(data: bytes) -> bytes:
    n = BLOCK_SIZE - len(data) % BLOCK_SIZE
    return data + bytes([n]) * n


def _unpad(data: bytes) -> bytes:
    n = data[-1]
    if not 1 <= n <= BLOCK_SIZE or data[-n:] != bytes([n]) * n:
        raise ValueError("bad padding")
    return data[:-n]


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    return _hmac.new(key, data, hashlib.sha256).digest()


def constant_time_eq(a: bytes, b: bytes) -> bool:
    return _hmac.compare_digest(a, b)


def seal(key: bytes, plaintext: bytes, rng: Rng, mac_key: bytes | None = None) -> SealedMessage:
    """Encrypt-then-MAC ``plaintext``; ``mac_key`` defaults to ``key``."""
    _check_key(key)
    if len(plaintext) >= MAX_PLAINTEXT:
        raise SizeError(f"plaintext of {len(plaintext)} bytes exceeds limit")
    iv = rng.bytes(IV_SIZE)
    ciphertext = _cbc_encrypt(key, iv, _pad(plaintext))
    tag = hmac_sha256(mac_key if mac_key is not None else key, iv + ciphertext)
    return SealedMessage(iv=iv, ciphertext=ciphertext, tag=tag)


def verify_tag(mac_key: bytes, msg: SealedMessage) -> bool:
    """Constant-time check of the envelope tag under ``mac_key``."""
    expected = hmac_sha256(mac_key, msg.iv + msg.ciphertext)
    return _hmac.compare_digest(expected, msg.tag)


def decrypt_noverify(key: bytes, msg: SealedMessage) -> bytes:
    """Decrypt without checking the tag.

    Only for flows whose tag is keyed by material carried inside the
    ciphertext; the caller must verify the tag before acting on the result.
    Raises TagMismatch when the padding is not even plausible.
    """
    _check_key(key)
    padded = _cbc_decrypt(key, msg.iv, msg.ciphertext)
    try:
        return _unpad(padded)
    except ValueError:
        raise TagMismatch() from None


def open(key: bytes, msg: SealedMessage, mac_key: bytes | None = None) -> bytes:  # noqa: A001
    """Verify the tag (constant-time), then decrypt and unpad.

    Raises TagMismatch on any failure: wrong key, bit flips, truncated
    tag, or bad padding.
    """
    _check_key(key)
    if not verify_tag(mac_key if mac_key is not None else key, msg):
        raise TagMismatch()
    padded = _cbc_decrypt(key, msg.iv, msg.ciphertext)
    try:
        return _unpad(padded)
    except ValueError:
        # padding failure maps onto the same error as a bad tag
        raise TagMismatch() from None
