"""Sealing primitives: known-answer vectors, round trips, mutation
rejection and deterministic seeded mode."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otaprov import envelope
from otaprov.envelope import Rng, SealedMessage, generate_key
from otaprov.errors import SizeError, TagMismatch

# NIST SP 800-38A F.2.1, CBC-AES128.Encrypt
CBC_KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
CBC_IV = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
CBC_PT = bytes.fromhex(
    "6bc1bee22e409f96e93d7e117393172a"
    "ae2d8a571e03ac9c9eb76fac45af8e51"
    "30c81c46a35ce411e5fbc1191a0a52ef"
    "f69f2445df4f9b17ad2b417be66c3710")
CBC_CT = bytes.fromhex(
    "7649abac8119b246cee98e9b12e9197d"
    "5086cb9b507219ee95db113a917678b2"
    "73bed6b8e3c1743b7116e69e22229516"
    "3ff1caa1681fac09120eca307586e1a7")

# RFC 4231 test cases 1 and 2
HMAC_VECTORS = [
    (b"\x0b" * 20, b"Hi There",
     "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?",
     "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
]


def test_cbc_known_answer():
    assert envelope._cbc_encrypt(CBC_KEY, CBC_IV, CBC_PT) == CBC_CT
    assert envelope._cbc_decrypt(CBC_KEY, CBC_IV, CBC_CT) == CBC_PT


@pytest.mark.parametrize("key,data,digest", HMAC_VECTORS)
def test_hmac_known_answer(key, data, digest):
    assert envelope.hmac_sha256(key, data).hex() == digest


def test_generate_key_seeded_deterministic():
    assert generate_key(7) == generate_key(7)
    assert generate_key(7) != generate_key(8)
    assert len(generate_key(7)) == 16


def test_generate_key_unseeded_no_collisions():
    keys = {generate_key() for _ in range(10_000)}
    assert len(keys) == 10_000


def test_rng_seeded_stream_reproducible():
    a, b = Rng(123), Rng(123)
    assert [a.bytes(n) for n in (1, 16, 33)] == [b.bytes(n) for n in (1, 16, 33)]
    assert a.spawn().key() == b.spawn().key()


@given(st.binary(max_size=2048))
@settings(max_examples=60, deadline=None)
def test_seal_open_round_trip(plaintext):
    key = generate_key(1)
    msg = envelope.seal(key, plaintext, Rng())
    assert envelope.open(key, msg) == plaintext
    assert len(msg.ciphertext) % 16 == 0 and len(msg.ciphertext) >= 16


def test_round_trip_one_kib():
    key = generate_key(2)
    blob = Rng(3).bytes(1024)
    assert envelope.open(key, envelope.seal(key, blob, Rng())) == blob
    assert envelope.open(key, envelope.seal(key, b"", Rng())) == b""


def test_fresh_iv_per_seal():
    key = generate_key(4)
    rng = Rng()
    a = envelope.seal(key, b"same plaintext", rng)
    b = envelope.seal(key, b"same plaintext", rng)
    assert a.iv != b.iv and a.ciphertext != b.ciphertext


def test_wrong_key_rejected():
    msg = envelope.seal(generate_key(5), b"payload", Rng())
    with pytest.raises(TagMismatch):
        envelope.open(generate_key(6), msg)


@given(st.data())
@settings(max_examples=80, deadline=None)
def test_any_single_bit_flip_rejected(data):
    key = generate_key(9)
    msg = envelope.seal(key, b"bit flip target", Rng(10))
    raw = bytearray(msg.to_bytes())
    bit = data.draw(st.integers(min_value=0, max_value=len(raw) * 8 - 1))
    raw[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(TagMismatch):
        envelope.open(key, SealedMessage.from_bytes(bytes(raw)))


def test_truncated_tag_rejected():
    key = generate_key(11)
    msg = envelope.seal(key, b"x" * 40, Rng())
    shorter = SealedMessage(iv=msg.iv, ciphertext=msg.ciphertext,
                            tag=msg.tag[:-1] + b"\x00")
    with pytest.raises(TagMismatch):
        envelope.open(key, shorter)
    with pytest.raises(ValueError):
        SealedMessage(iv=msg.iv, ciphertext=msg.ciphertext, tag=msg.tag[:-1])


def test_oversize_plaintext():
    with pytest.raises(SizeError):
        envelope.seal(generate_key(12), b"\x00" * (1 << 24), Rng())


def test_split_mac_key_mode():
    enc_key, mac_key = generate_key(13), generate_key(14)
    msg = envelope.seal(enc_key, b"two-key envelope", Rng(), mac_key=mac_key)
    assert envelope.verify_tag(mac_key, msg)
    assert not envelope.verify_tag(enc_key, msg)
    assert envelope.open(enc_key, msg, mac_key=mac_key) == b"two-key envelope"
    assert envelope.decrypt_noverify(enc_key, msg) == b"two-key envelope"


def test_wire_encoding_round_trip():
    msg = envelope.seal(generate_key(15), b"wire", Rng(16))
    again = SealedMessage.from_bytes(msg.to_bytes())
    assert again == msg
    assert msg.to_bytes()[:16] == msg.iv
    assert msg.to_bytes()[16:48] == msg.tag
