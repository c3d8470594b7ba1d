import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chorchain import crypto


def test_ripemd160_known_vectors():
    cases = {
        b"": "9c1185a5c5e9fc54612808977ee8f548b2258d31",
        b"abc": "8eb208f7e05d987a9b044a8e98c6b087f15a0bfc",
        b"message digest": "5d0689ef49d2fae572b881b123a85ffa21595f36",
        b"abcdefghijklmnopqrstuvwxyz": "f71c27109c692c1b56bbdceb5b9d2865b3708dbc",
    }
    for data, want in cases.items():
        assert crypto._ripemd160(data).hex() == want


def test_hash160_is_sha256_then_ripemd():
    data = b"token"
    assert crypto.hash160(data) == crypto._ripemd160(crypto.sha256(data))


def test_sign_is_deterministic():
    kp = crypto.Keypair.from_seed(b"alpha")
    digest = crypto.sha256(b"payload")
    assert crypto.sign(digest, kp) == crypto.sign(digest, kp)


def test_sign_verify_roundtrip():
    rng = random.Random(1)
    kp = crypto.Keypair.generate(rng)
    digest = crypto.sha256(b"message")
    sig = crypto.sign(digest, kp)
    assert crypto.verify(digest, sig, kp.public_key)
    assert not crypto.verify(crypto.sha256(b"other"), sig, kp.public_key)


def test_signature_lengths_are_71_or_72():
    rng = random.Random(2)
    seen = set()
    for _ in range(300):
        kp = crypto.Keypair.generate(rng)
        digest = rng.getrandbits(256).to_bytes(32, "big")
        seen.add(len(crypto.sign(digest, kp)))
    assert seen == {71, 72}


def test_tampered_signature_rejected():
    kp = crypto.Keypair.from_seed(b"beta")
    digest = crypto.sha256(b"m")
    sig = bytearray(crypto.sign(digest, kp))
    sig[9] ^= 0x01
    assert not crypto.verify(digest, bytes(sig), kp.public_key)


def test_missing_sighash_byte_rejected():
    kp = crypto.Keypair.from_seed(b"gamma")
    digest = crypto.sha256(b"m")
    sig = crypto.sign(digest, kp)
    assert not crypto.verify(digest, sig[:-1], kp.public_key)


def test_high_s_rejected():
    kp = crypto.Keypair.from_seed(b"delta")
    digest = crypto.sha256(b"m")
    sig = crypto.sign(digest, kp)
    r, s = crypto.der_decode(sig[:-1])
    high = crypto.der_encode(r, crypto.N - s) + bytes([crypto.SIGHASH_ALL])
    assert not crypto.verify(digest, high, kp.public_key)


def test_recovery_finds_signer():
    rng = random.Random(3)
    kp = crypto.Keypair.generate(rng)
    digest = crypto.sha256(b"recover me")
    sig = crypto.sign(digest, kp)
    assert kp.public_key in crypto.recover_candidates(digest, sig)
    assert crypto.verify_with_key_hash(digest, sig, kp.key_hash)
    assert not crypto.verify_with_key_hash(digest, sig, b"\x00" * 20)


def test_pubkey_roundtrip():
    kp = crypto.Keypair.from_seed(b"epsilon")
    assert crypto.encode_pubkey(crypto.decode_pubkey(kp.public_key)) == kp.public_key


def test_bad_pubkey_rejected():
    with pytest.raises(crypto.SignatureError):
        crypto.decode_pubkey(b"\x04" + b"\x01" * 32)
    with pytest.raises(crypto.SignatureError):
        crypto.decode_pubkey(b"\x02" + b"\xff" * 32)


def test_der_strictness():
    with pytest.raises(crypto.SignatureError):
        crypto.der_decode(b"\x30\x00")
    kp = crypto.Keypair.from_seed(b"zeta")
    sig = crypto.sign(crypto.sha256(b"x"), kp)[:-1]
    r, s = crypto.der_decode(sig)
    padded = b"\x30" + bytes([len(sig)]) + b"\x02" + bytes([34]) + b"\x00\x00" + sig[4:36]
    with pytest.raises(crypto.SignatureError):
        crypto.der_decode(padded)


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=32, max_size=32), st.integers(min_value=1, max_value=crypto.N - 1))
def test_sign_verify_property(digest, secret):
    kp = crypto.Keypair(secret)
    sig = crypto.sign(digest, kp)
    assert len(sig) in (71, 72)
    assert crypto.verify(digest, sig, kp.public_key)


def test_keypair_range_check():
    with pytest.raises(ValueError):
        crypto.Keypair(0)
    with pytest.raises(ValueError):
        crypto.Keypair(crypto.N)
