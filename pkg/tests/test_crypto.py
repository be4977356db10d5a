import hashlib
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icschain.crypto import (
    AuthenticationError,
    DeterministicEntropy,
    Envelope,
    MalformedEnvelopeError,
    MalformedKeyError,
    derive_seed,
    envelope_decrypt,
    envelope_encrypt,
    generate_keypair,
    hash_bytes,
    public_key_of,
    read_key_file,
    sign,
    verify,
    write_key_file,
)

# FIPS 180-2 test vectors
SHA256_EMPTY = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
SHA256_ABC = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def flip_bit(b: bytes, bit: int) -> bytes:
    out = bytearray(b)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


class TestHash:
    def test_published_vectors(self):
        assert hash_bytes(b"").hex() == SHA256_EMPTY
        assert hash_bytes(b"abc").hex() == SHA256_ABC

    @given(st.binary(max_size=256))
    def test_deterministic_32_bytes(self, b):
        assert hash_bytes(b) == hash_bytes(b)
        assert len(hash_bytes(b)) == 32

    def test_single_bit_flip_changes_digest(self):
        rng = __import__("random").Random(1)
        for _ in range(1000):
            b = rng.randbytes(rng.randint(1, 64))
            assert hash_bytes(b) != hash_bytes(flip_bit(b, rng.randrange(len(b) * 8)))

    def test_no_collisions_over_many_inputs(self):
        digests = {hash_bytes(i.to_bytes(8, "big")) for i in range(100_000)}
        assert len(digests) == 100_000


class TestKeys:
    def test_same_seed_same_pair(self):
        s = derive_seed("k", 1)
        assert generate_keypair(s) == generate_keypair(s)

    def test_distinct_seeds_distinct_publics(self):
        pubs = {generate_keypair(derive_seed("k", i)).public for i in range(10_000)}
        assert len(pubs) == 10_000

    def test_unseeded_round_trip(self):
        kp = generate_keypair()
        assert verify(kp.public, b"m", sign(kp.secret, b"m"))
        assert public_key_of(kp.secret) == kp.public

    @pytest.mark.parametrize("n", [0, 16, 31, 33])
    def test_bad_seed_length(self, n):
        with pytest.raises(MalformedKeyError):
            generate_keypair(b"\x00" * n)

    def test_secret_not_in_repr(self):
        kp = generate_keypair(derive_seed("repr"))
        assert kp.secret.hex() not in repr(kp)


class TestSignatures:
    kp = generate_keypair(derive_seed("sig", 0))
    other = generate_keypair(derive_seed("sig", 1))

    def test_empty_message(self):
        assert verify(self.kp.public, b"", sign(self.kp.secret, b""))

    def test_wrong_public_key(self):
        assert not verify(self.other.public, b"msg", sign(self.kp.secret, b"msg"))

    def test_message_bit_flip(self):
        rng = __import__("random").Random(2)
        for _ in range(100):
            m = rng.randbytes(rng.randint(1, 100))
            sig = sign(self.kp.secret, m)
            assert verify(self.kp.public, m, sig)
            assert not verify(self.kp.public, flip_bit(m, rng.randrange(len(m) * 8)), sig)

    def test_signature_bit_flip(self):
        sig = sign(self.kp.secret, b"payload")
        for bit in range(0, 512, 7):
            assert not verify(self.kp.public, b"payload", flip_bit(sig, bit))

    @settings(max_examples=200)
    @given(st.binary(max_size=64), st.binary(max_size=64))
    def test_other_message_rejected(self, m, m2):
        sig = sign(self.kp.secret, m)
        assert verify(self.kp.public, m2, sig) == (m == m2)

    def test_malformed_lengths_raise(self):
        sig = sign(self.kp.secret, b"x")
        with pytest.raises(MalformedKeyError):
            verify(self.kp.public[:31], b"x", sig)
        with pytest.raises(MalformedKeyError):
            verify(self.kp.public, b"x", sig[:63])
        with pytest.raises(MalformedKeyError):
            sign(b"short", b"x")


class TestEnvelope:
    kp = generate_keypair(derive_seed("env", 0))

    def test_round_trip_100_bytes(self):
        m = os.urandom(100)
        assert envelope_decrypt(self.kp.secret, envelope_encrypt(self.kp.public, m)) == m

    @settings(max_examples=50)
    @given(st.binary(max_size=4096))
    def test_round_trip_property(self, m):
        env = envelope_encrypt(self.kp.public, m)
        assert envelope_decrypt(self.kp.secret, Envelope.from_bytes(env.to_bytes())) == m

    def test_one_mebibyte(self):
        m = bytes(1 << 20)
        assert envelope_decrypt(self.kp.secret, envelope_encrypt(self.kp.public, m)) == m
        with pytest.raises(ValueError):
            envelope_encrypt(self.kp.public, bytes((1 << 20) + 1))

    def test_wrong_key(self):
        other = generate_keypair(derive_seed("env", 1))
        env = envelope_encrypt(self.kp.public, b"secret log")
        with pytest.raises(AuthenticationError):
            envelope_decrypt(other.secret, env)

    def test_fresh_randomness(self):
        m = b"same plaintext" * 4
        cts = {envelope_encrypt(self.kp.public, m).ciphertext for _ in range(100)}
        assert len(cts) == 100

    def test_no_plaintext_prefix(self):
        # first ciphertext byte of a constant plaintext should look uniform
        m = b"A" * 32
        firsts = [envelope_encrypt(self.kp.public, m).ciphertext[0] for _ in range(512)]
        assert firsts.count(m[0]) < 16  # ~2 expected under uniformity
        assert len(set(firsts)) > 150

    def test_tampered_fields_fail(self):
        env = envelope_encrypt(self.kp.public, b"reading=42")
        raw = env.to_bytes()
        for i in range(0, len(raw), 5):
            with pytest.raises(AuthenticationError):
                envelope_decrypt(self.kp.secret, Envelope.from_bytes(flip_bit(raw, 8 * i)))

    def test_truncated(self):
        raw = envelope_encrypt(self.kp.public, b"").to_bytes()
        with pytest.raises(MalformedEnvelopeError):
            Envelope.from_bytes(raw[:-1])

    def test_deterministic_entropy_reproduces(self):
        a = envelope_encrypt(self.kp.public, b"x", entropy=DeterministicEntropy(b"s"))
        b = envelope_encrypt(self.kp.public, b"x", entropy=DeterministicEntropy(b"s"))
        assert a == b


class TestKeyFiles:
    def test_round_trip(self, tmp_path):
        kp = generate_keypair(derive_seed("file"))
        write_key_file(tmp_path / "k.sk", "sk", kp.secret)
        assert read_key_file(tmp_path / "k.sk") == ("sk", kp.secret)
        assert (tmp_path / "k.sk").read_text() == f"sk\n{kp.secret.hex()}\n"

    def test_rejects_bad_header(self, tmp_path):
        (tmp_path / "k").write_text("key\n" + "00" * 32 + "\n")
        with pytest.raises(MalformedKeyError):
            read_key_file(tmp_path / "k")


def test_derive_seed_is_unambiguous():
    assert derive_seed("ab", "c") != derive_seed("a", "bc")
    assert derive_seed(1) == derive_seed("1")
    assert len(derive_seed()) == 32 == len(hashlib.sha256().digest())
