from __future__ import annotations

import hashlib
from dataclasses import replace

import pytest

from chainmon.vrf import VrfProof, proof_to_output, vrf_keygen, vrf_prove, vrf_verify


@pytest.fixture(scope="module")
def keys():
    return vrf_keygen(11, bits=512)


def seed(i: int) -> bytes:
    return hashlib.sha256(b"seed%d" % i).digest()


def test_keygen_is_deterministic_and_sized():
    a, b = vrf_keygen(5, 512), vrf_keygen(5, 512)
    assert a == b
    assert a.pk.n.bit_length() == 512 and a.pk.n == a.sk.p * a.sk.q
    assert vrf_keygen(6, 512).pk != a.pk
    with pytest.raises(ValueError):
        vrf_keygen(1, bits=100)


def test_prove_verify_and_uniqueness(keys):
    p = vrf_prove(keys.sk, seed(1))
    assert vrf_verify(keys.pk, seed(1), p)
    assert vrf_prove(keys.sk, seed(1)) == p  # one output per (sk, seed)
    assert p.output == proof_to_output(p.proof) and len(p.output) == 32
    assert 0 <= p.unit_value < 1
    assert p.seed_used == seed(1)


def test_verify_rejects_wrong_key_or_seed(keys):
    p = vrf_prove(keys.sk, seed(2))
    other = vrf_keygen(12, 512)
    assert not vrf_verify(other.pk, seed(2), p)
    assert not vrf_verify(keys.pk, seed(3), p)
    assert not vrf_verify(keys.pk, seed(3), replace(p, seed_used=seed(3)))


def test_every_single_bit_flip_of_the_proof_is_rejected(keys):
    p = vrf_prove(keys.sk, seed(4))
    for i in range(len(p.proof) * 8):
        raw = bytearray(p.proof)
        raw[i // 8] ^= 1 << (i % 8)
        assert not vrf_verify(keys.pk, seed(4), replace(p, proof=bytes(raw)))
    for i in range(256):
        out = bytearray(p.output)
        out[i // 8] ^= 1 << (i % 8)
        assert not vrf_verify(keys.pk, seed(4), replace(p, output=bytes(out)))


def test_verify_never_raises_on_garbage(keys):
    assert not vrf_verify(keys.pk, seed(5), VrfProof(b"", b"", seed(5)))
    assert not vrf_verify(keys.pk, seed(5), VrfProof(b"x", b"\xff" * 64, seed(5)))
    assert not vrf_verify(keys.pk, seed(5), None)  # type: ignore[arg-type]
