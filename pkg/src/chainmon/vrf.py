"""RSA full-domain-hash verifiable random function.

Follows the RSA-FDH-VRF construction (MGF1 over SHA-256, output is SHA-256 of
the proof) at desk-scale modulus sizes.  Keys are derived deterministically
from an integer seed so simulation runs are replayable.  This is NOT a
production-secure VRF: keys are small and the prime generator is seeded by a
non-cryptographic RNG.  Anything honouring ``vrf_prove``/``vrf_verify`` can
replace it.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from functools import lru_cache

import gmpy2

SUITE = b"\x01"
PUBLIC_EXPONENT = 65537
DEFAULT_BITS = 1024


@dataclass(frozen=True)
class VrfPublicKey:
    n: int
    e: int = PUBLIC_EXPONENT

    @property
    def k(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def to_bytes(self) -> bytes:
        return self.n.to_bytes(self.k, "big") + self.e.to_bytes(4, "big")


@dataclass(frozen=True)
class VrfSecretKey:
    n: int
    d: int
    p: int
    q: int

    @property
    def k(self) -> int:
        return (self.n.bit_length() + 7) // 8


@dataclass(frozen=True)
class VrfKeyPair:
    sk: VrfSecretKey
    pk: VrfPublicKey


@dataclass(frozen=True)
class VrfProof:
    output: bytes  # 32 bytes, SHA-256 of the proof
    proof: bytes
    seed_used: bytes  # 32 bytes

    @property
    def unit_value(self) -> float:
        """Output read as a number in [0, 1)."""
        return int.from_bytes(self.output, "big") / 2**256


def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return bytes(out[:length])


def _encode(pk_n: int, k: int, alpha: bytes) -> int:
    mgf_seed = SUITE + b"\x01" + k.to_bytes(4, "big") + pk_n.to_bytes(k, "big") + alpha
    return int.from_bytes(_mgf1(mgf_seed, k - 1), "big")


def proof_to_output(proof: bytes) -> bytes:
    return hashlib.sha256(SUITE + b"\x02" + proof).digest()


def _prime(rng: random.Random, bits: int) -> int:
    while True:
        # top two bits set so the product has exactly 2*bits bits
        cand = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits and gmpy2.gcd(p - 1, PUBLIC_EXPONENT) == 1:
            return p


def vrf_keygen(rng_seed: int | bytes | str, bits: int = DEFAULT_BITS) -> VrfKeyPair:
    if bits < 128 or bits % 16:
        raise ValueError(f"modulus size must be a multiple of 16 and >= 128, got {bits}")
    rng = random.Random(hashlib.sha256(b"vrf-keygen:" + repr(rng_seed).encode()).digest())
    while True:
        p = _prime(rng, bits // 2)
        q = _prime(rng, bits // 2)
        if p != q:
            break
    n = p * q
    d = int(gmpy2.invert(PUBLIC_EXPONENT, (p - 1) * (q - 1)))
    return VrfKeyPair(VrfSecretKey(n, d, p, q), VrfPublicKey(n))


def vrf_prove(sk: VrfSecretKey, seed: bytes) -> VrfProof:
    m = _encode(sk.n, sk.k, seed)
    # CRT
    p, q = gmpy2.mpz(sk.p), gmpy2.mpz(sk.q)
    sp = gmpy2.powmod(m, sk.d % (sk.p - 1), p)
    sq = gmpy2.powmod(m, sk.d % (sk.q - 1), q)
    h = (gmpy2.invert(q, p) * (sp - sq)) % p
    s = int(sq + h * q)
    proof = s.to_bytes(sk.k, "big")
    return VrfProof(proof_to_output(proof), proof, bytes(seed))


def vrf_verify(pk: VrfPublicKey, seed: bytes, proof: VrfProof) -> bool:
    try:
        if proof.seed_used != seed:
            return False
        return _verify(pk.n, pk.e, bytes(seed), bytes(proof.proof), bytes(proof.output))
    except (TypeError, ValueError, AttributeError):
        return False


@lru_cache(maxsize=1 << 16)
def _verify(n: int, e: int, seed: bytes, proof: bytes, output: bytes) -> bool:
    # pure in its arguments, so memoising is safe; every peer checks the same announcement
    k = (n.bit_length() + 7) // 8
    if len(proof) != k:
        return False
    s = int.from_bytes(proof, "big")
    if s >= n:
        return False
    if int(gmpy2.powmod(s, e, n)) != _encode(n, k, seed):
        return False
    return output == proof_to_output(proof)
