"""Additively homomorphic encryption over fixed-point-encoded reals.

A Paillier-style composite-modulus scheme: ciphertexts can be added
together and multiplied by plaintext integers, which is exactly what the
masked-averaging protocol needs.  Plaintexts are signed integers in the
centered residue range (-M/2, M/2) where M is the public modulus.
"""
from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import gmpy2


class HEError(Exception):
    pass


class Overflow(HEError):
    pass


class WrongKey(HEError):
    pass


class KeyMismatch(HEError):
    pass


class ScaleMismatch(HEError):
    pass


class LengthMismatch(HEError):
    pass


class _SystemRng:
    def getrandbits(self, k: int) -> int:
        return secrets.randbits(k)

    def randrange(self, a: int, b: int) -> int:
        return a + secrets.randbelow(b - a)


@dataclass(frozen=True)
class PublicKey:
    n: int
    fingerprint: bytes

    @property
    def n_sq(self) -> int:
        return self.n * self.n


@dataclass(frozen=True)
class SecretKey:
    lam: int
    mu: int
    public: PublicKey


@dataclass(frozen=True)
class HEKeyPair:
    pk: PublicKey
    sk: SecretKey

    @property
    def capacity(self) -> int:
        """Plaintext modulus M; signed plaintexts live in (-M/2, M/2)."""
        return self.pk.n


@dataclass(frozen=True)
class HECiphertext:
    values: tuple[int, ...]
    fraction_bits: int
    fingerprint: bytes

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class FixedPointCfg:
    fraction_bits: int = 32

    def check_capacity(self, capacity: int, z_max: int, n_max: int, w_max: float) -> None:
        """Reject configurations where the protocol's worst-case masked sum
        could wrap the plaintext modulus."""
        worst = z_max * n_max * (int(w_max * 2 ** self.fraction_bits) + 1)
        if worst >= capacity // 2:
            raise Overflow(
                f"fixed-point headroom exhausted: worst case {worst} >= M/2"
            )


def _gen_prime(bits: int, rng) -> int:
    candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
    return int(gmpy2.next_prime(candidate))


def he_keygen(security_param: int = 2048, rng=None) -> HEKeyPair:
    """Generate a fresh keypair; security_param is the modulus bit size.

    Passing a seeded rng gives reproducible keys for tests; the default
    draws from the system entropy source.
    """
    if security_param < 1024:
        raise ValueError("security_param must be >= 1024 bits")
    rng = rng or _SystemRng()
    half = security_param // 2
    while True:
        p = _gen_prime(half, rng)
        q = _gen_prime(security_param - half, rng)
        if p != q:
            break
    n = p * q
    lam = (p - 1) * (q - 1)
    mu = int(gmpy2.invert(lam, n))
    fingerprint = hashlib.sha256(n.to_bytes((n.bit_length() + 7) // 8, "big")).digest()[:8]
    pk = PublicKey(n=n, fingerprint=fingerprint)
    return HEKeyPair(pk=pk, sk=SecretKey(lam=lam, mu=mu, public=pk))


def encode_fixed(r: float, fraction_bits: int, max_magnitude: Optional[int] = None) -> int:
    """round(r * 2^f), round-half-to-even.  Scaling by a power of two is an
    exact float operation, so the result is within 2^{-f-1} of r."""
    scaled = r * (2.0 ** fraction_bits)
    if scaled != scaled or scaled in (float("inf"), float("-inf")):
        raise Overflow(f"cannot encode {r!r}")
    value = round(scaled)
    if max_magnitude is not None and abs(value) >= max_magnitude:
        raise Overflow(f"encoded value {value} exceeds capacity {max_magnitude}")
    return value


def decode_fixed(i: int, fraction_bits: int) -> float:
    return i / 2 ** fraction_bits


def _encrypt_raw(m: int, pk: PublicKey, rng) -> int:
    n, n_sq = pk.n, pk.n_sq
    mm = m % n
    while True:
        r = rng.randrange(1, n)
        if gmpy2.gcd(r, n) == 1:
            break
    return int((1 + mm * n) * gmpy2.powmod(r, n, n_sq) % n_sq)


def _decrypt_raw(c: int, sk: SecretKey) -> int:
    n, n_sq = sk.public.n, sk.public.n_sq
    u = int(gmpy2.powmod(c, sk.lam, n_sq))
    mm = ((u - 1) // n) * sk.mu % n
    return mm - n if mm > n // 2 else mm


def henc(m: int, pk: PublicKey, fraction_bits: int = 0, rng=None) -> HECiphertext:
    """Encrypt one signed integer."""
    if abs(m) >= pk.n // 2:
        raise Overflow(f"plaintext magnitude {abs(m)} >= M/2")
    rng = rng or _SystemRng()
    return HECiphertext((_encrypt_raw(m, pk, rng),), fraction_bits, pk.fingerprint)


def hdecrypt(ct: HECiphertext, sk: SecretKey) -> int:
    """Decrypt a scalar ciphertext to its centered signed plaintext."""
    if ct.fingerprint != sk.public.fingerprint:
        raise WrongKey("ciphertext was produced under a different public key")
    if len(ct) != 1:
        raise LengthMismatch(f"expected scalar ciphertext, got {len(ct)} coordinates")
    return _decrypt_raw(ct.values[0], sk)


def henc_vector(ms: Sequence[int], pk: PublicKey, fraction_bits: int = 0, rng=None) -> HECiphertext:
    rng = rng or _SystemRng()
    half = pk.n // 2
    out = []
    for m in ms:
        if abs(m) >= half:
            raise Overflow(f"plaintext magnitude {abs(m)} >= M/2")
        out.append(_encrypt_raw(m, pk, rng))
    return HECiphertext(tuple(out), fraction_bits, pk.fingerprint)


def hdecrypt_vector(ct: HECiphertext, sk: SecretKey) -> list[int]:
    if ct.fingerprint != sk.public.fingerprint:
        raise WrongKey("ciphertext was produced under a different public key")
    return [_decrypt_raw(c, sk) for c in ct.values]


def _check_compatible(a: HECiphertext, b: HECiphertext) -> None:
    if a.fingerprint != b.fingerprint:
        raise KeyMismatch("ciphertexts under different public keys")
    if a.fraction_bits != b.fraction_bits:
        raise ScaleMismatch(f"scales differ: {a.fraction_bits} vs {b.fraction_bits}")
    if len(a) != len(b):
        raise LengthMismatch(f"lengths differ: {len(a)} vs {len(b)}")


def ct_add(a: HECiphertext, b: HECiphertext, pk: PublicKey) -> HECiphertext:
    """Homomorphic addition: Dec(a ⊞ b) = m_a + m_b."""
    _check_compatible(a, b)
    if pk.fingerprint != a.fingerprint:
        raise KeyMismatch("public key does not match ciphertexts")
    n_sq = pk.n_sq
    values = tuple(int(x * y % n_sq) for x, y in zip(a.values, b.values))
    return HECiphertext(values, a.fraction_bits, a.fingerprint)


def ct_scalar_mul(ct: HECiphertext, k: int, pk: PublicKey) -> HECiphertext:
    """Plaintext multiplication: Dec(k ⊡ ct) = k * m."""
    if pk.fingerprint != ct.fingerprint:
        raise KeyMismatch("public key does not match ciphertext")
    n, n_sq = pk.n, pk.n_sq
    values = tuple(int(gmpy2.powmod(c, k % n, n_sq)) for c in ct.values)
    return HECiphertext(values, ct.fraction_bits, ct.fingerprint)


def ct_broadcast_mul(scalar_ct: HECiphertext, ks: Sequence[int], pk: PublicKey,
                     fraction_bits: Optional[int] = None) -> HECiphertext:
    """Multiply one scalar ciphertext by each plaintext in ks, yielding a
    vector ciphertext of (k_0*m, ..., k_{L-1}*m)."""
    if len(scalar_ct) != 1:
        raise LengthMismatch("broadcast source must be a scalar ciphertext")
    if pk.fingerprint != scalar_ct.fingerprint:
        raise KeyMismatch("public key does not match ciphertext")
    n, n_sq = pk.n, pk.n_sq
    c = scalar_ct.values[0]
    values = tuple(int(gmpy2.powmod(c, k % n, n_sq)) for k in ks)
    f = scalar_ct.fraction_bits if fraction_bits is None else fraction_bits
    return HECiphertext(values, f, scalar_ct.fingerprint)


_MAGIC = b"hev1"


def serialize_ciphertext(ct: HECiphertext) -> bytes:
    out = bytearray(_MAGIC)
    out += ct.fingerprint
    out += struct.pack(">B", ct.fraction_bits)
    out += struct.pack(">I", len(ct.values))
    for c in ct.values:
        blob = c.to_bytes((c.bit_length() + 7) // 8 or 1, "big")
        out += struct.pack(">I", len(blob))
        out += blob
    return bytes(out)


def deserialize_ciphertext(data: bytes) -> HECiphertext:
    if data[:4] != _MAGIC:
        raise HEError("bad ciphertext magic")
    fingerprint = data[4:12]
    fraction_bits = data[12]
    (count,) = struct.unpack_from(">I", data, 13)
    pos = 17
    values = []
    for _ in range(count):
        (length,) = struct.unpack_from(">I", data, pos)
        pos += 4
        values.append(int.from_bytes(data[pos:pos + length], "big"))
        pos += length
    if pos != len(data):
        raise HEError("trailing bytes in ciphertext encoding")
    return HECiphertext(tuple(values), fraction_bits, fingerprint)
