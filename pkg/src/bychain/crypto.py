"""Keys, signatures, hashing and the prover-side key escrow.

All signatures are ECDSA over secp256k1 with SHA-256 and RFC 6979 nonces, so a
given key signs a given message to the same bytes on every platform.  Wire
encodings are fixed width: 33-byte compressed public keys and 64-byte ``r||s``
signatures with low ``s``.
"""
from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

CURVE_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
PUBKEY_SIZE = 33
SIGNATURE_SIZE = 64
PRIVKEY_SIZE = 32
DIGEST_SIZE = 32
ADDRESS_SIZE = 20
DEFAULT_POOL_SIZE = 128

_CURVE = ec.SECP256K1()
_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)


class CorruptKeyError(ValueError):
    """A private key could not be loaded; the escrow holding it is damaged."""


class EscrowExhausted(RuntimeError):
    pass


def hash(data: bytes) -> bytes:  # noqa: A001 - protocol name
    return hashlib.sha256(data).digest()


def address(public_key: bytes) -> bytes:
    """20-byte account address: truncated SHA-256 of SHA-256(public key)."""
    return hash(hash(public_key))[:ADDRESS_SIZE]


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes = field(repr=False)
    public_key: bytes

    @classmethod
    def from_secret(cls, secret: int) -> "KeyPair":
        if not 0 < secret < CURVE_ORDER:
            raise CorruptKeyError("private scalar out of range")
        sk = ec.derive_private_key(secret, _CURVE)
        pk = sk.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
        )
        return cls(secret.to_bytes(PRIVKEY_SIZE, "big"), pk)

    @property
    def address(self) -> bytes:
        return address(self.public_key)

    def sign(self, message: bytes) -> bytes:
        """Like :func:`sign`, reusing the loaded key across calls."""
        handle = self.__dict__.get("_handle")
        if handle is None:
            handle = _signing_key(self.private_key)
            object.__setattr__(self, "_handle", handle)
        return _sign_with(handle, message)


def generate_keypair(rng: random.Random) -> KeyPair:
    return KeyPair.from_secret(rng.randrange(1, CURVE_ORDER))


def _signing_key(private_key: bytes) -> ec.EllipticCurvePrivateKey:
    if len(private_key) != PRIVKEY_SIZE:
        raise CorruptKeyError("private key must be 32 bytes")
    secret = int.from_bytes(private_key, "big")
    if not 0 < secret < CURVE_ORDER:
        raise CorruptKeyError("private scalar out of range")
    return ec.derive_private_key(secret, _CURVE)


@lru_cache(maxsize=8192)
def _verifying_key(public_key: bytes) -> ec.EllipticCurvePublicKey | None:
    if len(public_key) != PUBKEY_SIZE:
        return None
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, public_key)
    except ValueError:
        return None


def sign(private_key: bytes, message: bytes) -> bytes:
    """Sign SHA-256(message); returns 64-byte ``r||s`` with ``s <= n/2``."""
    return _sign_with(_signing_key(bytes(private_key)), message)


def _sign_with(key: ec.EllipticCurvePrivateKey, message: bytes) -> bytes:
    der = key.sign(bytes(message), _ECDSA)
    r, s = decode_dss_signature(der)
    if s > CURVE_ORDER // 2:
        s = CURVE_ORDER - s
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid low-s signature of SHA-256(message).

    Never raises: malformed keys or signatures simply fail.
    """
    if not isinstance(signature, (bytes, bytearray)) or len(signature) != SIGNATURE_SIZE:
        return False
    return _verify(bytes(public_key), bytes(message), bytes(signature))


@lru_cache(maxsize=1 << 16)
def _verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    # Pure in its arguments, so results are memoised; nodes re-check the same transactions.
    key = _verifying_key(public_key)
    if key is None:
        return False
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:], "big")
    if not (0 < r < CURVE_ORDER and 0 < s <= CURVE_ORDER // 2):
        return False
    try:
        key.verify(encode_dss_signature(r, s), message, _ECDSA)
    except InvalidSignature:
        return False
    return True


def _derive_secret(seed: bytes, index: int) -> int:
    counter = 0
    while True:
        mac = hmac.new(seed, b"bychain/escrow" + struct.pack(">QI", index, counter), hashlib.sha256)
        secret = int.from_bytes(mac.digest(), "big")
        if 0 < secret < CURVE_ORDER:
            return secret
        counter += 1


class KeyEscrow:
    """Master key plus an ordered pool of one-use key pairs.

    Pool entries are derived from the master secret with a keyed hash, so the
    pool can be extended on demand.  An escrow built from an explicit pool and
    no master seed is finite.  The cursor is not locked; callers serialise
    access.
    """

    def __init__(self, master_key: KeyPair | None, pool: list[KeyPair] | None = None,
                 pool_size: int = DEFAULT_POOL_SIZE):
        self.master_key = master_key
        self._seed = master_key.private_key if master_key is not None else None
        self.cursor = 0
        self._public: list[bytes] = []
        self._secret: list[bytearray] = []
        if pool is not None:
            for kp in pool:
                self._append(kp)
        elif self._seed is not None:
            self._extend(pool_size)
        if len(set(self._public)) != len(self._public):
            raise ValueError("escrow pool contains duplicate public keys")

    @classmethod
    def generate(cls, rng: random.Random, pool_size: int = DEFAULT_POOL_SIZE) -> "KeyEscrow":
        return cls(generate_keypair(rng), pool_size=pool_size)

    def _append(self, kp: KeyPair):
        self._public.append(kp.public_key)
        self._secret.append(bytearray(kp.private_key))

    def _extend(self, count: int):
        start = len(self._public)
        for i in range(start, start + count):
            self._append(KeyPair.from_secret(_derive_secret(self._seed, i)))

    def __len__(self) -> int:
        return len(self._public)

    @property
    def public_keys(self) -> list[bytes]:
        return list(self._public)

    def _ensure(self):
        if self.cursor < len(self._public):
            return
        if self._seed is None:
            raise EscrowExhausted(f"all {len(self._public)} escrow keys used")
        self._extend(max(len(self._public), 1))

    def current(self) -> KeyPair:
        """The next unused pair, without consuming it."""
        self._ensure()
        return KeyPair(bytes(self._secret[self.cursor]), self._public[self.cursor])

    def next(self) -> KeyPair:
        """Return the current pair and advance; the escrow's copy of the secret is wiped."""
        kp = self.current()
        secret = self._secret[self.cursor]
        secret[:] = bytes(len(secret))
        self.cursor += 1
        return kp


def escrow_next(escrow: KeyEscrow) -> KeyPair:
    return escrow.next()
