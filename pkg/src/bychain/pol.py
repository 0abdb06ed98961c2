"""Two-stage proof-of-location protocol.

Stage 1 builds the request a prover broadcasts, the witness response, the
combined commitment that goes on-chain, and the prover's private note.
Stage 2 is the verifier's challenge/response ownership check and the activity
summary.

The location field covered by signatures is a ciphertext: the prover encrypts
its fixed-point location under a one-use key derived from the request's
private key and nonce.  Over the air the request also carries a disclosure
(plaintext location and that key) so a witness can run its distance check and
confirm the ciphertext; the disclosure never reaches the chain.  The prover
reveals the key again when proving ownership, which is what lets the verifier
print the location in the summary.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import crypto
from .codec import DecodeError, Reader, Writer
from .crypto import PUBKEY_SIZE, SIGNATURE_SIZE, KeyEscrow, KeyPair
from .geo import LOCATION_SIZE, Location, distance_m

log = logging.getLogger(__name__)

SERVICE_UUID = bytes.fromhex("6279636861696e2d706f6c2d76310000")
NONCE_SIZE = 32
COUNTER_SIZE = 8
WITNESS_NONCE_SIZE = PUBKEY_SIZE + COUNTER_SIZE
LOCATION_KEY_SIZE = 32
CHALLENGE_SIZE = 32

MAX_REQUEST_BYTES = 320
MAX_RESPONSE_BYTES = 540
MAX_COMMITMENT_BYTES = 9 * 1024
COLLECTION_WINDOW_MS = 1000

DISTANCE_SLACK = 0.2
FRESHNESS_S = 10

TAG_REQUEST = 0x01
TAG_RESPONSE = 0x02
TAG_COMMITMENT = 0x03

_CORE_SIZE = PUBKEY_SIZE + NONCE_SIZE + LOCATION_SIZE + 8


class NoWitnessError(ValueError):
    """A commitment needs at least one witness response."""


class CommitmentMismatch(ValueError):
    pass


class CommitmentNotFound(LookupError):
    pass


def location_key(private_key: bytes, nonce_p: bytes) -> bytes:
    return hmac.new(bytes(private_key), b"bychain/location" + nonce_p, hashlib.sha256).digest()


def _keystream(key: bytes) -> bytes:
    return hashlib.sha256(b"bychain/location-stream" + key).digest()[:LOCATION_SIZE]


def encrypt_location(loc: Location, key: bytes) -> bytes:
    return bytes(a ^ b for a, b in zip(loc.to_bytes(), _keystream(key)))


def decrypt_location(ciphertext: bytes, key: bytes) -> Location:
    return Location.from_bytes(bytes(a ^ b for a, b in zip(ciphertext, _keystream(key))))


@dataclass(frozen=True)
class Disclosure:
    """Wire-only plaintext handed to nearby witnesses."""

    location: Location
    key: bytes


@dataclass(frozen=True)
class PoLRequest:
    pk: bytes
    nonce_p: bytes
    location_ct: bytes
    timestamp: int
    sig: bytes
    disclosure: Disclosure | None = field(default=None, compare=False)

    def core(self) -> bytes:
        """The signed payload ``pk || nonce_p || location || timestamp``."""
        return (Writer().raw(self.pk, PUBKEY_SIZE).raw(self.nonce_p, NONCE_SIZE)
                .raw(self.location_ct, LOCATION_SIZE).u64(self.timestamp).getvalue())

    def signed_fields(self) -> bytes:
        return self.core() + self.sig

    def stripped(self) -> "PoLRequest":
        return PoLRequest(self.pk, self.nonce_p, self.location_ct, self.timestamp, self.sig)

    def signature_valid(self) -> bool:
        return crypto.verify(self.pk, self.core(), self.sig)

    def to_bytes(self) -> bytes:
        w = Writer().raw(SERVICE_UUID).u8(TAG_REQUEST).raw(self.core()).raw(self.sig, SIGNATURE_SIZE)
        if self.disclosure is None:
            w.u8(0)
        else:
            w.u8(1).raw(self.disclosure.location.to_bytes()).raw(self.disclosure.key, LOCATION_KEY_SIZE)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PoLRequest":
        r = Reader(data)
        if r.raw(len(SERVICE_UUID)) != SERVICE_UUID or r.u8() != TAG_REQUEST:
            raise DecodeError("not a PoL request")
        req = _read_request_fields(r)
        disclosure = None
        if r.u8():
            disclosure = Disclosure(Location.from_bytes(r.raw(LOCATION_SIZE)), r.raw(LOCATION_KEY_SIZE))
        r.done()
        return PoLRequest(req.pk, req.nonce_p, req.location_ct, req.timestamp, req.sig, disclosure)


def _read_request_fields(r: Reader) -> PoLRequest:
    return PoLRequest(pk=r.raw(PUBKEY_SIZE), nonce_p=r.raw(NONCE_SIZE),
                      location_ct=r.raw(LOCATION_SIZE), timestamp=r.u64(),
                      sig=r.raw(SIGNATURE_SIZE))


def witness_nonce(pk: bytes, counter: int) -> bytes:
    return Writer().raw(pk, PUBKEY_SIZE).u64(counter).getvalue()


def split_witness_nonce(nonce_w: bytes) -> tuple[bytes, int]:
    if len(nonce_w) != WITNESS_NONCE_SIZE:
        raise DecodeError("witness nonce must be 41 bytes")
    return nonce_w[:PUBKEY_SIZE], int.from_bytes(nonce_w[PUBKEY_SIZE:], "big")


@dataclass(frozen=True)
class PoLResponse:
    request: PoLRequest
    nonce_w: bytes
    sig_w: bytes

    @property
    def witness_pk(self) -> bytes:
        return self.nonce_w[:PUBKEY_SIZE]

    @property
    def counter(self) -> int:
        return split_witness_nonce(self.nonce_w)[1]

    def signed_payload(self) -> bytes:
        return self.request.signed_fields() + self.nonce_w

    def signature_valid(self) -> bool:
        return crypto.verify(self.witness_pk, self.signed_payload(), self.sig_w)

    def to_bytes(self) -> bytes:
        return (Writer().u8(TAG_RESPONSE).raw(self.request.signed_fields())
                .raw(self.nonce_w, WITNESS_NONCE_SIZE).raw(self.sig_w, SIGNATURE_SIZE).getvalue())

    @classmethod
    def read(cls, r: Reader) -> "PoLResponse":
        if r.u8() != TAG_RESPONSE:
            raise DecodeError("not a PoL response")
        req = _read_request_fields(r)
        return cls(req, r.raw(WITNESS_NONCE_SIZE), r.raw(SIGNATURE_SIZE))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PoLResponse":
        r = Reader(data)
        resp = cls.read(r)
        r.done()
        return resp


RESPONSE_SIZE = 1 + _CORE_SIZE + SIGNATURE_SIZE + WITNESS_NONCE_SIZE + SIGNATURE_SIZE


@dataclass(frozen=True)
class PoLCommitment:
    responses: tuple[PoLResponse, ...]

    @property
    def request(self) -> PoLRequest:
        return self.responses[0].request

    @property
    def witness_nonces(self) -> tuple[bytes, ...]:
        return tuple(r.nonce_w for r in self.responses)

    @property
    def trust_level(self) -> int:
        return len(self.responses)

    def index_key(self) -> bytes:
        return index_key(self.witness_nonces)

    def to_bytes(self) -> bytes:
        w = Writer().u8(TAG_COMMITMENT).u16(len(self.responses))
        for resp in self.responses:
            w.raw(resp.to_bytes())
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "PoLCommitment":
        if r.u8() != TAG_COMMITMENT:
            raise DecodeError("not a PoL commitment")
        count = r.u16()
        if count == 0:
            raise DecodeError("empty commitment")
        if count * RESPONSE_SIZE > r.remaining:
            raise DecodeError("truncated commitment")
        return cls(tuple(PoLResponse.read(r) for _ in range(count)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PoLCommitment":
        r = Reader(data)
        com = cls.read(r)
        r.done()
        return com


def index_key(witness_nonces: Sequence[bytes]) -> bytes:
    """On-chain lookup key: hash of the nonces concatenated in wire order."""
    return crypto.hash(b"".join(witness_nonces))


def check_commitment(com: PoLCommitment, max_bytes: int = MAX_COMMITMENT_BYTES) -> str | None:
    """Structural and cryptographic checks; returns a reason string or None."""
    if not com.responses:
        return "empty"
    if len(com.to_bytes()) > max_bytes:
        return "oversize"
    first = com.request.signed_fields()
    if any(r.request.signed_fields() != first for r in com.responses):
        return "mixed-requests"
    pks = [r.witness_pk for r in com.responses]
    if len(set(pks)) != len(pks):
        return "duplicate-witness"
    if not com.request.signature_valid():
        return "bad-request-sig"
    if not all(r.signature_valid() for r in com.responses):
        return "bad-witness-sig"
    return None


@dataclass(frozen=True)
class PartialNote:
    keys: KeyPair = field(repr=False)
    nonce_p: bytes
    timestamp: int
    location: Location
    location_key: bytes = field(repr=False)


@dataclass(frozen=True)
class PoLNote:
    """Prover-local secret identifying one on-chain commitment; never serialised."""

    sk: bytes = field(repr=False)
    pk: bytes
    nonce_p: bytes
    timestamp: int
    witness_nonces: tuple[bytes, ...]
    location: Location
    location_key: bytes = field(repr=False)

    def verification_request(self) -> "VerificationRequest":
        return VerificationRequest(self.witness_nonces)


@dataclass(frozen=True)
class VerificationRequest:
    witness_nonces: tuple[bytes, ...]

    def index_key(self) -> bytes:
        return index_key(self.witness_nonces)

    def to_bytes(self) -> bytes:
        w = Writer().u16(len(self.witness_nonces))
        for n in self.witness_nonces:
            w.raw(n, WITNESS_NONCE_SIZE)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "VerificationRequest":
        count = r.u16()
        return cls(tuple(r.raw(WITNESS_NONCE_SIZE) for _ in range(count)))


@dataclass(frozen=True)
class OwnershipProof:
    sig: bytes
    location_key: bytes = field(default=b"", repr=False)


@dataclass(frozen=True)
class SummaryEntry:
    timestamp: int
    location: Location
    trust_level: int
    corroborated: bool | None = None


@dataclass(frozen=True)
class ActivitySummary:
    entries: tuple[SummaryEntry, ...] = ()


def build_pol_request(escrow: KeyEscrow, location: Location, t: int,
                      rng: random.Random) -> tuple[PoLRequest, PartialNote]:
    """Sign a fresh request with the escrow's current key (the key is not consumed yet)."""
    keys = escrow.current()
    nonce_p = rng.randbytes(NONCE_SIZE)
    lkey = location_key(keys.private_key, nonce_p)
    unsigned = PoLRequest(keys.public_key, nonce_p, encrypt_location(location, lkey), t, b"")
    sig = keys.sign(unsigned.core())
    req = PoLRequest(keys.public_key, nonce_p, unsigned.location_ct, t, sig, Disclosure(location, lkey))
    return req, PartialNote(keys, nonce_p, t, location, lkey)


class Verdict(enum.Enum):
    ACCEPT = "accept"
    BAD_SIGNATURE = "bad-signature"
    BAD_DISCLOSURE = "bad-disclosure"
    DISTANCE = "distance"
    STALE = "stale"


def witness_validate(request: PoLRequest, witness_pos: Location, R: float, now: int,
                     slack: float = DISTANCE_SLACK, freshness: float = FRESHNESS_S) -> Verdict:
    if not request.signature_valid():
        return Verdict.BAD_SIGNATURE
    d = request.disclosure
    if d is None or encrypt_location(d.location, d.key) != request.location_ct:
        return Verdict.BAD_DISCLOSURE
    if distance_m(d.location, witness_pos) > R * (1 + slack):
        return Verdict.DISTANCE
    if abs(now - request.timestamp) > freshness:
        return Verdict.STALE
    return Verdict.ACCEPT


@dataclass
class WitnessSigner:
    keys: KeyPair = field(repr=False)
    counter: int = 0

    @property
    def public_key(self) -> bytes:
        return self.keys.public_key


def build_pol_response(request: PoLRequest, witness: WitnessSigner) -> PoLResponse:
    """Counter-sign an accepted request; bumps the witness counter exactly once."""
    witness.counter += 1
    nonce_w = witness_nonce(witness.public_key, witness.counter)
    core = request.stripped()
    sig_w = witness.keys.sign(core.signed_fields() + nonce_w)
    return PoLResponse(core, nonce_w, sig_w)


def combine_responses(responses: Iterable[PoLResponse], window_ms: int = COLLECTION_WINDOW_MS,
                      arrivals_ms: Sequence[float] | None = None,
                      max_bytes: int = MAX_COMMITMENT_BYTES) -> PoLCommitment:
    """Merge the responses collected inside the window, one per witness.

    Responses past the window, repeats from an already counted witness, and
    any that would push the commitment over ``max_bytes`` are dropped.
    """
    responses = list(responses)
    if arrivals_ms is None:
        arrivals_ms = [0.0] * len(responses)
    if len(arrivals_ms) != len(responses):
        raise ValueError("arrivals_ms must align with responses")
    kept: list[PoLResponse] = []
    seen: set[bytes] = set()
    size = 3
    for resp, at in zip(responses, arrivals_ms):
        if at > window_ms or resp.witness_pk in seen:
            continue
        if kept and resp.request.signed_fields() != kept[0].request.signed_fields():
            raise CommitmentMismatch("responses embed different requests")
        if size + RESPONSE_SIZE > max_bytes:
            log.debug("commitment full, dropping response from %s", resp.witness_pk.hex()[:12])
            continue
        kept.append(resp)
        seen.add(resp.witness_pk)
        size += RESPONSE_SIZE
    if not kept:
        raise NoWitnessError("no witness responded inside the collection window")
    return PoLCommitment(tuple(kept))


def finalize_note(partial: PartialNote, commitment: PoLCommitment, escrow: KeyEscrow) -> PoLNote:
    """Record the note for a commitment and rotate the escrow past its key."""
    if commitment.request.pk != partial.keys.public_key or commitment.request.nonce_p != partial.nonce_p:
        raise CommitmentMismatch("commitment does not belong to this request")
    if escrow.current().public_key == partial.keys.public_key:
        escrow.next()
    return PoLNote(sk=partial.keys.private_key, pk=partial.keys.public_key, nonce_p=partial.nonce_p,
                   timestamp=partial.timestamp, witness_nonces=commitment.witness_nonces,
                   location=partial.location, location_key=partial.location_key)


def prove_ownership(note: PoLNote, r: bytes) -> OwnershipProof:
    return OwnershipProof(crypto.sign(note.sk, note.nonce_p + r), note.location_key)


@dataclass
class _Pending:
    r: bytes
    expires: float | None


class Verifier:
    """Ownership-check contract with its table of outstanding challenges.

    A new challenge for a commitment supersedes the previous one, and every
    verification attempt consumes the challenge it names.
    """

    def __init__(self, rng: random.Random, ttl: float | None = 3.0):
        self.rng = rng
        self.ttl = ttl
        self.pending: dict[bytes, _Pending] = {}

    def issue_challenge(self, chain, v: VerificationRequest, now: float | None = None) -> bytes:
        if chain.lookup_commitment(v.witness_nonces) is None:
            raise CommitmentNotFound(v.index_key().hex())
        r = self.rng.randbytes(CHALLENGE_SIZE)
        expires = None if (now is None or self.ttl is None) else now + self.ttl
        self.pending[v.index_key()] = _Pending(r, expires)
        return r

    def verify_ownership(self, chain, v: VerificationRequest, r: bytes, proof: OwnershipProof,
                         now: float | None = None) -> bool:
        pending = self.pending.pop(v.index_key(), None)
        if pending is None or not hmac.compare_digest(pending.r, r):
            return False
        if pending.expires is not None and now is not None and now > pending.expires:
            return False
        loc = chain.lookup_commitment(v.witness_nonces)
        if loc is None:
            return False
        req = loc.commitment.request
        if not crypto.verify(req.pk, req.nonce_p + pending.r, proof.sig):
            return False
        return crypto.verify(req.pk, req.core(), req.sig)


def issue_challenge(verifier: Verifier, chain, v: VerificationRequest, now: float | None = None) -> bytes:
    return verifier.issue_challenge(chain, v, now)


def verify_ownership(verifier: Verifier, chain, v: VerificationRequest, r: bytes,
                     proof: OwnershipProof, now: float | None = None) -> bool:
    return verifier.verify_ownership(chain, v, r, proof, now)


def reveal_location(commitment: PoLCommitment, key: bytes) -> Location:
    return decrypt_location(commitment.request.location_ct, key)


def corroborate(commitment: PoLCommitment, location: Location,
                witness_positions: Mapping[bytes, Location], radius_m: float,
                slack: float = DISTANCE_SLACK) -> tuple[int, int, bool]:
    """Majority check of a claim against the witnesses known to be nearby.

    ``expected`` is every witness whose last reported position lies within
    range of the claimed location; the claim holds when more than half of them
    signed.  Returns ``(expected, signed, holds)``.
    """
    reach = radius_m * (1 + slack)
    expected = {pk for pk, pos in witness_positions.items() if distance_m(pos, location) <= reach}
    signers = {r.witness_pk for r in commitment.responses}
    agreeing = len(expected & signers)
    return len(expected), agreeing, bool(expected) and agreeing * 2 > len(expected)


def generate_summary(verified: Iterable[tuple[PoLCommitment, Location]],
                     corroboration: Mapping[bytes, bool] | None = None) -> ActivitySummary:
    """Timestamp-ordered activity entries; trust is the commitment's witness count."""
    entries = []
    for com, loc in verified:
        flag = None if corroboration is None else corroboration.get(com.index_key())
        entries.append(SummaryEntry(com.request.timestamp, loc, com.trust_level, flag))
    entries.sort(key=lambda e: (e.timestamp, e.location))
    return ActivitySummary(tuple(entries))
