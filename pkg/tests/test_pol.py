import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from bychain import crypto, pol
from bychain.codec import DecodeError
from bychain.geo import Location, distance_m
from bychain.pol import Verdict

from builders import CONFIG, FRAME, World


@pytest.fixture
def world():
    return World.make(seed=1)


def request(world, xy=(500.0, 500.0), t=None):
    t = CONFIG.slot_time(1) if t is None else t
    return pol.build_pol_request(world.escrow, FRAME.to_location(*xy), t, world.rng)


class TestRequest:
    def test_roundtrip_and_size(self, world):
        req, _ = request(world)
        wire = req.to_bytes()
        assert len(wire) <= pol.MAX_REQUEST_BYTES
        back = pol.PoLRequest.from_bytes(wire)
        assert back == req and back.disclosure == req.disclosure

    def test_signature_covers_core(self, world):
        req, partial = request(world)
        assert req.signature_valid()
        assert crypto.verify(partial.keys.public_key, req.core(), req.sig)
        assert not replace(req, timestamp=req.timestamp + 1).signature_valid()

    def test_location_is_encrypted(self, world):
        req, partial = request(world)
        assert req.location_ct != partial.location.to_bytes()
        assert pol.decrypt_location(req.location_ct, partial.location_key) == partial.location

    def test_build_does_not_consume_key(self, world):
        before = world.escrow.cursor
        request(world)
        assert world.escrow.cursor == before

    def test_bad_service_uuid(self, world):
        req, _ = request(world)
        wire = bytearray(req.to_bytes())
        wire[0] ^= 1
        with pytest.raises(DecodeError):
            pol.PoLRequest.from_bytes(bytes(wire))


class TestWitnessValidate:
    def test_accept_nearby(self, world):
        req, _ = request(world, (500, 500))
        assert pol.witness_validate(req, FRAME.to_location(520, 500), 50, req.timestamp) is Verdict.ACCEPT

    def test_distance_reject(self, world):
        req, _ = request(world, (500, 500))
        far = FRAME.to_location(500 + 61, 500)  # beyond R * 1.2
        assert pol.witness_validate(req, far, 50, req.timestamp) is Verdict.DISTANCE

    def test_within_slack_accepts(self, world):
        req, _ = request(world, (500, 500))
        edge = FRAME.to_location(500 + 59, 500)
        assert pol.witness_validate(req, edge, 50, req.timestamp) is Verdict.ACCEPT

    def test_stale(self, world):
        req, _ = request(world)
        assert pol.witness_validate(req, FRAME.to_location(500, 500), 50, req.timestamp + 11) is Verdict.STALE

    def test_mismatched_key_signature(self, world):
        req, _ = request(world)
        other = crypto.generate_keypair(random.Random(99))
        forged = replace(req, sig=other.sign(req.core()))
        assert pol.witness_validate(forged, FRAME.to_location(500, 500), 50, req.timestamp) is Verdict.BAD_SIGNATURE

    def test_disclosure_must_match_ciphertext(self, world):
        req, _ = request(world, (500, 500))
        lie = replace(req.disclosure, location=FRAME.to_location(700, 700))
        assert pol.witness_validate(replace(req, disclosure=lie), FRAME.to_location(700, 700), 50,
                                    req.timestamp) is Verdict.BAD_DISCLOSURE


class TestResponse:
    def test_size_and_roundtrip(self, world):
        req, _ = request(world)
        resp = pol.build_pol_response(req, world.witnesses[0])
        wire = resp.to_bytes()
        assert len(wire) == pol.RESPONSE_SIZE <= pol.MAX_RESPONSE_BYTES
        assert pol.PoLResponse.from_bytes(wire) == resp
        assert resp.signature_valid()

    def test_counter_increments_once(self, world):
        w = world.witnesses[0]
        start = w.counter
        req, _ = request(world)
        resp = pol.build_pol_response(req, w)
        assert w.counter == start + 1
        assert resp.counter == w.counter
        assert resp.witness_pk == w.public_key

    def test_request_bytes_copied_verbatim(self, world):
        req, _ = request(world)
        resp = pol.build_pol_response(req, world.witnesses[1])
        assert resp.request.signed_fields() == req.signed_fields()
        assert resp.request.signature_valid()


class TestCombine:
    def test_empty_raises(self):
        with pytest.raises(pol.NoWitnessError):
            pol.combine_responses([])

    def test_window_and_duplicates(self, world):
        req, _ = request(world)
        a = pol.build_pol_response(req, world.witnesses[0])
        b = pol.build_pol_response(req, world.witnesses[1])
        a2 = pol.build_pol_response(req, world.witnesses[0])
        late = pol.build_pol_response(req, world.witnesses[2])
        com = pol.combine_responses([a, b, a2, late], arrivals_ms=[10, 20, 30, 1500])
        assert com.responses == (a, b)
        assert com.trust_level == 2

    def test_mixed_requests_rejected(self, world):
        r1, _ = request(world)
        r2, _ = request(world, (510, 500))
        with pytest.raises(pol.CommitmentMismatch):
            pol.combine_responses([pol.build_pol_response(r1, world.witnesses[0]),
                                   pol.build_pol_response(r2, world.witnesses[1])])

    def test_size_cap_truncates(self):
        w = World.make(seed=2, n_witnesses=40)
        req, _ = request(w)
        com = pol.combine_responses([pol.build_pol_response(req, x) for x in w.witnesses])
        assert len(com.to_bytes()) <= pol.MAX_COMMITMENT_BYTES
        assert com.trust_level == (pol.MAX_COMMITMENT_BYTES - 3) // pol.RESPONSE_SIZE

    def test_commitment_roundtrip(self, world):
        com, _, _ = world.commitment()
        assert pol.PoLCommitment.from_bytes(com.to_bytes()) == com
        assert pol.check_commitment(com) is None

    def test_single_witness_size(self):
        w = World.make(seed=3, n_witnesses=1)
        com, _, _ = w.commitment()
        assert len(com.to_bytes()) == 3 + pol.RESPONSE_SIZE


class TestStage2:
    def test_finalize_advances_escrow(self, world):
        before = world.escrow.cursor
        com, keys, note = world.commitment()
        assert world.escrow.cursor == before + 1
        assert note.pk == keys.public_key == com.request.pk
        assert note.witness_nonces == com.witness_nonces

    def test_finalize_wrong_commitment(self, world):
        com, _, _ = world.commitment()
        _, partial = request(world)
        with pytest.raises(pol.CommitmentMismatch):
            pol.finalize_note(partial, com, world.escrow)

    def test_index_key_order_sensitive(self, world):
        com, _, _ = world.commitment()
        nonces = list(com.witness_nonces)
        assert pol.index_key(nonces) != pol.index_key(nonces[::-1])

    def _chain(self, com):
        class Chain:
            def lookup_commitment(self, nonces):
                if pol.index_key(nonces) == com.index_key():
                    return type("Loc", (), {"commitment": com})()
                return None
        return Chain()

    def test_challenge_response(self, world):
        com, _, note = world.commitment()
        chain = self._chain(com)
        verifier = pol.Verifier(random.Random(0))
        v = note.verification_request()
        r = verifier.issue_challenge(chain, v, now=0.0)
        proof = pol.prove_ownership(note, r)
        assert verifier.verify_ownership(chain, v, r, proof, now=1.0)
        assert pol.reveal_location(com, proof.location_key) == note.location
        # The challenge is consumed.
        assert not verifier.verify_ownership(chain, v, r, proof, now=1.0)

    def test_challenge_expires(self, world):
        com, _, note = world.commitment()
        chain = self._chain(com)
        verifier = pol.Verifier(random.Random(0), ttl=3.0)
        v = note.verification_request()
        r = verifier.issue_challenge(chain, v, now=0.0)
        assert not verifier.verify_ownership(chain, v, r, pol.prove_ownership(note, r), now=3.5)

    def test_new_challenge_supersedes(self, world):
        com, _, note = world.commitment()
        chain = self._chain(com)
        verifier = pol.Verifier(random.Random(0))
        v = note.verification_request()
        r1 = verifier.issue_challenge(chain, v)
        r2 = verifier.issue_challenge(chain, v)
        assert not verifier.verify_ownership(chain, v, r1, pol.prove_ownership(note, r1))
        r3 = verifier.issue_challenge(chain, v)
        assert verifier.verify_ownership(chain, v, r3, pol.prove_ownership(note, r3))
        assert r2 != r3

    def test_unknown_commitment(self, world):
        com, _, _ = world.commitment()
        verifier = pol.Verifier(random.Random(0))
        with pytest.raises(pol.CommitmentNotFound):
            verifier.issue_challenge(self._chain(com), pol.VerificationRequest((b"\x00" * 41,)))

    def test_wrong_key_rejected(self, world):
        com, _, note = world.commitment()
        chain = self._chain(com)
        verifier = pol.Verifier(random.Random(0))
        v = note.verification_request()
        r = verifier.issue_challenge(chain, v)
        imposter = crypto.generate_keypair(random.Random(5))
        assert not verifier.verify_ownership(chain, v, r, pol.OwnershipProof(imposter.sign(note.nonce_p + r)))


class TestCorroborateAndSummary:
    def test_majority_rule(self):
        w = World.make(seed=4, n_witnesses=5)
        com, _, note = w.commitment(witnesses=w.witnesses[:3])
        positions = {x.public_key: FRAME.to_location(500 + 5 * i, 500) for i, x in enumerate(w.witnesses)}
        expected, signed, holds = pol.corroborate(com, note.location, positions, 50.0)
        assert (expected, signed, holds) == (5, 3, True)
        com2, _, note2 = w.commitment(witnesses=w.witnesses[:2])
        assert pol.corroborate(com2, note2.location, positions, 50.0) == (5, 2, False)

    def test_no_expected_witnesses_fails(self, world):
        com, _, note = world.commitment()
        assert pol.corroborate(com, note.location, {}, 50.0) == (0, 0, False)

    def test_summary_sorted_with_trust(self):
        w = World.make(seed=5)
        c1, _, n1 = w.commitment(t=CONFIG.slot_time(5))
        c2, _, n2 = w.commitment(t=CONFIG.slot_time(2), witnesses=w.witnesses[:1])
        summary = pol.generate_summary([(c1, n1.location), (c2, n2.location)], {c1.index_key(): True})
        assert [e.timestamp for e in summary.entries] == [c2.request.timestamp, c1.request.timestamp]
        assert [e.trust_level for e in summary.entries] == [1, 3]
        assert summary.entries[1].corroborated is True and summary.entries[0].corroborated is None


@settings(max_examples=30, deadline=None)
@given(lat=st.floats(-89.9, 89.9), lon=st.floats(-179.9, 179.9), key=st.binary(min_size=32, max_size=32))
def test_location_cipher_roundtrip(lat, lon, key):
    loc = Location.from_degrees(lat, lon)
    assert pol.decrypt_location(pol.encrypt_location(loc, key), key) == loc


def test_local_frame_distance_consistent():
    a, b = FRAME.to_location(100, 100), FRAME.to_location(130, 140)
    assert distance_m(a, b) == pytest.approx(50.0, abs=0.05)
