"""Scripted attacks against a live simulation.

Each action runs against the state of a finished (or paused) run and reports
how many attempts the protocol checks rejected.  Actions never mutate the
honest nodes' chains or mempools; block-level attempts are validated, not
appended.
"""
from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .. import crypto, pol
from ..codec import DecodeError
from ..crypto import CURVE_ORDER, KeyEscrow
from ..field import net_forces, allocate_incentive, EpochBudget
from ..geo import Location
from ..ledger import (
    Block,
    BlockStatus,
    ChainConfig,
    ChainStore,
    InvalidChain,
    Mempool,
    PoLCommitmentOp,
    Transaction,
    TxStatus,
    WitnessReportOp,
    assemble_block,
    export_chain,
    import_chain,
    merkle_root,
    submit_tx,
)
from .harness import Simulation, sub_rng
from .report import AttackOutcome


@dataclass(frozen=True)
class NoWitnessClaim:
    attempts: int = 100


@dataclass(frozen=True)
class ReplayCommitment:
    attempts: int = 100


@dataclass(frozen=True)
class RelaySignature:
    attempts: int = 100
    offset_m: float = 500.0


@dataclass(frozen=True)
class FalseLocationClaim:
    attempts: int = 20
    offset_m: float = 500.0


@dataclass(frozen=True)
class ForgeWitnessSig:
    attempts: int = 100


@dataclass(frozen=True)
class ColludeWitnesses:
    fraction: float = 0.4
    witnesses: int = 5


@dataclass(frozen=True)
class FalseForceReport:
    multiplier: float = 0.1


@dataclass(frozen=True)
class TamperChain:
    samples: int = 2000
    imports: int = 10


@dataclass(frozen=True)
class ForgeOwnership:
    attempts: int = 10_000


@dataclass(frozen=True)
class LinkProver:
    pass


AdversaryAction = Union[NoWitnessClaim, ReplayCommitment, RelaySignature, FalseLocationClaim,
                        ForgeWitnessSig, ColludeWitnesses, FalseForceReport, TamperChain,
                        ForgeOwnership, LinkProver]

ACTIONS: dict[str, type] = {
    "no_witness_claim": NoWitnessClaim,
    "replay_commitment": ReplayCommitment,
    "relay_signature": RelaySignature,
    "false_location_claim": FalseLocationClaim,
    "forge_witness_sig": ForgeWitnessSig,
    "collude_witnesses": ColludeWitnesses,
    "false_force_report": FalseForceReport,
    "tamper_chain": TamperChain,
    "forge_ownership": ForgeOwnership,
    "link_prover": LinkProver,
}
_NAMES = {cls: name for name, cls in ACTIONS.items()}


def action_name(action: AdversaryAction) -> str:
    return _NAMES[type(action)]


def parse_action(spec: dict) -> AdversaryAction:
    """``{"action": "collude_witnesses", "fraction": 0.6}`` -> ColludeWitnesses(0.6)."""
    spec = dict(spec)
    name = spec.pop("action", None)
    if name not in ACTIONS:
        raise ValueError(f"unknown adversary action {name!r}")
    try:
        return ACTIONS[name](**spec)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {name}: {exc}") from exc


def default_suite() -> list[AdversaryAction]:
    return [NoWitnessClaim(), ReplayCommitment(), RelaySignature(), FalseLocationClaim(),
            ForgeWitnessSig(), ColludeWitnesses(0.4), ColludeWitnesses(0.6), FalseForceReport(),
            TamperChain(), ForgeOwnership(), LinkProver()]


def _outcome(action: AdversaryAction, attempts: int, detected: int, expect_detection: bool = True,
             evidence: str = "") -> AttackOutcome:
    succeeded = attempts - detected
    if expect_detection:
        met = attempts > 0 and succeeded == 0
    else:
        met = attempts > 0 and succeeded == attempts
    return AttackOutcome(action_name(action), attempts, detected, succeeded, met, evidence)


def _summarise(counter: Counter) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(counter.items()))


def _onchain_commitments(sim: Simulation) -> list[tuple[Transaction, pol.PoLCommitment]]:
    out = []
    for block in sim.reference.store.branch():
        for tx in block.transactions:
            for op in tx.operations:
                if isinstance(op, PoLCommitmentOp):
                    out.append((tx, op.commitment))
    return out


def _attacker_request(rng: random.Random, location: Location, t: int) -> tuple[pol.PoLRequest, pol.PartialNote]:
    escrow = KeyEscrow.generate(rng, pool_size=1)
    return pol.build_pol_request(escrow, location, t, rng)


def _malicious_block(sim: Simulation, txs: list[Transaction]) -> Block:
    """A block on the reference tip, correctly signed by the next scheduled producer."""
    store = sim.reference.store
    slot = sim.config.slot(store.tip_block.timestamp) + 1
    pid = sim.producer_for(slot)
    keys = sim.nodes[pid].keys
    unsigned = Block(store.height + 1, store.tip, merkle_root([tx.txid for tx in txs]),
                     sim.config.slot_time(slot), keys.public_key, b"", tuple(txs))
    return replace(unsigned, producer_sig=keys.sign(unsigned.header_bytes()))


def _scratch_submit(sim: Simulation, tx: Transaction, node_id: int = 0) -> TxStatus:
    # A throwaway mempool keeps the honest node's pool untouched.
    return submit_tx(sim.nodes[node_id].store, Mempool(), tx)


def _no_witness(sim: Simulation, action: NoWitnessClaim, rng: random.Random) -> AttackOutcome:
    detected = 0
    reasons = Counter()
    for _ in range(action.attempts):
        try:
            pol.combine_responses([])
        except pol.NoWitnessError:
            reasons["no-witness-error"] += 1
            blocked = True
        else:
            blocked = False
        # Hand-built commitment with no responses at all.
        com = pol.PoLCommitment(())
        if pol.check_commitment(com) is not None:
            reasons["empty-commitment"] += 1
        else:
            blocked = False
        detected += blocked
    return _outcome(action, action.attempts, detected, evidence=_summarise(reasons))


def _replay(sim: Simulation, action: ReplayCommitment, rng: random.Random) -> AttackOutcome:
    onchain = _onchain_commitments(sim)
    if not onchain:
        return _outcome(action, 0, 0, evidence="no on-chain commitments to replay")
    attacker = crypto.generate_keypair(rng)
    reasons = Counter()
    detected = 0
    height = sim.reference.store.height
    for i in range(action.attempts):
        tx, com = onchain[rng.randrange(len(onchain))]
        mode = i % 3
        if mode == 0:
            status = _scratch_submit(sim, tx, rng.randrange(len(sim.nodes)))
            ok = status is not TxStatus.ACCEPTED
            reasons[f"resubmit:{status.value}"] += 1
        elif mode == 1:
            wrapped = Transaction.create([PoLCommitmentOp(com)], height + 100, attacker)
            status = _scratch_submit(sim, wrapped, rng.randrange(len(sim.nodes)))
            ok = status is not TxStatus.ACCEPTED
            reasons[f"rewrap:{status.value}"] += 1
        else:
            block = _malicious_block(sim, [tx])
            status = sim.reference.store.validate_block(block)
            ok = status is not BlockStatus.OK
            reasons[f"in-block:{status.value}"] += 1
        detected += ok
    return _outcome(action, action.attempts, detected, evidence=_summarise(reasons))


def _relay(sim: Simulation, action: RelaySignature, rng: random.Random) -> AttackOutcome:
    onchain = _onchain_commitments(sim)
    if not onchain:
        return _outcome(action, 0, 0, evidence="no recorded responses to relay")
    reasons = Counter()
    detected = 0
    t = sim.config.slot_time(sim.round)
    for i in range(action.attempts):
        _, com = onchain[rng.randrange(len(onchain))]
        recorded = com.responses[rng.randrange(len(com.responses))]
        if i % 2 == 0:
            # Fresh request from the attacker's own key at a new place and time.
            loc = sim.frame.to_location(rng.uniform(0, 1000 - action.offset_m) + action.offset_m,
                                        rng.uniform(0, 1000))
            req, partial = _attacker_request(rng, loc, t)
            forged = pol.PoLResponse(req.stripped(), recorded.nonce_w, recorded.sig_w)
            signer = partial.keys
        else:
            # The victim's request with only the location ciphertext swapped.
            victim = recorded.request
            ct = bytes(b ^ 0xFF for b in victim.location_ct)
            forged = pol.PoLResponse(replace(victim, location_ct=ct), recorded.nonce_w, recorded.sig_w)
            signer = crypto.generate_keypair(rng)
        forged_com = pol.PoLCommitment((forged,))
        reason = pol.check_commitment(forged_com)
        tx = Transaction.create([PoLCommitmentOp(forged_com)], sim.reference.store.height + 100, signer)
        status = _scratch_submit(sim, tx)
        reasons[f"{reason}:{status.value}"] += 1
        detected += status is not TxStatus.ACCEPTED
    return _outcome(action, action.attempts, detected, evidence=_summarise(reasons))


def _false_location(sim: Simulation, action: FalseLocationClaim, rng: random.Random) -> AttackOutcome:
    if not sim.witnesses:
        return _outcome(action, 0, 0, evidence="no witnesses")
    reasons = Counter()
    detected = 0
    t = sim.config.slot_time(sim.round)
    for i in range(action.attempts):
        w = sim.witnesses[i % len(sim.witnesses)]
        true_xy = w.state.position + rng.uniform(0, sim.radius / 2) * np.array([1.0, 0.0])
        claim = sim.frame.to_location(true_xy[0], true_xy[1] + action.offset_m)
        req, partial = _attacker_request(rng, claim, t)
        if i % 2 == 1:
            # Disclose the true spot over the air while the signed ciphertext says otherwise.
            d = pol.Disclosure(sim.frame.to_location(*true_xy), req.disclosure.key)
            req = replace(req, disclosure=d)
        responses = []
        for other in sim.witnesses:
            if np.hypot(*(other.state.position - true_xy)) > other.state.comm_radius:
                continue
            verdict = pol.witness_validate(req, sim.frame.to_location(*other.state.position), sim.radius, t)
            reasons[verdict.value] += 1
            if verdict is pol.Verdict.ACCEPT:
                scratch = pol.WitnessSigner(other.signer.keys, other.signer.counter)
                responses.append(pol.build_pol_response(req, scratch))
        try:
            pol.combine_responses(responses)
        except pol.NoWitnessError:
            detected += 1
    return _outcome(action, action.attempts, detected, evidence=_summarise(reasons))


def _forge_witness(sim: Simulation, action: ForgeWitnessSig, rng: random.Random) -> AttackOutcome:
    if not sim.witnesses:
        return _outcome(action, 0, 0, evidence="no witnesses to impersonate")
    reasons = Counter()
    detected = 0
    t = sim.config.slot_time(sim.round)
    forger = crypto.generate_keypair(rng)
    for i in range(action.attempts):
        victim = sim.witnesses[rng.randrange(len(sim.witnesses))]
        loc = sim.frame.to_location(*victim.state.position)
        req, partial = _attacker_request(rng, loc, t)
        nonce_w = pol.witness_nonce(victim.node.keys.public_key, victim.signer.counter + 1 + i)
        core = req.stripped()
        if i % 3 == 0:
            sig = rng.randbytes(64)
        elif i % 3 == 1:
            sig = forger.sign(core.signed_fields() + nonce_w)
        else:
            # Valid signature by the forger, but over its own nonce, spliced under the victim's.
            own = pol.witness_nonce(forger.public_key, i)
            sig = forger.sign(core.signed_fields() + own)
        com = pol.PoLCommitment((pol.PoLResponse(core, nonce_w, sig),))
        tx = Transaction.create([PoLCommitmentOp(com)], sim.reference.store.height + 100, partial.keys)
        status = _scratch_submit(sim, tx)
        block_status = sim.reference.store.validate_block(_malicious_block(sim, [tx])) if i % 10 == 0 else None
        reasons[status.value] += 1
        rejected = status is not TxStatus.ACCEPTED and block_status in (None, BlockStatus.BAD_TX)
        detected += rejected
    return _outcome(action, action.attempts, detected, evidence=_summarise(reasons))


def _collude(sim: Simulation, action: ColludeWitnesses, rng: random.Random) -> AttackOutcome:
    """Self-contained cluster: M witnesses around a target spot, a prover far away.

    Colluders sign the false claim; honest witnesses never hear the request.
    The verifier then checks the claim against the witnesses whose on-chain
    reports put them in range of the claimed spot.
    """
    m = action.witnesses
    colluders = int(round(action.fraction * m))
    frame = sim.frame
    cfg = ChainConfig(genesis_time=sim.config.genesis_time, block_interval=sim.config.block_interval)
    producer = crypto.generate_keypair(rng)
    store = ChainStore(cfg)
    pool = Mempool()
    target = np.array([500.0, 500.0])
    keys = [crypto.generate_keypair(rng) for _ in range(m)]
    for j, kp in enumerate(keys):
        angle = 2 * np.pi * j / m
        pos = target + 0.4 * sim.radius * np.array([np.cos(angle), np.sin(angle)])
        op = WitnessReportOp(frame.to_location(*pos), (0.0, 0.0))
        submit_tx(store, pool, Transaction.create([op], 100, kp))
    t1 = cfg.slot_time(1)
    store.append(assemble_block(store, pool, producer, t1))

    escrow = KeyEscrow.generate(rng, pool_size=2)
    claimed = frame.to_location(*target)
    req, partial = pol.build_pol_request(escrow, claimed, t1, rng)
    responses = [pol.build_pol_response(req, pol.WitnessSigner(kp)) for kp in keys[:colluders]]
    if not responses:
        return _outcome(action, 1, 1, expect_detection=action.fraction < 0.5,
                        evidence="no colluders, no commitment")
    com = pol.combine_responses(responses)
    note = pol.finalize_note(partial, com, escrow)
    submit_tx(store, pool, Transaction.create([PoLCommitmentOp(com)], 100, partial.keys))
    store.append(assemble_block(store, pool, producer, cfg.slot_time(2)))

    verifier = pol.Verifier(rng, ttl=None)
    v = note.verification_request()
    r = verifier.issue_challenge(store, v)
    proof = pol.prove_ownership(note, r)
    owned = verifier.verify_ownership(store, v, r, proof)
    location = pol.reveal_location(com, proof.location_key)
    expected, signed, holds = pol.corroborate(com, location, store.witness_positions(t1), sim.radius, slack=0.0)
    evidence = (f"M={m};colluders={colluders};owned={str(owned).lower()};expected={expected};"
                f"signed={signed};compromised={str(holds).lower()}")
    return _outcome(action, 1, 0 if holds else 1, expect_detection=action.fraction < 0.5, evidence=evidence)


def _quantisation_bound(xy: np.ndarray, params, step: float) -> np.ndarray:
    """Per-node bound on the net-force error caused by moving each position up to ``step``.

    Each pair contributes its radial derivative plus the rotation term |g|/r,
    times the largest change in separation (both ends moving diagonally).
    """
    n = len(xy)
    diff = xy[None, :, :] - xy[:, None, :]
    r = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(r, np.inf)
    r = np.maximum(r, 1e-9)
    inside = r <= params.R_r
    gap = np.maximum(np.abs(r - params.R_r), np.sqrt(params.epsilon_sing))
    g = np.where(inside, params.k_rep / r**2, params.k_att / gap**2)
    dg = np.where(inside, 2 * params.k_rep / r**3, 2 * params.k_att / gap**3)
    g[~np.isfinite(r)] = 0.0
    dg[~np.isfinite(r)] = 0.0
    np.fill_diagonal(g, 0.0)
    np.fill_diagonal(dg, 0.0)
    shift = 2 * np.sqrt(2) * step
    return ((dg + g / r) * shift).sum(axis=1) if n > 1 else np.zeros(n)


def audit_force_reports(reports: dict[bytes, WitnessReportOp], sim: Simulation,
                        abs_tol: float = 1e-6, margin: float = 2.0) -> set[bytes]:
    """Witness keys whose reported force disagrees with the field implied by reported positions.

    On-chain positions are rounded to the fixed-point grid, so the implied
    force is only known to within a bound derived from the grid step.
    """
    pks = sorted(reports)
    if len(pks) < 2:
        return set()
    xy = np.array([sim.frame.to_xy(reports[pk].position) for pk in pks])
    implied = net_forces(xy, sim.params)
    bound = _quantisation_bound(xy, sim.params, sim.frame.quantum_m)
    flagged = set()
    for pk, f, b in zip(pks, implied, bound):
        reported = np.array(reports[pk].net_force)
        if np.hypot(*(reported - f)) > abs_tol + margin * b:
            flagged.add(pk)
    return flagged


def _false_force(sim: Simulation, action: FalseForceReport, rng: random.Random) -> AttackOutcome:
    store = sim.reference.store
    reports = store.latest_reports()
    if len(reports) < 2:
        return _outcome(action, 0, 0, evidence="too few witness reports")
    pks = sorted(reports)
    liar = max(pks, key=lambda pk: reports[pk].force_magnitude)
    honest_op = reports[liar]
    fake = WitnessReportOp(honest_op.position, (honest_op.net_force[0] * action.multiplier,
                                                honest_op.net_force[1] * action.multiplier))
    # The ledger itself accepts the report: physics is not re-checked on-chain.
    liar_keys = sim.nodes[sim.pk_to_node[liar]].keys
    status = _scratch_submit(sim, Transaction.create([fake], store.height + 100, liar_keys))
    lied = dict(reports)
    lied[liar] = fake
    budget = EpochBudget(sim.scenario.incentive.budget, sim.config.epoch_blocks)
    honest_u = allocate_incentive([reports[pk].force_magnitude for pk in pks], budget)
    lied_u = allocate_incentive([lied[pk].force_magnitude for pk in pks], budget)
    gain = lied_u[pks.index(liar)] - honest_u[pks.index(liar)]
    baseline = audit_force_reports(reports, sim)
    flagged = audit_force_reports(lied, sim)
    detected = int(liar in flagged and not baseline)
    evidence = (f"ledger={status.value};gain={gain:.6g};liar_flagged={str(liar in flagged).lower()};"
                f"honest_flagged={len(baseline)}")
    return _outcome(action, 1, detected, evidence=evidence)


def _tamper(sim: Simulation, action: TamperChain, rng: random.Random) -> AttackOutcome:
    store = sim.reference.store
    blocks = store.branch()[1:]
    if not blocks:
        return _outcome(action, 0, 0, evidence="empty chain")
    reasons = Counter()
    detected = 0
    for _ in range(action.samples):
        block = blocks[rng.randrange(len(blocks))]
        raw = bytearray(block.to_bytes())
        bit = rng.randrange(len(raw) * 8)
        raw[bit // 8] ^= 1 << (bit % 8)
        try:
            tampered = Block.from_bytes(bytes(raw))
        except (DecodeError, ValueError):
            reasons["decode"] += 1
            detected += 1
            continue
        status = store.validate_block(tampered)
        if status is not BlockStatus.OK:
            reasons[status.value] += 1
            detected += 1
        else:
            reasons["accepted"] += 1
    export = export_chain(store)
    header = 12
    for _ in range(action.imports):
        raw = bytearray(export)
        pos = rng.randrange(header, len(raw))
        raw[pos] ^= 1 << rng.randrange(8)
        try:
            import_chain(bytes(raw), sim.config, sim._schedule)
        except InvalidChain:
            reasons["import-rejected"] += 1
            detected += 1
        else:
            reasons["import-accepted"] += 1
    return _outcome(action, action.samples + action.imports, detected, evidence=_summarise(reasons))


def _high_s(sig: bytes) -> bytes:
    s = int.from_bytes(sig[32:], "big")
    return sig[:32] + (CURVE_ORDER - s).to_bytes(32, "big")


def _forge_ownership(sim: Simulation, action: ForgeOwnership, rng: random.Random) -> AttackOutcome:
    store = sim.reference.store
    targets = [(com, sim.note_owner.get(com.index_key())) for _, com in _onchain_commitments(sim)]
    targets = [(com, owner) for com, owner in targets if owner is not None]
    if not targets:
        return _outcome(action, 0, 0, evidence="no owned commitments on chain")
    verifier = pol.Verifier(rng, ttl=None)
    attackers = [crypto.generate_keypair(rng) for _ in range(8)]
    # The attacker has eavesdropped one honest proof per target, for an old challenge.
    observed = {}
    for com, owner in targets:
        note = owner.notes[com.index_key()]
        v = note.verification_request()
        r_old = verifier.issue_challenge(store, v)
        proof = pol.prove_ownership(note, r_old)
        if not verifier.verify_ownership(store, v, r_old, proof):
            return _outcome(action, 0, 0, evidence="honest control proof failed")
        observed[com.index_key()] = (r_old, proof)
    accepted = 0
    modes = Counter()
    for i in range(action.attempts):
        com, _ = targets[i % len(targets)]
        v = pol.VerificationRequest(com.witness_nonces)
        r = verifier.issue_challenge(store, v)
        r_old, old_proof = observed[com.index_key()]
        mode = i % 5
        if mode == 0:
            proof, answer = pol.OwnershipProof(rng.randbytes(64)), r
        elif mode == 1:
            kp = attackers[i % len(attackers)]
            proof, answer = pol.OwnershipProof(kp.sign(com.request.nonce_p + r)), r
        elif mode == 2:
            proof, answer = old_proof, r
        elif mode == 3:
            proof, answer = pol.OwnershipProof(_high_s(old_proof.sig)), r
        else:
            # Answer the old challenge instead of the issued one.
            proof, answer = old_proof, r_old
        modes[mode] += 1
        accepted += verifier.verify_ownership(store, v, answer, proof)
    evidence = f"false_accepts={accepted};targets={len(targets)};honest_controls_passed={len(observed)}"
    return _outcome(action, action.attempts, action.attempts - accepted, evidence=evidence)


def _link(sim: Simulation, action: LinkProver, rng: random.Random) -> AttackOutcome:
    onchain = _onchain_commitments(sim)
    export = export_chain(sim.reference.store)
    per_prover: dict[int, list[bytes]] = {}
    for _, com in onchain:
        owner = sim.note_owner.get(com.index_key())
        if owner is not None:
            per_prover.setdefault(owner.node.id, []).append(com.request.pk)
    duplicates = sum(len(pks) - len(set(pks)) for pks in per_prover.values())
    all_pks = [com.request.pk for _, com in onchain]
    cross = len(all_pks) - len(set(all_pks))
    leaks = sum(export.count(p.escrow.master_key.public_key) for p in sim.provers)
    attempts = len(all_pks)
    failures = duplicates + cross + leaks
    evidence = f"commitments={attempts};duplicate_keys={duplicates + cross};identity_leaks={leaks}"
    if attempts == 0:
        return _outcome(action, 0, 0, evidence=evidence)
    return _outcome(action, attempts, attempts - min(failures, attempts), evidence=evidence)


_HANDLERS = {
    NoWitnessClaim: _no_witness,
    ReplayCommitment: _replay,
    RelaySignature: _relay,
    FalseLocationClaim: _false_location,
    ForgeWitnessSig: _forge_witness,
    ColludeWitnesses: _collude,
    FalseForceReport: _false_force,
    TamperChain: _tamper,
    ForgeOwnership: _forge_ownership,
    LinkProver: _link,
}


def inject(sim: Simulation, action: AdversaryAction) -> AttackOutcome:
    """Run one attack against ``sim`` and report whether the protocol caught it."""
    rng = sub_rng(sim.seed, f"adversary/{action_name(action)}/{action!r}")
    return _HANDLERS[type(action)](sim, action, rng)


def run_suite(sim: Simulation, actions: list[AdversaryAction] | None = None) -> list[AttackOutcome]:
    return [inject(sim, a) for a in (actions if actions is not None else default_suite())]
