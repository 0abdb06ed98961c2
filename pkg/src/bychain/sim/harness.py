"""Deterministic round loop tying provers, witnesses, the ledger, consensus and
the coverage field together.

One round is one block slot.  Within a round: messages due are delivered,
provers collect proofs, witnesses report position and force, the scheduled
producer seals a block, nodes exchange tip announcements, the verifier
contract handles ownership checks, witnesses move, and on epoch boundaries
the budget is allocated and a new committee elected.
"""
from __future__ import annotations

import bisect
import logging
import math
import random
import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .. import consensus, crypto, pol
from ..crypto import KeyEscrow, KeyPair
from ..field import (
    EpochBudget,
    FieldParams,
    Region,
    WitnessState,
    allocate_incentive,
    estimate_coverage,
    net_forces,
    step_motion,
)
from ..geo import LocalFrame
from ..ledger import (
    Block,
    ChainConfig,
    ChainStore,
    IncentiveAllocationOp,
    InvalidBlock,
    Mempool,
    PoLCommitmentOp,
    Transaction,
    TxStatus,
    VerificationRequestOp,
    WitnessReportOp,
    assemble_block,
    export_chain,
    submit_tx,
)
from .network import Network, sample_latency
from .report import Claim, RunReport, VerificationRecord
from .scenario import Scenario

log = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-2


def sub_rng(seed: int, name: str) -> random.Random:
    """Independent named stream, so adding draws in one place never shifts another."""
    return random.Random(f"{seed}:{name}")


@dataclass
class Node:
    id: int
    keys: KeyPair = field(repr=False)
    store: ChainStore = field(repr=False)
    mempool: Mempool = field(repr=False)
    compute_delay: float
    orphans: dict[bytes, list[Block]] = field(default_factory=dict, repr=False)
    rejected_blocks: int = 0


@dataclass
class Witness:
    node: Node
    signer: pol.WitnessSigner = field(repr=False)
    state: WitnessState = field(repr=False)


@dataclass
class Prover:
    node: Node
    escrow: KeyEscrow = field(repr=False)
    waypoints: np.ndarray
    speed: float
    notes: dict[bytes, pol.PoLNote] = field(default_factory=dict, repr=False)
    requested: set[bytes] = field(default_factory=set)

    def position(self, rnd: int) -> np.ndarray:
        """Constant-speed walk around the closed waypoint loop."""
        pts = self.waypoints
        if len(pts) == 1 or self.speed == 0:
            return pts[0].copy()
        loop = np.vstack([pts, pts[:1]])
        seg = np.hypot(*np.diff(loop, axis=0).T)
        total = float(seg.sum())
        if total == 0:
            return pts[0].copy()
        d = (self.speed * rnd) % total
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        i = min(int(np.searchsorted(cum, d, side="right")) - 1, len(seg) - 1)
        frac = (d - cum[i]) / seg[i] if seg[i] > 0 else 0.0
        return loop[i] + frac * (loop[i + 1] - loop[i])


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None):
        if seed is not None:
            scenario = replace(scenario, seed=seed)
        self.scenario = sc = scenario
        self.seed = sc.seed
        self.frame = LocalFrame()
        self.region = Region(*sc.region)
        self.config = ChainConfig(block_interval=sc.consensus.block_interval,
                                  tx_lifetime=sc.consensus.tx_lifetime,
                                  epoch_blocks=sc.incentive.epoch_blocks)
        self.radius = sc.witnesses.radius
        self.params = FieldParams(k_rep=sc.field.k_rep, R_r=sc.repulsive_cutoff, lam=sc.field.lam,
                                  epsilon_sing=sc.field.epsilon_sing, alpha=sc.field.alpha,
                                  dt=1.0, jitter_seed=sc.seed)
        self.rng_claims = sub_rng(sc.seed, "claims")
        self.rng_ble = sub_rng(sc.seed, "ble")
        self.rng_stage2 = sub_rng(sc.seed, "stage2")
        self.rng_election = sub_rng(sc.seed, "election")
        self.network = Network(sc.network, float(sc.consensus.block_interval), sub_rng(sc.seed, "network"))
        self.verifier = pol.Verifier(sub_rng(sc.seed, "verifier"), ttl=float(sc.consensus.block_interval))

        key_rng = sub_rng(sc.seed, "keys")
        compute_rng = sub_rng(sc.seed, "compute")
        self.nodes: list[Node] = []
        for i in range(sc.node_count):
            keys = crypto.generate_keypair(key_rng)
            self.nodes.append(Node(i, keys, ChainStore(self.config, self._schedule), Mempool(),
                                   compute_rng.uniform(*sc.consensus.compute_delay)))
        self.pk_to_node = {n.keys.public_key: n.id for n in self.nodes}
        self.addr_to_node = {n.keys.address: n.id for n in self.nodes}

        positions = self._initial_positions(sub_rng(sc.seed, "layout"))
        self.witnesses = [
            Witness(self.nodes[i], pol.WitnessSigner(self.nodes[i].keys),
                    WitnessState(i, positions[i], mass=sc.field.mass, comm_radius=self.radius))
            for i in range(sc.witnesses.count)
        ]
        self._refresh_forces()
        path_rng = sub_rng(sc.seed, "paths")
        self.provers = []
        for j in range(sc.provers.count):
            node = self.nodes[sc.witnesses.count + j]
            self.provers.append(Prover(node, KeyEscrow.generate(key_rng), self._waypoints(j, path_rng),
                                       sc.provers.speed))
        self.note_owner: dict[bytes, Prover] = {}

        self.committees: list[tuple[int, consensus.Committee]] = []
        self.claims: list[Claim] = []
        self.verifications: list[VerificationRecord] = []
        self.coverage: list[float] = [self._coverage()]
        self.trace: list[tuple] = []
        self.allocations: list[tuple] = []
        self.tallies: list[tuple] = []
        self.metrics: list[tuple] = []
        self.tx_status: Counter = Counter()
        self.converged_round: int | None = None
        self.round = 0
        self._v_processed: set[bytes] = set()
        self._v_scanned: set[bytes] = set()
        self._trace_round(0)
        self._check_converged(0)
        self._elect(epoch=0, start_slot=1, budgets={})

    # setup -----------------------------------------------------------------

    def _initial_positions(self, rng: random.Random) -> np.ndarray:
        spec = self.scenario.witnesses
        r = self.region
        if spec.layout == "explicit":
            return np.array(spec.positions, dtype=float).reshape(-1, 2)
        if spec.layout == "uniform":
            lo, hi = (r.x0, r.y0), (r.x1, r.y1)
        else:
            cx, cy, h = (r.x0 + r.x1) / 2, (r.y0 + r.y1) / 2, spec.cluster_size / 2
            lo, hi = (cx - h, cy - h), (cx + h, cy + h)
        return np.array([[rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])]
                         for _ in range(spec.count)]).reshape(-1, 2)

    def _waypoints(self, j: int, rng: random.Random) -> np.ndarray:
        spec = self.scenario.provers
        if spec.waypoints:
            return np.array(spec.waypoints[j], dtype=float).reshape(-1, 2)
        r = self.region
        cx, cy, s = (r.x0 + r.x1) / 2, (r.y0 + r.y1) / 2, spec.waypoint_spread
        pts = [[rng.uniform(cx - s, cx + s), rng.uniform(cy - s, cy + s)] for _ in range(spec.waypoint_count)]
        return self.region.clamp(np.array(pts))

    # consensus plumbing ----------------------------------------------------

    def committee_for(self, slot: int) -> consensus.Committee | None:
        starts = [s for s, _ in self.committees]
        i = bisect.bisect_right(starts, slot) - 1
        return self.committees[i][1] if i >= 0 else None

    def producer_for(self, slot: int) -> int | None:
        committee = self.committee_for(slot)
        return None if committee is None else consensus.scheduled_producer(committee, slot)

    def _schedule(self, slot: int) -> bytes | None:
        pid = self.producer_for(slot)
        return None if pid is None else self.nodes[pid].keys.public_key

    def _compute_delay(self, node: Node) -> float:
        delay = node.compute_delay
        if self.scenario.consensus.measure_compute:
            start = time.perf_counter()
            allocate_incentive([1.0] * max(len(self.witnesses), 2), EpochBudget(1.0))
            delay += (time.perf_counter() - start) * self.scenario.consensus.compute_scale
        return delay

    def _elect(self, epoch: int, start_slot: int, budgets: dict[int, float]):
        spec = self.scenario.consensus
        if spec.fixed_committee:
            committee = consensus.Committee(list(spec.fixed_committee),
                                            {n: 0.0 for n in spec.fixed_committee})
        else:
            ids = [n.id for n in self.nodes]
            obs = [consensus.DelayObservation(n, m, self.network.link_delay(n, m, self.round),
                                              self._compute_delay(self.nodes[m]), spec.tau_final)
                   for n in ids for m in ids if n != m]
            cfg = consensus.CommitteeConfig(theta=spec.theta, size=spec.committee_size,
                                            vote_budget=budgets or {n: 1.0 for n in ids},
                                            sampled=not spec.deterministic_votes)
            if len(ids) == 1:
                committee = consensus.Committee([ids[0]], {ids[0]: 0.0})
            else:
                committee = consensus.elect(obs, cfg, self.rng_election, candidates=ids)
        self.committees.append((start_slot, committee))
        self.tallies.extend(consensus.tally_rows(epoch, committee))
        log.info("epoch %d committee %s", epoch, committee.members)

    # messaging -------------------------------------------------------------

    @property
    def reference(self) -> Node:
        return self.nodes[0]

    def _peers(self):
        return range(len(self.nodes))

    def _submit(self, node: Node, tx: Transaction, gossip: bool) -> TxStatus:
        status = submit_tx(node.store, node.mempool, tx)
        if gossip:
            self.tx_status[status.value] += 1
            if status is TxStatus.ACCEPTED:
                self.network.broadcast("tx", node.id, self._peers(), tx, self.round)
        return status

    def _pump(self):
        while (msg := self.network.pop_due(self.round)) is not None:
            node = self.nodes[msg.dst]
            if msg.kind == "tx":
                self._submit(node, msg.payload, gossip=False)
            elif msg.kind == "block":
                self._receive_block(node, msg.payload, msg.src)
            elif msg.kind == "blocks":
                for block in msg.payload:
                    self._receive_block(node, block, msg.src)
            elif msg.kind == "tip":
                if msg.payload not in node.store:
                    locator = frozenset(b.hash for b in node.store.ancestors(node.store.tip))
                    self.network.send("getblocks", node.id, msg.src, locator, self.round)
            elif msg.kind == "getblocks":
                blocks = node.store.missing_for(node.store.tip, lambda h, have=msg.payload: h in have)
                if blocks:
                    self.network.send("blocks", node.id, msg.src, blocks, self.round)

    def _receive_block(self, node: Node, block: Block, src: int):
        store = node.store
        pending = [block]
        changed = False
        while pending:
            b = pending.pop(0)
            if b.hash in store:
                continue
            if b.prev_hash not in store:
                node.orphans.setdefault(b.prev_hash, []).append(b)
                locator = frozenset(x.hash for x in store.ancestors(store.tip))
                self.network.send("getblocks", node.id, src, locator, self.round)
                continue
            try:
                changed |= store.append(b)
            except InvalidBlock as exc:
                node.rejected_blocks += 1
                log.warning("node %d rejected block: %s", node.id, exc)
                continue
            pending.extend(node.orphans.pop(b.hash, []))
        if changed:
            self._settle_mempool(node)

    def _settle_mempool(self, node: Node):
        node.mempool.prune(node.store)
        orphaned, node.store.orphaned_txs = node.store.orphaned_txs, []
        for tx in orphaned:
            submit_tx(node.store, node.mempool, tx)

    # round phases ----------------------------------------------------------

    def _claim(self, prover: Prover, t: int):
        xy = prover.position(self.round)
        loc = self.frame.to_location(*xy)
        req, partial = pol.build_pol_request(prover.escrow, loc, t, self.rng_claims)
        wire = req.to_bytes()
        responses, arrivals = [], []
        for w in self.witnesses:
            if math.dist(w.state.position, xy) > w.state.comm_radius:
                continue
            if self.rng_ble.random() >= self.scenario.network.encounter_prob:
                continue
            received = pol.PoLRequest.from_bytes(wire)
            verdict = pol.witness_validate(received, self.frame.to_location(*w.state.position),
                                           self.radius, t)
            if verdict is not pol.Verdict.ACCEPT:
                continue
            resp = pol.build_pol_response(received, w.signer)
            responses.append(pol.PoLResponse.from_bytes(resp.to_bytes()))
            arrivals.append(self.rng_ble.uniform(*self.scenario.network.ble_latency_ms))
        try:
            com = pol.combine_responses(responses, arrivals_ms=arrivals)
        except pol.NoWitnessError:
            self.claims.append(Claim(self.round, prover.node.id, "", 0, "no-witness"))
            return
        note = pol.finalize_note(partial, com, prover.escrow)
        tx = Transaction.create([PoLCommitmentOp(com)], prover.node.store.height + self.config.tx_lifetime,
                                partial.keys)
        status = self._submit(prover.node, tx, gossip=True)
        key = com.index_key()
        if status is TxStatus.ACCEPTED:
            prover.notes[key] = note
            self.note_owner[key] = prover
        self.claims.append(Claim(self.round, prover.node.id, key.hex()[:16], com.trust_level,
                                 "committed" if status is TxStatus.ACCEPTED else status.value))

    def _report(self, w: Witness):
        op = WitnessReportOp(self.frame.to_location(*w.state.position),
                             (float(w.state.net_force[0]), float(w.state.net_force[1])))
        tx = Transaction.create([op], w.node.store.height + self.config.tx_lifetime, w.node.keys)
        self._submit(w.node, tx, gossip=True)

    def allocations_for(self, store: ChainStore, height: int) -> list[tuple[bytes, float]] | None:
        """Epoch payout computed from the latest force reports on ``store``'s tip chain."""
        reports = store.latest_reports(since_height=max(height - self.config.epoch_blocks, 0))
        if not reports:
            return None
        pks = sorted(reports)
        amounts = allocate_incentive([reports[pk].force_magnitude for pk in pks],
                                     EpochBudget(self.scenario.incentive.budget, self.config.epoch_blocks))
        return [(crypto.address(pk), amt) for pk, amt in zip(pks, amounts)]

    def _produce(self, t: int):
        pid = self.producer_for(self.round)
        if pid is None:
            return
        node = self.nodes[pid]
        height = node.store.height + 1
        allocations = None
        if height % self.config.epoch_blocks == 0:
            allocations = self.allocations_for(node.store, height)
        block = assemble_block(node.store, node.mempool, node.keys, t, allocations)
        node.store.append(block)
        self._settle_mempool(node)
        self.network.broadcast("block", pid, self._peers(), block, self.round)

    def _announce(self):
        for node in self.nodes:
            self.network.broadcast("tip", node.id, self._peers(), node.store.tip, self.round)

    def _request_verifications(self):
        depth_needed = self.committee_for(self.round).finality_depth()
        for prover in self.provers:
            store = prover.node.store
            for key, note in prover.notes.items():
                if key in prover.requested:
                    continue
                loc = store.lookup_commitment(note.witness_nonces)
                if loc is None or not store.is_final(loc.block_hash, depth_needed):
                    continue
                tx = Transaction.create([VerificationRequestOp(note.verification_request())],
                                        store.height + self.config.tx_lifetime, KeyPair(note.sk, note.pk))
                if self._submit(prover.node, tx, gossip=True) is TxStatus.ACCEPTED:
                    prover.requested.add(key)

    def _new_verification_ops(self) -> list[pol.VerificationRequest]:
        ref = self.reference.store
        fresh = []
        for block in ref.ancestors(ref.tip):
            if block.hash in self._v_scanned:
                break
            fresh.append(block)
        out = []
        for block in reversed(fresh):
            self._v_scanned.add(block.hash)
            for tx in block.transactions:
                out.extend(op.request for op in tx.operations if isinstance(op, VerificationRequestOp))
        return out

    def _run_verifier(self, t: int):
        """The verifier contract, evaluated against the reference node's chain."""
        ref = self.reference
        for v in self._new_verification_ops():
            key = v.index_key()
            if key in self._v_processed:
                continue
            self._v_processed.add(key)
            prover = self.note_owner.get(key)
            if prover is None:
                continue
            note = prover.notes[key]
            loc = ref.store.lookup_commitment(v.witness_nonces)
            trust = loc.commitment.trust_level if loc else 0
            record = dict(round=self.round, prover=prover.node.id, commitment=key.hex()[:16], trust=trust)
            try:
                r = self.verifier.issue_challenge(ref.store, v, now=t)
            except pol.CommitmentNotFound:
                self.verifications.append(VerificationRecord(verified=False, reason="not-found", **record))
                continue
            legs = [self._leg(ref.id, prover.node.id),
                    self._leg(prover.node.id, ref.id)]
            if None in legs:
                self.verifier.pending.pop(key, None)
                self.verifications.append(VerificationRecord(verified=False, reason="unreachable", **record))
                continue
            proof = pol.prove_ownership(note, r)
            ok = self.verifier.verify_ownership(ref.store, v, r, proof, now=t + sum(legs))
            if not ok:
                self.verifications.append(VerificationRecord(verified=False, reason="rejected", **record))
                continue
            com = loc.commitment
            location = pol.reveal_location(com, proof.location_key)
            positions = ref.store.witness_positions(com.request.timestamp)
            expected, signed, holds = pol.corroborate(com, location, positions, self.radius, slack=0.0)
            self.verifications.append(VerificationRecord(
                verified=True, expected=expected, signed=signed, corroborated=holds,
                lat_e7=location.lat_e7, lon_e7=location.lon_e7, **record))

    def _leg(self, src: int, dst: int) -> float | None:
        if self.network.link_delay(src, dst, self.round) == math.inf:
            return None
        return sample_latency(self.scenario.network.latency, self.rng_stage2)

    def _refresh_forces(self):
        if not self.witnesses:
            return
        forces = net_forces(np.array([w.state.position for w in self.witnesses]), self.params)
        for w, f in zip(self.witnesses, forces):
            w.state.net_force = f

    def _move(self):
        for w in self.witnesses:
            st = step_motion(w.state, w.state.net_force, self.params)
            clamped = self.region.clamp(st.position)
            velocity = np.where(clamped != st.position, 0.0, st.velocity)
            w.state = replace(st, position=clamped, velocity=velocity)
        self._refresh_forces()

    def _coverage(self) -> float:
        if not self.witnesses:
            return 0.0
        return estimate_coverage([w.state.position for w in self.witnesses], self.radius, self.region,
                                 resolution=self.scenario.coverage_resolution)

    def _trace_round(self, rnd: int):
        cov = self.coverage[-1]
        for w in self.witnesses:
            self.trace.append((rnd, w.node.id, float(w.state.position[0]), float(w.state.position[1]),
                               float(np.hypot(*w.state.net_force)), cov))

    def _check_converged(self, rnd: int):
        if self.converged_round is None and self.witnesses:
            if max(float(np.hypot(*w.state.net_force)) for w in self.witnesses) < CONVERGENCE_TOL:
                self.converged_round = rnd

    def _epoch(self):
        epoch = self.round // self.config.epoch_blocks
        budgets: dict[int, float] = {}
        ref = self.reference.store
        for block in ref.ancestors(ref.tip):
            if block.height <= self.round - self.config.epoch_blocks:
                break
            for tx in block.transactions:
                for op in tx.operations:
                    if isinstance(op, IncentiveAllocationOp):
                        budgets = {n.id: 0.0 for n in self.nodes}
                        for addr, amount in op.allocations:
                            if addr in self.addr_to_node:
                                budgets[self.addr_to_node[addr]] = amount
                                self.allocations.append((epoch, self.addr_to_node[addr], amount))
            if budgets:
                break
        self._elect(epoch=epoch, start_slot=self.round + 1, budgets=budgets)

    def _record_metrics(self):
        for node in self.nodes:
            self.metrics.append((self.round, node.id, node.store.height, node.store.tip.hex()[:16],
                                 len(node.mempool)))

    def step(self):
        self.round += 1
        sc = self.scenario
        t = self.config.slot_time(self.round)
        self._pump()
        quiet = sc.provers.quiet_rounds
        if quiet is None:
            quiet = sc.consensus.committee_size + 3
        if self.round <= sc.rounds - quiet and self.round % sc.provers.claim_every == 0:
            for prover in self.provers:
                self._claim(prover, t)
        if self.round % sc.report_every == 0:
            for w in self.witnesses:
                self._report(w)
        self._pump()
        self._produce(t)
        self._pump()
        self._announce()
        self._pump()
        self._request_verifications()
        self._pump()
        self._run_verifier(t)
        self._move()
        self.coverage.append(self._coverage())
        self._trace_round(self.round)
        self._check_converged(self.round)
        if self.round % self.config.epoch_blocks == 0:
            self._epoch()
        self._record_metrics()

    def run(self) -> RunReport:
        while self.round < self.scenario.rounds:
            self.step()
        return self.report()

    def tips_agree(self) -> bool:
        return len({n.store.tip for n in self.nodes}) == 1

    def report(self) -> RunReport:
        ref = self.reference.store
        return RunReport(
            scenario=self.scenario.name, seed=self.seed, rounds=self.round, height=ref.height,
            tip=ref.tip.hex(), tips_agree=self.tips_agree(), chain=export_chain(ref),
            claims=list(self.claims), verifications=list(self.verifications),
            coverage=list(self.coverage), converged_round=self.converged_round, trace=list(self.trace),
            allocations=list(self.allocations), tallies=list(self.tallies), metrics=list(self.metrics),
            drops=len(self.network.drops), tx_status=Counter(self.tx_status),
            blocks_rejected=sum(n.rejected_blocks for n in self.nodes))


def run(scenario: Scenario, seed: int | None = None) -> RunReport:
    return Simulation(scenario, seed).run()
