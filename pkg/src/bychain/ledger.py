"""Generalised block ledger: typed operations, transactions, blocks, the
mempool, block assembly and validation, longest-chain fork choice, and the
on-chain commitment index used by the verifier."""
from __future__ import annotations

import bisect
import enum
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator, Sequence, Union

from . import crypto
from .codec import DecodeError, Reader, Writer
from .crypto import PUBKEY_SIZE, SIGNATURE_SIZE, KeyPair
from .geo import LOCATION_SIZE, Location
from .pol import (
    MAX_COMMITMENT_BYTES,
    PoLCommitment,
    VerificationRequest,
    check_commitment,
    index_key,
)

log = logging.getLogger(__name__)

MAX_BLOCK_BYTES = 2 * 1024 * 1024
DEFAULT_TX_LIFETIME = 100
EXPORT_MAGIC = b"BYCH"
EXPORT_VERSION = 1
ZERO_HASH = bytes(32)


class OpTag(enum.IntEnum):
    POL_COMMITMENT = 1
    WITNESS_REPORT = 2
    INCENTIVE_ALLOCATION = 3
    VERIFICATION_REQUEST = 4


@dataclass(frozen=True)
class PoLCommitmentOp:
    commitment: PoLCommitment
    tag = OpTag.POL_COMMITMENT

    def payload(self) -> bytes:
        return self.commitment.to_bytes()


@dataclass(frozen=True)
class WitnessReportOp:
    position: Location
    net_force: tuple[float, float]
    tag = OpTag.WITNESS_REPORT

    @property
    def force_magnitude(self) -> float:
        fx, fy = self.net_force
        return (fx * fx + fy * fy) ** 0.5

    def payload(self) -> bytes:
        return (Writer().raw(self.position.to_bytes()).f64(self.net_force[0])
                .f64(self.net_force[1]).getvalue())


@dataclass(frozen=True)
class IncentiveAllocationOp:
    allocations: tuple[tuple[bytes, float], ...]
    tag = OpTag.INCENTIVE_ALLOCATION

    def payload(self) -> bytes:
        w = Writer().u16(len(self.allocations))
        for addr, amount in self.allocations:
            w.raw(addr, crypto.ADDRESS_SIZE).f64(amount)
        return w.getvalue()


@dataclass(frozen=True)
class VerificationRequestOp:
    request: VerificationRequest
    tag = OpTag.VERIFICATION_REQUEST

    def payload(self) -> bytes:
        return self.request.to_bytes()


Operation = Union[PoLCommitmentOp, WitnessReportOp, IncentiveAllocationOp, VerificationRequestOp]


def encode_op(op: Operation) -> bytes:
    return Writer().u8(op.tag).var(op.payload()).getvalue()


def decode_op(r: Reader) -> Operation:
    tag = r.u8()
    body = Reader(r.var(limit=MAX_BLOCK_BYTES))
    if tag == OpTag.POL_COMMITMENT:
        op = PoLCommitmentOp(PoLCommitment.read(body))
    elif tag == OpTag.WITNESS_REPORT:
        op = WitnessReportOp(Location.from_bytes(body.raw(LOCATION_SIZE)), (body.f64(), body.f64()))
    elif tag == OpTag.INCENTIVE_ALLOCATION:
        count = body.u16()
        op = IncentiveAllocationOp(tuple((body.raw(crypto.ADDRESS_SIZE), body.f64()) for _ in range(count)))
    elif tag == OpTag.VERIFICATION_REQUEST:
        op = VerificationRequestOp(VerificationRequest.read(body))
    else:
        raise DecodeError(f"unknown operation tag {tag}")
    body.done()
    return op


@dataclass(frozen=True)
class Transaction:
    operations: tuple[Operation, ...]
    expiration: int
    signer: bytes
    signature: bytes

    @staticmethod
    def payload_for(operations: Sequence[Operation], expiration: int) -> bytes:
        w = Writer().u16(len(operations))
        for op in operations:
            w.raw(encode_op(op))
        return w.u64(expiration).getvalue()

    @classmethod
    def create(cls, operations: Sequence[Operation], expiration: int, keys: KeyPair) -> "Transaction":
        if not operations:
            raise ValueError("a transaction needs at least one operation")
        ops = tuple(operations)
        sig = keys.sign(cls.payload_for(ops, expiration))
        return cls(ops, expiration, keys.public_key, sig)

    def payload(self) -> bytes:
        return self.payload_for(self.operations, self.expiration)

    def to_bytes(self) -> bytes:
        return self._encoded

    @cached_property
    def _encoded(self) -> bytes:
        # Frozen, so the encoding and id can be memoised on the instance.
        return (Writer().raw(self.payload()).raw(self.signer, PUBKEY_SIZE)
                .raw(self.signature, SIGNATURE_SIZE).getvalue())

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        count = r.u16()
        if count == 0:
            raise DecodeError("transaction without operations")
        ops = tuple(decode_op(r) for _ in range(count))
        return cls(ops, r.u64(), r.raw(PUBKEY_SIZE), r.raw(SIGNATURE_SIZE))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls.read(r)
        r.done()
        return tx

    @cached_property
    def txid(self) -> bytes:
        return crypto.hash(self.to_bytes())

    def signature_valid(self) -> bool:
        return crypto.verify(self.signer, self.payload(), self.signature)

    def commitment_keys(self) -> list[bytes]:
        return [op.commitment.index_key() for op in self.operations if isinstance(op, PoLCommitmentOp)]


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Binary SHA-256 tree; an odd level duplicates its last node."""
    if not leaves:
        return ZERO_HASH
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [crypto.hash(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    producer: bytes
    producer_sig: bytes
    transactions: tuple[Transaction, ...] = ()

    def header_bytes(self) -> bytes:
        return (Writer().u64(self.height).raw(self.prev_hash, 32).raw(self.merkle_root, 32)
                .u64(self.timestamp).raw(self.producer, PUBKEY_SIZE).getvalue())

    @cached_property
    def hash(self) -> bytes:
        return crypto.hash(self.header_bytes())

    def to_bytes(self) -> bytes:
        w = Writer().raw(self.header_bytes()).raw(self.producer_sig, SIGNATURE_SIZE).u32(len(self.transactions))
        for tx in self.transactions:
            w.var(tx.to_bytes())
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        r = Reader(data)
        height, prev, root, ts, producer = r.u64(), r.raw(32), r.raw(32), r.u64(), r.raw(PUBKEY_SIZE)
        sig = r.raw(SIGNATURE_SIZE)
        count = r.u32()
        txs = tuple(Transaction.from_bytes(r.var(limit=MAX_BLOCK_BYTES)) for _ in range(count))
        r.done()
        return cls(height, prev, root, ts, producer, sig, txs)

    @cached_property
    def size(self) -> int:
        return len(self.to_bytes())


BLOCK_OVERHEAD = 8 + 32 + 32 + 8 + PUBKEY_SIZE + SIGNATURE_SIZE + 4


@dataclass(frozen=True)
class ChainConfig:
    genesis_time: int = 1_504_613_700
    block_interval: int = 3
    max_block_bytes: int = MAX_BLOCK_BYTES
    max_commitment_bytes: int = MAX_COMMITMENT_BYTES
    tx_lifetime: int = DEFAULT_TX_LIFETIME
    epoch_blocks: int = 100

    def chain_id(self) -> bytes:
        return crypto.hash(
            Writer().raw(b"bychain").u64(self.genesis_time).u32(self.block_interval)
            .u32(self.max_block_bytes).u32(self.max_commitment_bytes).u32(self.tx_lifetime)
            .u32(self.epoch_blocks).getvalue())

    def slot(self, timestamp: int) -> int:
        return (timestamp - self.genesis_time) // self.block_interval

    def slot_time(self, slot: int) -> int:
        return self.genesis_time + slot * self.block_interval


class TxStatus(enum.Enum):
    ACCEPTED = "accepted"
    BAD_SIG = "bad-sig"
    EXPIRED = "expired"
    REPLAY = "replay"
    OVERSIZE = "oversize"
    INVALID = "invalid"


class BlockStatus(enum.Enum):
    OK = "ok"
    UNKNOWN_PARENT = "unknown-parent"
    BAD_HEADER = "bad-header"
    BAD_MERKLE = "bad-merkle"
    WRONG_PRODUCER = "wrong-producer"
    BAD_SIG = "bad-sig"
    BAD_TX = "bad-tx"
    OVERSIZE = "oversize"


class InvalidBlock(Exception):
    def __init__(self, status: BlockStatus, detail: str = ""):
        super().__init__(f"{status.value}: {detail}" if detail else status.value)
        self.status = status


class InvalidChain(Exception):
    pass


@dataclass(frozen=True)
class Locator:
    block_hash: bytes
    height: int
    tx_index: int
    op_index: int
    commitment: PoLCommitment


@dataclass
class _ChainState:
    """Indexes over one branch (genesis to some head)."""

    commitments: dict[bytes, Locator] = field(default_factory=dict)
    txids: set[bytes] = field(default_factory=set)
    reports: dict[bytes, list[tuple[int, int, WitnessReportOp]]] = field(default_factory=dict)

    def add_block(self, block: Block):
        bh = block.hash
        for ti, tx in enumerate(block.transactions):
            self.txids.add(tx.txid)
            for oi, op in enumerate(tx.operations):
                if isinstance(op, PoLCommitmentOp):
                    self.commitments[op.commitment.index_key()] = Locator(bh, block.height, ti, oi, op.commitment)
                elif isinstance(op, WitnessReportOp):
                    self.reports.setdefault(tx.signer, []).append((block.timestamp, block.height, op))


Schedule = Callable[[int], Union[bytes, None]]


class ChainStore:
    """One node's replica: every known block, the tip, and tip-chain indexes.

    ``schedule(slot)`` names the public key allowed to produce in a slot; a
    ``None`` schedule (or a ``None`` answer) skips that check.  Single writer.
    """

    def __init__(self, config: ChainConfig, schedule: Schedule | None = None):
        self.config = config
        self.schedule = schedule
        self.genesis = genesis_block(config)
        gh = self.genesis.hash
        self.blocks: dict[bytes, Block] = {gh: self.genesis}
        self.children: dict[bytes, list[bytes]] = {gh: []}
        self.tip = gh
        self.state = _ChainState()
        self.orphaned_txs: list[Transaction] = []

    @property
    def tip_block(self) -> Block:
        return self.blocks[self.tip]

    @property
    def height(self) -> int:
        return self.tip_block.height

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self.blocks

    def ancestors(self, block_hash: bytes) -> Iterator[Block]:
        """Walk from ``block_hash`` back to genesis, inclusive."""
        h = block_hash
        while h in self.blocks:
            block = self.blocks[h]
            yield block
            if block.height == 0:
                return
            h = block.prev_hash

    def branch(self, head: bytes | None = None) -> list[Block]:
        return list(self.ancestors(head or self.tip))[::-1]

    def missing_for(self, head: bytes, have: Callable[[bytes], bool]) -> list[Block]:
        """Blocks on ``head``'s branch that ``have`` does not recognise, oldest first."""
        out = []
        for block in self.ancestors(head):
            if have(block.hash):
                break
            out.append(block)
        return out[::-1]

    def depth(self, block_hash: bytes) -> int | None:
        """Confirmations on the tip chain (0 for the tip itself)."""
        block = self.blocks.get(block_hash)
        if block is None:
            return None
        for b in self.ancestors(self.tip):
            if b.height < block.height:
                break
            if b.hash == block_hash:
                return self.height - block.height
        return None

    def _state_for(self, head: bytes) -> _ChainState:
        if head == self.tip:
            return self.state
        st = _ChainState()
        for block in self.branch(head):
            st.add_block(block)
        return st

    def lookup_commitment(self, witness_nonces: Sequence[bytes]) -> Locator | None:
        return self.state.commitments.get(index_key(witness_nonces))

    def witness_positions(self, at_time: int) -> dict[bytes, Location]:
        """Latest on-chain reported position per witness key at or before ``at_time``."""
        out = {}
        for pk, rows in self.state.reports.items():
            i = bisect.bisect_right(rows, at_time, key=lambda row: row[0])
            if i:
                out[pk] = rows[i - 1][2].position
        return out

    def latest_reports(self, since_height: int = 0) -> dict[bytes, WitnessReportOp]:
        out = {}
        for pk, rows in self.state.reports.items():
            if rows and rows[-1][1] >= since_height:
                out[pk] = rows[-1][2]
        return out

    def check_tx(self, tx: Transaction, height: int, state: _ChainState,
                 pending_keys: set[bytes] | None = None, producer: bytes | None = None) -> TxStatus:
        """Rules a transaction must satisfy to enter a block at ``height``."""
        if len(tx.to_bytes()) > self.config.max_block_bytes - BLOCK_OVERHEAD:
            return TxStatus.OVERSIZE
        if not tx.signature_valid():
            return TxStatus.BAD_SIG
        if height > tx.expiration:
            return TxStatus.EXPIRED
        if tx.txid in state.txids:
            return TxStatus.REPLAY
        pending_keys = pending_keys if pending_keys is not None else set()
        local: set[bytes] = set()
        for op in tx.operations:
            if isinstance(op, PoLCommitmentOp):
                key = op.commitment.index_key()
                if key in state.commitments or key in pending_keys or key in local:
                    return TxStatus.REPLAY
                reason = check_commitment(op.commitment, self.config.max_commitment_bytes)
                if reason == "oversize":
                    return TxStatus.OVERSIZE
                if reason is not None or op.commitment.request.pk != tx.signer:
                    return TxStatus.INVALID
                local.add(key)
            elif isinstance(op, IncentiveAllocationOp):
                if producer is None or tx.signer != producer or height % self.config.epoch_blocks:
                    return TxStatus.INVALID
        return TxStatus.ACCEPTED

    def validate_block(self, block: Block) -> BlockStatus:
        parent = self.blocks.get(block.prev_hash)
        if parent is None:
            return BlockStatus.UNKNOWN_PARENT
        cfg = self.config
        if (block.height != parent.height + 1 or block.timestamp <= parent.timestamp
                or (block.timestamp - cfg.genesis_time) % cfg.block_interval):
            return BlockStatus.BAD_HEADER
        if block.size > cfg.max_block_bytes:
            return BlockStatus.OVERSIZE
        if merkle_root([tx.txid for tx in block.transactions]) != block.merkle_root:
            return BlockStatus.BAD_MERKLE
        if self.schedule is not None:
            expected = self.schedule(cfg.slot(block.timestamp))
            if expected is not None and expected != block.producer:
                return BlockStatus.WRONG_PRODUCER
        if not crypto.verify(block.producer, block.header_bytes(), block.producer_sig):
            return BlockStatus.BAD_SIG
        state = self._state_for(parent.hash)
        keys: set[bytes] = set()
        txids: set[bytes] = set()
        allocations = 0
        for tx in block.transactions:
            if tx.txid in txids:
                return BlockStatus.BAD_TX
            if self.check_tx(tx, block.height, state, keys, producer=block.producer) is not TxStatus.ACCEPTED:
                return BlockStatus.BAD_TX
            allocations += sum(isinstance(op, IncentiveAllocationOp) for op in tx.operations)
            keys.update(tx.commitment_keys())
            txids.add(tx.txid)
        if allocations > 1:
            return BlockStatus.BAD_TX
        return BlockStatus.OK

    def append(self, block: Block) -> bool:
        """Store a valid block; returns True when it becomes the new tip.

        Only a strictly longer branch displaces the current tip, so among
        equal-length branches the first one seen wins.
        """
        bh = block.hash
        if bh in self.blocks:
            return False
        status = self.validate_block(block)
        if status is not BlockStatus.OK:
            raise InvalidBlock(status, bh.hex()[:16])
        self.blocks[bh] = block
        self.children.setdefault(bh, [])
        self.children[block.prev_hash].append(bh)
        if block.height <= self.height:
            return False
        old_tip = self.tip
        self.tip = bh
        if block.prev_hash == old_tip:
            self.state.add_block(block)
        else:
            self._reorg(old_tip)
        return True

    def _reorg(self, old_tip: bytes):
        new_branch = {b.hash for b in self.ancestors(self.tip)}
        abandoned = []
        for b in self.ancestors(old_tip):
            if b.hash in new_branch:
                break
            abandoned.append(b)
        log.info("reorg: %d block(s) abandoned, new tip %s", len(abandoned), self.tip.hex()[:16])
        self.state = self._state_for_rebuild()
        for b in reversed(abandoned):
            self.orphaned_txs.extend(
                tx for tx in b.transactions
                if not any(isinstance(op, IncentiveAllocationOp) for op in tx.operations))

    def _state_for_rebuild(self) -> _ChainState:
        st = _ChainState()
        for block in self.branch(self.tip):
            st.add_block(block)
        return st

    def is_final(self, block_hash: bytes, depth: int) -> bool:
        d = self.depth(block_hash)
        return d is not None and d >= depth


def genesis_block(config: ChainConfig) -> Block:
    return Block(0, config.chain_id(), merkle_root([]), config.genesis_time,
                 bytes(PUBKEY_SIZE), bytes(SIGNATURE_SIZE))


def genesis(config: ChainConfig, schedule: Schedule | None = None) -> ChainStore:
    return ChainStore(config, schedule)


class Mempool:
    """Insertion-ordered buffer of transactions waiting for a block."""

    def __init__(self):
        self._txs: OrderedDict[bytes, Transaction] = OrderedDict()
        self._keys: dict[bytes, bytes] = {}

    def __len__(self) -> int:
        return len(self._txs)

    def __iter__(self) -> Iterator[Transaction]:
        return iter(list(self._txs.values()))

    def __contains__(self, txid: bytes) -> bool:
        return txid in self._txs

    def commitment_keys(self) -> set[bytes]:
        return set(self._keys)

    def add(self, tx: Transaction):
        txid = tx.txid
        self._txs[txid] = tx
        for key in tx.commitment_keys():
            self._keys[key] = txid

    def remove(self, txid: bytes):
        tx = self._txs.pop(txid, None)
        if tx is not None:
            for key in tx.commitment_keys():
                self._keys.pop(key, None)

    def prune(self, store: ChainStore):
        """Drop transactions already on the tip chain, expired, or conflicting with it."""
        height = store.height + 1
        for txid, tx in list(self._txs.items()):
            if (txid in store.state.txids or height > tx.expiration
                    or any(k in store.state.commitments for k in tx.commitment_keys())):
                self.remove(txid)


def submit_tx(store: ChainStore, mempool: Mempool, tx: Transaction) -> TxStatus:
    if tx.txid in mempool:
        return TxStatus.REPLAY
    if store.height > tx.expiration:
        return TxStatus.EXPIRED
    if any(isinstance(op, IncentiveAllocationOp) for op in tx.operations):
        return TxStatus.INVALID
    status = store.check_tx(tx, store.height, store.state, mempool.commitment_keys())
    if status is TxStatus.ACCEPTED:
        mempool.add(tx)
    return status


def assemble_block(store: ChainStore, mempool: Mempool, producer_keys: KeyPair, timestamp: int,
                   allocations: Sequence[tuple[bytes, float]] | None = None) -> Block:
    """Build and sign a block on the current tip.

    Transactions are taken greedily in mempool order while the block stays
    under the size cap; anything skipped stays pooled.  An allocation list
    becomes a producer-signed transaction at the front of the block.
    """
    cfg = store.config
    height = store.height + 1
    txs: list[Transaction] = []
    if allocations:
        alloc_tx = Transaction.create([IncentiveAllocationOp(tuple(allocations))],
                                      height + cfg.tx_lifetime, producer_keys)
        txs.append(alloc_tx)
    size = BLOCK_OVERHEAD + sum(4 + len(tx.to_bytes()) for tx in txs)
    keys: set[bytes] = set()
    for tx in mempool:
        status = store.check_tx(tx, height, store.state, keys)
        if status is not TxStatus.ACCEPTED:
            if status in (TxStatus.EXPIRED, TxStatus.REPLAY, TxStatus.BAD_SIG, TxStatus.INVALID):
                mempool.remove(tx.txid)
            continue
        tx_size = 4 + len(tx.to_bytes())
        if size + tx_size > cfg.max_block_bytes:
            continue
        txs.append(tx)
        keys.update(tx.commitment_keys())
        size += tx_size
    root = merkle_root([tx.txid for tx in txs])
    unsigned = Block(height, store.tip, root, timestamp, producer_keys.public_key, b"", tuple(txs))
    sig = producer_keys.sign(unsigned.header_bytes())
    return Block(height, store.tip, root, timestamp, producer_keys.public_key, sig, tuple(txs))


def validate_block(store: ChainStore, block: Block) -> BlockStatus:
    return store.validate_block(block)


def append(store: ChainStore, block: Block) -> bool:
    return store.append(block)


def lookup_commitment(store: ChainStore, witness_nonces: Sequence[bytes]) -> Locator | None:
    return store.lookup_commitment(witness_nonces)


def export_chain(store: ChainStore) -> bytes:
    """Tip chain from genesis as a length-prefixed sequence of canonical blocks."""
    blocks = store.branch()
    w = Writer().raw(EXPORT_MAGIC).u32(EXPORT_VERSION).u32(len(blocks))
    for block in blocks:
        w.var(block.to_bytes())
    return w.getvalue()


def import_chain(data: bytes, config: ChainConfig, schedule: Schedule | None = None) -> ChainStore:
    """Rebuild a store from an export, re-validating every block."""
    try:
        r = Reader(data)
        if r.raw(4) != EXPORT_MAGIC or r.u32() != EXPORT_VERSION:
            raise InvalidChain("not a chain export")
        count = r.u32()
        blocks = [Block.from_bytes(r.var(limit=config.max_block_bytes)) for _ in range(count)]
        r.done()
    except DecodeError as exc:
        raise InvalidChain(f"malformed export: {exc}") from exc
    store = ChainStore(config, schedule)
    if not blocks or blocks[0] != store.genesis:
        raise InvalidChain("genesis block does not match configuration")
    for block in blocks[1:]:
        try:
            if not store.append(block):
                raise InvalidChain(f"block at height {block.height} does not extend the chain")
        except InvalidBlock as exc:
            raise InvalidChain(f"height {block.height}: {exc}") from exc
    return store


def balances(store: ChainStore, block_reward: float = 0.0) -> dict[bytes, float]:
    """Token credit per address on the tip chain.

    Producers earn a flat ``block_reward`` per block; epoch allocations add
    their listed amounts.
    """
    out: dict[bytes, float] = {}
    for block in store.branch()[1:]:
        if block_reward:
            addr = crypto.address(block.producer)
            out[addr] = out.get(addr, 0.0) + block_reward
        for tx in block.transactions:
            for op in tx.operations:
                if isinstance(op, IncentiveAllocationOp):
                    for addr, amount in op.allocations:
                        out[addr] = out.get(addr, 0.0) + amount
    return out
