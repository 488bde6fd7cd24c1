"""Digest-linked blocks, chain validation and tip-level fork resolution."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

from .encoding import ZERO_DIGEST, DecodeError, Reader, Writer, sha256

log = logging.getLogger(__name__)

Digest = bytes
NONCE_SIZE = 8
GENESIS_SENTINEL = ZERO_DIGEST

CHAIN_MAGIC = b"POVMCHN1"


class ChainError(Exception):
    """Base class for rejected appends."""


class WrongParent(ChainError):
    pass


class WrongHeight(ChainError):
    pass


class DuplicateTransaction(ChainError):
    pass


class DuplicateRecord(ChainError):
    """The same (job, miner) PoVM record already sits in the chain."""


class OrphanExtension(ChainError):
    """An extension whose parent is not one of the competing heads."""


class ChainMode(enum.IntEnum):
    HASHCASH = 0
    POVM = 1


class Verdict(enum.IntEnum):
    REJECTED = 0
    ACCEPTED = 1


@dataclass(frozen=True)
class Transaction:
    id: int
    payer: int
    payee: int
    amount: int
    timestamp: int

    def __post_init__(self) -> None:
        if self.amount < 0:
            raise ValueError("amount must be non-negative")


class Mempool:
    """Pending transactions kept sorted by (timestamp, id)."""

    def __init__(self, txs: Iterable[Transaction] = ()) -> None:
        self._by_id: dict[int, Transaction] = {}
        for tx in txs:
            self.add(tx)

    def add(self, tx: Transaction) -> bool:
        if tx.id in self._by_id:
            return False
        self._by_id[tx.id] = tx
        return True

    def discard(self, ids: Iterable[int]) -> None:
        for i in ids:
            self._by_id.pop(i, None)

    @property
    def pending(self) -> list[Transaction]:
        return sorted(self._by_id.values(), key=lambda t: (t.timestamp, t.id))

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, tx_id: int) -> bool:
        return tx_id in self._by_id


def quorum(votes_total: int) -> int:
    return (votes_total + 1) // 2


@dataclass(frozen=True)
class PovmRecord:
    job_id: int
    miner: int
    result_digest: Digest
    checkpoint_root: Digest
    verdict: Verdict
    votes_for: int
    votes_total: int
    sla_ok: bool

    def is_consistent(self) -> bool:
        """Quorum rule: accepted exactly when the miner's answer reached quorum and it kept the SLA."""
        if self.votes_total < 1 or self.votes_total % 2 == 0:
            return False
        if not 0 <= self.votes_for <= self.votes_total:
            return False
        if len(self.result_digest) != 32 or len(self.checkpoint_root) != 32:
            return False
        expected = self.votes_for >= quorum(self.votes_total) and self.sla_ok
        return (self.verdict == Verdict.ACCEPTED) == expected


@dataclass(frozen=True)
class Block:
    height: int
    prev_digest: Digest
    producer: int
    timestamp: int
    transactions: tuple[Transaction, ...] = ()
    povm_records: tuple[PovmRecord, ...] = ()
    # exactly one of these is set: nonce in hashcash mode, lottery_proof in PoVM mode
    nonce: bytes | None = None
    lottery_proof: bytes | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "transactions", tuple(self.transactions))
        object.__setattr__(self, "povm_records", tuple(self.povm_records))
        if (self.nonce is None) == (self.lottery_proof is None):
            raise ValueError("block needs exactly one of nonce / lottery_proof")
        if self.nonce is not None and len(self.nonce) != NONCE_SIZE:
            raise ValueError("nonce must be 8 bytes")
        if len(self.prev_digest) != 32:
            raise ValueError("prev_digest must be 32 bytes")

    @property
    def mode(self) -> ChainMode:
        return ChainMode.HASHCASH if self.nonce is not None else ChainMode.POVM


# -- canonical serialization -------------------------------------------------

def _write_tx(w: Writer, tx: Transaction) -> None:
    w.u64(tx.id).u64(tx.payer).u64(tx.payee).u64(tx.amount).u64(tx.timestamp)


def _read_tx(r: Reader) -> Transaction:
    return Transaction(id=r.u64(), payer=r.u64(), payee=r.u64(), amount=r.u64(), timestamp=r.u64())


def _write_record(w: Writer, rec: PovmRecord) -> None:
    w.u64(rec.job_id).u64(rec.miner).raw(rec.result_digest).raw(rec.checkpoint_root)
    w.u8(int(rec.verdict)).u32(rec.votes_for).u32(rec.votes_total).u8(1 if rec.sla_ok else 0)


def _read_record(r: Reader) -> PovmRecord:
    job_id, miner = r.u64(), r.u64()
    result_digest, checkpoint_root = r.raw(32), r.raw(32)
    verdict = r.u8()
    if verdict not in (0, 1):
        raise DecodeError(f"bad verdict byte {verdict}")
    votes_for, votes_total = r.u32(), r.u32()
    sla = r.u8()
    if sla not in (0, 1):
        raise DecodeError(f"bad sla byte {sla}")
    return PovmRecord(job_id, miner, result_digest, checkpoint_root, Verdict(verdict),
                      votes_for, votes_total, bool(sla))


def header_bytes(block: Block) -> bytes:
    """Everything except the trailing nonce; hashcash mines over this prefix."""
    w = Writer()
    w.u64(block.height).raw(block.prev_digest).u64(block.producer).u64(block.timestamp)
    w.u32(len(block.transactions))
    for tx in block.transactions:
        _write_tx(w, tx)
    w.u32(len(block.povm_records))
    for rec in block.povm_records:
        _write_record(w, rec)
    w.u8(int(block.mode))
    if block.lottery_proof is not None:
        w.blob(block.lottery_proof)
    return w.getvalue()


def serialize_block(block: Block) -> bytes:
    if block.nonce is not None:
        return header_bytes(block) + block.nonce
    return header_bytes(block)


def _read_block(r: Reader) -> Block:
    height = r.u64()
    prev = r.raw(32)
    producer, timestamp = r.u64(), r.u64()
    txs = tuple(_read_tx(r) for _ in range(r.u32()))
    recs = tuple(_read_record(r) for _ in range(r.u32()))
    tag = r.u8()
    if tag == ChainMode.HASHCASH:
        return Block(height, prev, producer, timestamp, txs, recs, nonce=r.raw(NONCE_SIZE))
    if tag == ChainMode.POVM:
        return Block(height, prev, producer, timestamp, txs, recs, lottery_proof=r.blob())
    raise DecodeError(f"bad proof tag {tag}")


def deserialize_block(data: bytes) -> Block:
    r = Reader(data)
    try:
        block = _read_block(r)
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc
    r.expect_end()
    return block


def digest_block(block: Block) -> Digest:
    return sha256(serialize_block(block))


def genesis_block(mode: ChainMode = ChainMode.POVM) -> Block:
    if mode == ChainMode.HASHCASH:
        return Block(0, GENESIS_SENTINEL, 0, 0, nonce=bytes(NONCE_SIZE))
    return Block(0, GENESIS_SENTINEL, 0, 0, lottery_proof=b"")


# -- chain -------------------------------------------------------------------

@dataclass
class ValidationReport:
    valid: bool
    first_invalid: int | None = None
    reason: str = ""
    bad_records: list[tuple[int, int]] = field(default_factory=list)

    def __str__(self) -> str:
        if self.valid:
            return "Valid"
        return f"Invalid at height {self.first_invalid}: {self.reason}"


class Chain:
    """A linear chain rooted at a genesis block.

    ``head_digest`` is the digest of the tip as recorded when it was appended,
    so tampering with the tip itself is also caught by ``validate``.
    """

    def __init__(self, genesis: Block | None = None, *, mode: ChainMode | None = None,
                 difficulty: int = 0) -> None:
        if genesis is None:
            genesis = genesis_block(mode if mode is not None else ChainMode.POVM)
        if genesis.height != 0:
            raise WrongHeight("genesis must have height 0")
        if genesis.prev_digest != GENESIS_SENTINEL:
            raise WrongParent("genesis must point at the all-zero sentinel")
        self.mode = genesis.mode
        self.difficulty = difficulty
        self.blocks: list[Block] = [genesis]
        self.digests: list[Digest] = [digest_block(genesis)]
        self._tx_ids = {tx.id for tx in genesis.transactions}
        self._record_keys = {(r.job_id, r.miner) for r in genesis.povm_records}

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def head_digest(self) -> Digest:
        return self.digests[-1]

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def contains_tx(self, tx_id: int) -> bool:
        return tx_id in self._tx_ids

    def job_ids(self) -> set[int]:
        return {job for job, _ in self._record_keys}

    def append(self, block: Block) -> Chain:
        if block.prev_digest != self.head_digest:
            raise WrongParent(f"block {block.height} does not extend tip {self.head_digest.hex()[:16]}")
        if block.height != self.tip.height + 1:
            raise WrongHeight(f"expected height {self.tip.height + 1}, got {block.height}")
        ids = [tx.id for tx in block.transactions]
        if len(set(ids)) != len(ids) or self._tx_ids.intersection(ids):
            raise DuplicateTransaction(f"duplicate transaction in block {block.height}")
        keys = [(r.job_id, r.miner) for r in block.povm_records]
        if len(set(keys)) != len(keys) or self._record_keys.intersection(keys):
            raise DuplicateRecord(f"duplicate PoVM record in block {block.height}")
        self.blocks.append(block)
        self.digests.append(digest_block(block))
        self._tx_ids.update(ids)
        self._record_keys.update(keys)
        return self

    def truncate(self, height: int) -> None:
        """Drop every block above ``height``."""
        if height < 0:
            raise WrongHeight("cannot truncate below genesis")
        for block in self.blocks[height + 1:]:
            self._tx_ids.difference_update(tx.id for tx in block.transactions)
            self._record_keys.difference_update((r.job_id, r.miner) for r in block.povm_records)
        del self.blocks[height + 1:]
        del self.digests[height + 1:]

    def copy(self) -> Chain:
        other = Chain.__new__(Chain)
        other.mode = self.mode
        other.difficulty = self.difficulty
        other.blocks = list(self.blocks)
        other.digests = list(self.digests)
        other._tx_ids = set(self._tx_ids)
        other._record_keys = set(self._record_keys)
        return other

    def validate(self) -> ValidationReport:
        return validate_chain(self)

    # -- file formats --

    def dumps(self) -> bytes:
        w = Writer().raw(CHAIN_MAGIC).u8(int(self.mode)).u8(self.difficulty).u32(len(self.blocks))
        for block in self.blocks:
            w.blob(serialize_block(block))
        w.raw(self.head_digest)
        return w.getvalue()

    @classmethod
    def loads(cls, data: bytes) -> Chain:
        """Parse a binary dump without validating links; use ``validate`` afterwards."""
        r = Reader(data)
        if r.raw(len(CHAIN_MAGIC)) != CHAIN_MAGIC:
            raise DecodeError("not a chain file")
        mode = r.u8()
        if mode not in (0, 1):
            raise DecodeError(f"bad chain mode {mode}")
        difficulty = r.u8()
        count = r.u32()
        if count < 1:
            raise DecodeError("chain has no genesis")
        blocks = [deserialize_block(r.blob()) for _ in range(count)]
        head = r.raw(32)
        r.expect_end()
        chain = cls.__new__(cls)
        chain.mode = ChainMode(mode)
        chain.difficulty = difficulty
        chain.blocks = blocks
        chain.digests = [digest_block(b) for b in blocks[:-1]] + [head]
        chain._tx_ids = {tx.id for b in blocks for tx in b.transactions}
        chain._record_keys = {(rec.job_id, rec.miner) for b in blocks for rec in b.povm_records}
        return chain

    def to_json(self) -> dict:
        return {
            "mode": self.mode.name.lower(),
            "difficulty": self.difficulty,
            "height": self.height,
            "head_digest": self.head_digest.hex(),
            "blocks": [block_to_json(b) for b in self.blocks],
        }

    def dump_json(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def block_to_json(block: Block) -> dict:
    out = {
        "height": block.height,
        "digest": digest_block(block).hex(),
        "prev_digest": block.prev_digest.hex(),
        "producer": block.producer,
        "timestamp": block.timestamp,
        "transactions": [
            {"id": t.id, "payer": t.payer, "payee": t.payee, "amount": t.amount, "timestamp": t.timestamp}
            for t in block.transactions
        ],
        "povm_records": [
            {
                "job_id": r.job_id,
                "miner": r.miner,
                "result_digest": r.result_digest.hex(),
                "checkpoint_root": r.checkpoint_root.hex(),
                "verdict": r.verdict.name.lower(),
                "votes_for": r.votes_for,
                "votes_total": r.votes_total,
                "sla_ok": r.sla_ok,
            }
            for r in block.povm_records
        ],
    }
    if block.nonce is not None:
        out["nonce"] = block.nonce.hex()
    else:
        out["lottery_proof"] = block.lottery_proof.hex()
    return out


def append_block(chain: Chain, block: Block) -> Chain:
    return chain.append(block)


def _check_proof(chain: Chain, block: Block) -> str | None:
    if block.mode != chain.mode:
        return "block proof kind does not match chain mode"
    if block.height == 0:
        return None
    if chain.mode == ChainMode.HASHCASH:
        from .hashcash import Difficulty, meets_target

        if not meets_target(digest_block(block), Difficulty(chain.difficulty)):
            return "nonce does not meet difficulty"
        return None
    from .lottery import ProofError, verify_lottery_proof

    try:
        verify_lottery_proof(block.lottery_proof, block.producer)
    except ProofError as exc:
        return f"lottery proof: {exc}"
    return None


def validate_chain(chain: Chain) -> ValidationReport:
    """Re-derive every link, proof and record invariant.

    The first failing height is reported. A block whose content no longer
    matches the digest its successor committed to is reported at its own
    height; when two consecutive links break, the block between them (whose
    prev_digest was altered along with its digest) is the one reported.
    """
    report = ValidationReport(valid=True)
    seen_tx: set[int] = set()
    seen_rec: set[tuple[int, int]] = set()
    blocks = chain.blocks
    digests = [digest_block(b) for b in blocks]
    committed = [b.prev_digest for b in blocks[1:]] + [chain.head_digest]
    broken = [d != c for d, c in zip(digests, committed)]

    def fail(i: int, reason: str) -> None:
        if report.valid:
            report.valid = False
            report.first_invalid = i
            report.reason = reason

    for i, block in enumerate(blocks):
        for j, rec in enumerate(block.povm_records):
            if not rec.is_consistent():
                report.bad_records.append((i, j))
        if not report.valid:
            continue
        if block.height != i:
            fail(i, f"height field {block.height} at position {i}")
            continue
        if i == 0 and block.prev_digest != GENESIS_SENTINEL:
            fail(i, "genesis does not point at the zero sentinel")
            continue
        if report.bad_records and report.bad_records[-1][0] == i:
            fail(i, "PoVM record violates the quorum rule")
            continue
        ids = [tx.id for tx in block.transactions]
        if len(set(ids)) != len(ids) or seen_tx.intersection(ids):
            fail(i, "duplicate transaction id")
            continue
        seen_tx.update(ids)
        keys = [(r.job_id, r.miner) for r in block.povm_records]
        if len(set(keys)) != len(keys) or seen_rec.intersection(keys):
            fail(i, "duplicate PoVM record")
            continue
        seen_rec.update(keys)
        problem = _check_proof(chain, block)
        if problem:
            fail(i, problem)
            continue
        if i > 0 and block.prev_digest != digests[i - 1]:
            fail(i, "prev_digest does not match the parent block")
            continue
        if broken[i] and not (i + 1 < len(blocks) and broken[i + 1]):
            fail(i, "digest does not match the committed link")
    return report


# -- forks ---------------------------------------------------------------------

@dataclass
class ForkSet:
    """Competing tips at one height, waiting for the next round to pick a winner."""

    heads: list[Block]
    winner: Digest | None = None
    abandoned: list[Block] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.heads:
            raise ValueError("fork set needs at least one head")
        if len({h.height for h in self.heads}) != 1:
            raise ValueError("fork heads must share a height")

    @property
    def height(self) -> int:
        return self.heads[0].height


def resolve_fork(forks: ForkSet, extension: Block) -> Digest:
    """The head that ``extension`` builds on wins; the rest are marked abandoned."""
    by_digest = {digest_block(h): h for h in forks.heads}
    if extension.prev_digest not in by_digest:
        raise OrphanExtension("extension does not build on any competing head")
    forks.winner = extension.prev_digest
    forks.abandoned = [h for d, h in by_digest.items() if d != forks.winner]
    return forks.winner


class ChainView:
    """One node's view: canonical chain, competing tips and an orphan buffer.

    Abandoned heads stay addressable for one more height so a late extension
    of one of them can still compete at the next height; then they are dropped.
    """

    def __init__(self, chain: Chain) -> None:
        self.chain = chain
        self.store: dict[Digest, Block] = dict(zip(chain.digests, chain.blocks))
        self.heads: dict[Digest, Block] = {chain.head_digest: chain.tip}
        self.abandoned: dict[Digest, Block] = {}
        self.orphans: dict[Digest, list[Block]] = {}
        self.forks_seen = 0
        self.reorgs = 0

    @property
    def tip(self) -> Block:
        return self.chain.tip

    def _canonical_at(self, digest: Digest, height: int) -> bool:
        return height <= self.chain.height and self.chain.digests[height] == digest

    def _reorg_to(self, head_digest: Digest) -> None:
        path: list[Block] = []
        cur = head_digest
        while not self._canonical_at(cur, self.store[cur].height):
            block = self.store[cur]
            path.append(block)
            cur = block.prev_digest
        base = self.store[cur].height
        for displaced, block in zip(self.chain.digests[base + 1:], self.chain.blocks[base + 1:]):
            self.abandoned[displaced] = block
        self.chain.truncate(base)
        for block in reversed(path):
            self.chain.append(block)
            self.abandoned.pop(self.chain.head_digest, None)
        self.reorgs += 1

    def _prune(self) -> None:
        h = self.chain.height
        for d in [d for d, b in self.abandoned.items() if b.height + 1 < h]:
            del self.abandoned[d]
        keep = set(self.chain.digests)
        for d in list(self.heads) + list(self.abandoned):
            while d not in keep and d in self.store:
                keep.add(d)
                d = self.store[d].prev_digest
        self.store = {d: b for d, b in self.store.items() if d in keep}

    def receive(self, block: Block) -> str:
        d = digest_block(block)
        if d in self.store:
            return "duplicate"
        parent = self.store.get(block.prev_digest)
        if parent is None:
            self.orphans.setdefault(block.prev_digest, []).append(block)
            return "orphan"
        if parent.height + 1 != block.height:
            return "stale"
        if block.prev_digest in self.heads:
            forks = ForkSet(list(self.heads.values()))
            winner = resolve_fork(forks, block)
            if winner != self.chain.head_digest:
                self._reorg_to(winner)
            try:
                self.chain.append(block)
            except ChainError as exc:
                log.debug("rejecting block %d: %s", block.height, exc)
                return "invalid"
            for h in forks.abandoned:
                self.abandoned[digest_block(h)] = h
            self.store[d] = block
            self.heads = {d: block}
            self._prune()
            status = "extended"
        elif block.height == self.chain.height and (
            block.prev_digest in self.abandoned or self._canonical_at(block.prev_digest, parent.height)
        ):
            self.store[d] = block
            self.heads[d] = block
            self.forks_seen += 1
            status = "fork"
        else:
            return "stale"
        for child in self.orphans.pop(d, []):
            self.receive(child)
        return status
