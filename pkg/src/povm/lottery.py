"""Commit-reveal lottery choosing each block's producer.

Tickets come from accepted PoVM records in an eligibility window, scaled by
reputation. Every node recomputes the same draw from the same reveals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .encoding import DecodeError, Reader, Writer, sha256
from .hashchain import PovmRecord, Verdict

SALT_SIZE = 16


class LotteryError(Exception):
    pass


class BadReveal(LotteryError):
    def __init__(self, miner: int, reason: str = "reveal does not match commitment") -> None:
        super().__init__(f"miner {miner}: {reason}")
        self.miner = miner


class EmptyTable(LotteryError):
    pass


class ProofError(LotteryError):
    """A serialized lottery transcript failed re-verification."""


@dataclass(frozen=True)
class Commitment:
    miner: int
    commit_digest: bytes


@dataclass(frozen=True)
class Reveal:
    miner: int
    seed: int
    salt: bytes


def _commit_digest(seed: int, salt: bytes) -> bytes:
    if len(salt) != SALT_SIZE:
        raise ValueError("salt must be 16 bytes")
    return sha256(Writer().u64(seed).raw(salt).getvalue())


def commit(seed: int, salt: bytes, miner: int = 0) -> Commitment:
    return Commitment(miner, _commit_digest(seed, salt))


def verify_reveal(c: Commitment, seed: int, salt: bytes) -> bool:
    if len(salt) != SALT_SIZE:
        return False
    return _commit_digest(seed, salt) == c.commit_digest


@dataclass
class TicketTable:
    entries: dict[int, int] = field(default_factory=dict)
    window: tuple[int, int] = (0, 0)

    @property
    def total(self) -> int:
        return sum(self.entries.values())

    def without(self, miners: Iterable[int]) -> TicketTable:
        drop = set(miners)
        return TicketTable({m: n for m, n in self.entries.items() if m not in drop}, self.window)


def issue_tickets(records: Iterable[tuple[int, PovmRecord]], window: tuple[int, int],
                  reputation: Mapping[int, float] | None = None) -> TicketTable:
    """Tickets per miner = floor(reputation * accepted records whose tick lies in [start, end)).

    ``records`` pairs each record with the tick its verdict was reached.
    Miners left with zero tickets are omitted.
    """
    start, end = window
    counts: dict[int, int] = {}
    for tick, rec in records:
        if start <= tick < end and rec.verdict == Verdict.ACCEPTED and rec.sla_ok:
            counts[rec.miner] = counts.get(rec.miner, 0) + 1
    entries = {}
    for miner, n in counts.items():
        rep = 1.0 if reputation is None else reputation.get(miner, 1.0)
        tickets = math.floor(rep * n)
        if tickets > 0:
            entries[miner] = tickets
    return TicketTable(dict(sorted(entries.items())), window)


def combine_reveals(reveals: Iterable[Reveal]) -> bytes:
    w = Writer()
    for r in sorted(reveals, key=lambda r: r.miner):
        w.u64(r.miner).u64(r.seed).raw(r.salt)
    return sha256(w.getvalue())


def pick(combined: bytes, tickets: TicketTable) -> int:
    """Map the combined value onto cumulative ticket intervals in ascending miner order."""
    total = tickets.total
    if total <= 0:
        raise EmptyTable("no tickets to draw from")
    point = int.from_bytes(combined, "big") % total
    acc = 0
    for miner in sorted(tickets.entries):
        acc += tickets.entries[miner]
        if point < acc:
            return miner
    raise AssertionError("unreachable: point below total")


def draw_winner(reveals: Sequence[Reveal], commitments: Mapping[int, Commitment], tickets: TicketTable) -> int:
    for r in sorted(reveals, key=lambda r: r.miner):
        c = commitments.get(r.miner)
        if c is None:
            raise BadReveal(r.miner, "no commitment on record")
        if not verify_reveal(c, r.seed, r.salt):
            raise BadReveal(r.miner)
    return pick(combine_reveals(reveals), tickets)


@dataclass
class DrawResult:
    winner: int
    reveals: list[Reveal]
    voided: list[int]
    tickets: TicketTable


def draw_with_voiding(reveals: Sequence[Reveal], commitments: Mapping[int, Commitment],
                      tickets: TicketTable) -> DrawResult:
    """Draw, voiding the tickets of anyone whose reveal is bad or missing.

    Committed miners that never revealed are voided up front; each bad reveal
    is dropped and the draw is recomputed over the remaining tickets.
    """
    revealed = {r.miner for r in reveals}
    voided = sorted(m for m in commitments if m not in revealed)
    live = [r for r in reveals]
    while True:
        table = tickets.without(voided)
        try:
            winner = draw_winner(live, commitments, table)
            return DrawResult(winner, sorted(live, key=lambda r: r.miner), sorted(voided), table)
        except BadReveal as exc:
            voided.append(exc.miner)
            live = [r for r in live if r.miner != exc.miner]


# -- transcript carried in a block --------------------------------------------

@dataclass
class LotteryTranscript:
    round: int
    commitments: list[Commitment]
    reveals: list[Reveal]
    tickets: TicketTable
    voided: list[int]
    winner: int
    bootstrap: bool = False

    def encode(self) -> bytes:
        w = Writer().u64(self.round).u8(1 if self.bootstrap else 0)
        w.u64(self.tickets.window[0]).u64(self.tickets.window[1])
        cs = sorted(self.commitments, key=lambda c: c.miner)
        w.u32(len(cs))
        for c in cs:
            w.u64(c.miner).raw(c.commit_digest)
        rs = sorted(self.reveals, key=lambda r: r.miner)
        w.u32(len(rs))
        for r in rs:
            w.u64(r.miner).u64(r.seed).raw(r.salt)
        w.u32(len(self.tickets.entries))
        for m in sorted(self.tickets.entries):
            w.u64(m).u64(self.tickets.entries[m])
        w.u32(len(self.voided))
        for m in sorted(self.voided):
            w.u64(m)
        w.u64(self.winner)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> LotteryTranscript:
        r = Reader(data)
        rnd = r.u64()
        boot = r.u8()
        if boot not in (0, 1):
            raise DecodeError("bad bootstrap flag")
        window = (r.u64(), r.u64())
        cs = [Commitment(r.u64(), r.raw(32)) for _ in range(r.u32())]
        rs = [Reveal(r.u64(), r.u64(), r.raw(SALT_SIZE)) for _ in range(r.u32())]
        entries = {}
        for _ in range(r.u32()):
            m, n = r.u64(), r.u64()
            entries[m] = n
        voided = [r.u64() for _ in range(r.u32())]
        winner = r.u64()
        r.expect_end()
        return cls(rnd, cs, rs, TicketTable(entries, window), voided, winner, bool(boot))


def verify_lottery_proof(proof: bytes, producer: int) -> LotteryTranscript:
    """Re-run the draw recorded in ``proof`` and check it names ``producer``."""
    try:
        t = LotteryTranscript.decode(proof)
    except (DecodeError, ValueError) as exc:
        raise ProofError(f"undecodable transcript: {exc}") from exc
    commitments = {c.miner: c for c in t.commitments}
    if len(commitments) != len(t.commitments):
        raise ProofError("duplicate commitment")
    revealed = {r.miner for r in t.reveals}
    if len(revealed) != len(t.reveals):
        raise ProofError("duplicate reveal")
    if set(t.voided) & revealed:
        raise ProofError("voided miner also revealed")
    if (set(commitments) - revealed) - set(t.voided):
        raise ProofError("silent committer not voided")
    if any(m in t.tickets.entries for m in t.voided):
        raise ProofError("voided miner still holds tickets")
    if any(n <= 0 for n in t.tickets.entries.values()):
        raise ProofError("zero ticket entry")
    if t.bootstrap and any(n != 1 for n in t.tickets.entries.values()):
        raise ProofError("bootstrap tables hold one ticket per revealer")
    try:
        winner = draw_winner(t.reveals, commitments, t.tickets)
    except LotteryError as exc:
        raise ProofError(str(exc)) from exc
    if winner != t.winner or winner != producer:
        raise ProofError(f"draw names {winner}, block names {producer}")
    return t
