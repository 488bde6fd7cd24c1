import hashlib
import struct
from collections import Counter

import pytest

from povm.hashchain import PovmRecord, Verdict
from povm.lottery import (
    BadReveal, EmptyTable, LotteryTranscript, ProofError, Reveal, TicketTable, combine_reveals, commit,
    draw_winner, draw_with_voiding, issue_tickets, pick, verify_lottery_proof, verify_reveal,
)

SALT0 = bytes(16)


def salt(i):
    return bytes([i]) * 16


def setup(miners, seeds=None):
    seeds = seeds or {m: m * 1000 + 7 for m in miners}
    commitments = {m: commit(seeds[m], salt(m), m) for m in miners}
    reveals = [Reveal(m, seeds[m], salt(m)) for m in miners]
    return commitments, reveals


def oracle_winner(reveals, tickets):
    blob = b"".join(struct.pack("<QQ", r.miner, r.seed) + r.salt for r in sorted(reveals, key=lambda r: r.miner))
    point = int(hashlib.sha256(blob).hexdigest(), 16) % sum(tickets.values())
    for m in sorted(tickets):
        if point < tickets[m]:
            return m
        point -= tickets[m]


def test_commit_fixture():
    assert hashlib.sha256(struct.pack("<Q", 1) + SALT0).hexdigest() == \
        "32edb6022c0921d99aa347e9cda5dc2db413f5574eebaaa8592234308ffebd2b"
    assert commit(1, SALT0).commit_digest.hex() == "32edb6022c0921d99aa347e9cda5dc2db413f5574eebaaa8592234308ffebd2b"


def test_verify_reveal():
    c = commit(5, salt(1))
    assert verify_reveal(c, 5, salt(1))
    assert not verify_reveal(c, 6, salt(1))
    assert not verify_reveal(c, 5, salt(2))
    assert not verify_reveal(c, 5, b"short")


def test_draw_matches_oracle():
    for n in range(2, 9):
        miners = list(range(1, n + 1))
        commitments, reveals = setup(miners, {m: m * 31 + n for m in miners})
        tickets = {m: m % 3 + 1 for m in miners}
        assert draw_winner(reveals, commitments, TicketTable(tickets)) == oracle_winner(reveals, tickets)


def test_combined_value_independent_of_reveal_order():
    _, reveals = setup([1, 2, 3])
    assert combine_reveals(reveals) == combine_reveals(list(reversed(reveals)))


def test_pick_intervals():
    table = TicketTable({2: 3, 5: 1, 9: 2})
    picks = [pick(i.to_bytes(32, "big"), table) for i in range(6)]
    assert picks == [2, 2, 2, 5, 9, 9]
    with pytest.raises(EmptyTable):
        pick(bytes(32), TicketTable())


def test_draw_is_roughly_proportional_to_tickets():
    table = TicketTable({1: 1, 2: 3})
    wins = Counter(pick(hashlib.sha256(str(i).encode()).digest(), table) for i in range(4000))
    assert abs(wins[2] / 4000 - 0.75) < 0.04


def test_bad_reveal_raises():
    commitments, reveals = setup([1, 2, 3])
    reveals[1] = Reveal(2, reveals[1].seed + 1, reveals[1].salt)
    with pytest.raises(BadReveal) as info:
        draw_winner(reveals, commitments, TicketTable({1: 1, 2: 1, 3: 1}))
    assert info.value.miner == 2


def test_uncommitted_reveal_raises():
    commitments, reveals = setup([1, 2])
    reveals.append(Reveal(3, 1, salt(3)))
    with pytest.raises(BadReveal):
        draw_winner(reveals, commitments, TicketTable({1: 1, 2: 1}))


def test_voiding_recomputes_without_cheater_and_silent():
    commitments, reveals = setup([1, 2, 3, 4])
    reveals[1] = Reveal(2, 0, salt(2))      # bad reveal
    reveals = [r for r in reveals if r.miner != 4]  # silent
    tickets = TicketTable({1: 2, 2: 5, 3: 1, 4: 9})
    res = draw_with_voiding(reveals, commitments, tickets)
    assert res.voided == [2, 4]
    assert res.tickets.entries == {1: 2, 3: 1}
    assert res.winner == oracle_winner([r for r in reveals if r.miner != 2], {1: 2, 3: 1})


def test_issue_tickets():
    def rec(miner, verdict=Verdict.ACCEPTED, sla=True):
        return PovmRecord(1, miner, bytes(32), bytes(32), verdict, 3 if verdict == Verdict.ACCEPTED else 0, 3, sla)

    records = [(5, rec(1)), (15, rec(1)), (50, rec(1)), (99, rec(1)), (100, rec(1)),
               (10, rec(2)), (20, rec(2, Verdict.REJECTED)), (30, rec(3)), (40, rec(3)), (60, rec(4))]
    table = issue_tickets(records, (0, 100), {1: 1.0, 2: 0.9, 3: 0.5, 4: 0.0})
    assert table.entries == {1: 4, 3: 1}
    assert table.total == 5
    assert issue_tickets(records, (0, 100)).entries == {1: 4, 2: 1, 3: 2, 4: 1}
    assert issue_tickets(records, (200, 300)).total == 0


def transcript(miners=(1, 2, 3), tickets=None, bootstrap=False):
    commitments, reveals = setup(list(miners))
    table = TicketTable(tickets or {m: 1 for m in miners}, (0, 100))
    winner = draw_winner(reveals, commitments, table)
    return LotteryTranscript(7, list(commitments.values()), reveals, table, [], winner, bootstrap)


def test_transcript_round_trip_and_verify():
    t = transcript(tickets={1: 3, 2: 1, 3: 2})
    assert LotteryTranscript.decode(t.encode()) == t
    assert verify_lottery_proof(t.encode(), t.winner) == t


def test_transcript_rejects_wrong_producer():
    t = transcript()
    with pytest.raises(ProofError):
        verify_lottery_proof(t.encode(), t.winner % 3 + 1)


def test_transcript_rejects_tampering():
    t = transcript(tickets={1: 3, 2: 1, 3: 2})
    t.reveals[0] = Reveal(t.reveals[0].miner, 12345, t.reveals[0].salt)
    with pytest.raises(ProofError):
        verify_lottery_proof(t.encode(), t.winner)
    with pytest.raises(ProofError):
        verify_lottery_proof(b"\x00\x01", 1)


def test_bootstrap_transcript_needs_unit_tickets():
    t = transcript(tickets={1: 2, 2: 1, 3: 1}, bootstrap=True)
    with pytest.raises(ProofError):
        verify_lottery_proof(t.encode(), t.winner)
    t = transcript(bootstrap=True)
    assert verify_lottery_proof(t.encode(), t.winner).bootstrap


def test_silent_committer_must_be_voided():
    t = transcript()
    silent = t.reveals.pop()
    t.tickets = t.tickets.without([silent.miner])
    t.winner = draw_winner(t.reveals, {c.miner: c for c in t.commitments}, t.tickets)
    with pytest.raises(ProofError):
        verify_lottery_proof(t.encode(), t.winner)
    t.voided = [silent.miner]
    verify_lottery_proof(t.encode(), t.winner)


def test_all_ticket_holders_voided_leaves_empty_table():
    commitments, reveals = setup([1, 2, 3])
    with pytest.raises(EmptyTable):
        draw_with_voiding([r for r in reveals if r.miner != 1], commitments, TicketTable({1: 4}))
