import random

import pytest

from povm.hashchain import Block, Chain, PovmRecord, Transaction, Verdict
from povm.lottery import LotteryTranscript, Reveal, TicketTable, commit, draw_winner


def make_record(rng: random.Random, job_id: int, miner: int, k: int = 3) -> PovmRecord:
    votes_for = rng.randint(0, k)
    sla_ok = rng.random() < 0.9
    accepted = sla_ok and votes_for >= (k + 1) // 2
    return PovmRecord(job_id, miner, rng.randbytes(32), rng.randbytes(32),
                      Verdict.ACCEPTED if accepted else Verdict.REJECTED, votes_for, k, sla_ok)


def random_chain(seed: int, length: int = 10) -> Chain:
    """A PoVM-mode chain of ``length`` blocks past genesis with bootstrap lottery proofs."""
    rng = random.Random(seed)
    chain = Chain()
    tx_id = 1
    for h in range(1, length + 1):
        txs = []
        for _ in range(rng.randint(0, 4)):
            txs.append(Transaction(tx_id, rng.randint(1, 9), rng.randint(1, 9), rng.randint(0, 1000), h * 10))
            tx_id += 1
        recs = [make_record(rng, h * 100 + j, m) for j in range(rng.randint(0, 2)) for m in (1, 2, 3)]
        miners = sorted(rng.sample(range(1, 8), 3))
        seeds = {m: rng.getrandbits(64) for m in miners}
        salts = {m: rng.randbytes(16) for m in miners}
        commits = [commit(seeds[m], salts[m], m) for m in miners]
        reveals = [Reveal(m, seeds[m], salts[m]) for m in miners]
        table = TicketTable({m: 1 for m in miners})
        winner = draw_winner(reveals, {c.miner: c for c in commits}, table)
        proof = LotteryTranscript(h, commits, reveals, table, [], winner, bootstrap=True).encode()
        chain.append(Block(h, chain.head_digest, winner, h * 10, tuple(txs), tuple(recs), lottery_proof=proof))
    return chain


@pytest.fixture
def chain10():
    return random_chain(1, 10)
