"""k-vote traditional redundancy: clone assignment, voting, checkpoint comparison, reputation, tau."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

from .hashchain import quorum
from .jobvm import ExecutionTrace, Job
from .rng import SplitMix64

Number = Union[int, Fraction]

ALPHA = 0.1
BETA = 0.5


class RedundancyError(ValueError):
    pass


class InsufficientMiners(RedundancyError):
    pass


class EvenK(RedundancyError):
    pass


class Empty(RedundancyError):
    pass


class TooFewTraces(RedundancyError):
    pass


@dataclass(frozen=True)
class CloneAssignment:
    job_id: int
    miners: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.miners)


def assign_clones(job: Job, available_miners: Iterable[int], k: int, rng: SplitMix64) -> CloneAssignment:
    """Pick ``k`` distinct miners, never the job's own customer."""
    if k < 1 or k % 2 == 0:
        raise EvenK(f"k must be odd and positive, got {k}")
    pool = sorted(set(available_miners) - {job.customer})
    if len(pool) < k:
        raise InsufficientMiners(f"need {k} miners, have {len(pool)}")
    return CloneAssignment(job.id, tuple(rng.sample(pool, k)))


@dataclass(frozen=True)
class Verdict:
    accepted_output: int | None
    votes_for: int
    votes_total: int
    dissenting_miners: frozenset[int] = frozenset()
    checkpoint_divergence_index: int | None = None

    @property
    def accepted(self) -> bool:
        return self.accepted_output is not None


def majority_vote(results: Sequence[tuple[int, int | None]]) -> Verdict:
    """Accept the output holding at least (k+1)/2 of the k votes.

    ``None`` stands for a clone that produced no answer; it is counted in
    the total but can never be accepted.
    """
    if not results:
        raise Empty("no results to vote on")
    k = len(results)
    if k % 2 == 0:
        raise EvenK(f"vote needs an odd number of clones, got {k}")
    tally = Counter(out for _, out in results if out is not None)
    if tally:
        best, votes = max(tally.items(), key=lambda kv: (kv[1], -kv[0]))
    else:
        best, votes = None, 0
    if best is None or votes < quorum(k):
        return Verdict(None, votes, k, frozenset())
    dissent = frozenset(m for m, out in results if out != best)
    return Verdict(best, votes, k, dissent)


def compare_checkpoints(traces: Sequence[ExecutionTrace]) -> int | None:
    """Earliest checkpoint index where any two traces differ; a shorter sequence diverges at its end."""
    if len(traces) < 2:
        raise TooFewTraces("need at least two traces")
    seqs = [t.checkpoints for t in traces]
    shortest = min(len(s) for s in seqs)
    for i in range(shortest):
        first = seqs[0][i]
        if any(s[i] != first for s in seqs[1:]):
            return i
    if any(len(s) != shortest for s in seqs):
        return shortest
    return None


class Outcome(enum.Enum):
    AGREED = "agreed"
    DISSENTED = "dissented"
    SLA_VIOLATED = "sla_violated"


@dataclass(frozen=True)
class Reputation:
    score: float = 1.0

    def __post_init__(self) -> None:
        if not 0 <= self.score <= 1:
            raise ValueError("reputation must lie in [0, 1]")

    def __float__(self) -> float:
        return float(self.score)


def update_reputation(r: Reputation, outcome: Outcome, alpha: float = ALPHA, beta: float = BETA) -> Reputation:
    """Agreement pulls the score toward 1 by ``alpha``; dissent or SLA breach scales it by 1 - ``beta``."""
    s = r.score
    if outcome is Outcome.AGREED:
        s = s + alpha * (1.0 - s)
    else:
        s = s * (1.0 - beta)
    return Reputation(min(1.0, max(0.0, s)))


def clone_outcomes(traces: dict[int, ExecutionTrace], verdict: Verdict,
                   reported_outputs: dict[int, int | None] | None = None) -> dict[int, Outcome]:
    """Classify every clone after a vote.

    Clones that broke their SLA are SlaViolated. Among the rest, those whose
    output lost the vote, or whose checkpoints differ from the most common
    sequence among the winners, are Dissented. A vote without quorum
    classifies only SLA breaches.
    """
    outputs = reported_outputs or {m: t.output for m, t in traces.items()}
    out: dict[int, Outcome] = {}
    for m, t in traces.items():
        if not t.completed:
            out[m] = Outcome.SLA_VIOLATED
    if not verdict.accepted:
        return out
    winners = [m for m in traces if m not in out and outputs[m] == verdict.accepted_output]
    common = Counter(traces[m].checkpoints for m in winners).most_common()
    reference = min((seq for seq, n in common if n == common[0][1]), default=None) if common else None
    for m in traces:
        if m in out:
            continue
        if outputs[m] != verdict.accepted_output or traces[m].checkpoints != reference:
            out[m] = Outcome.DISSENTED
        else:
            out[m] = Outcome.AGREED
    return out


@dataclass(frozen=True)
class CostModel:
    """Inputs of the PoVM-versus-hashcash cost comparison.

    ``clone_cost`` is the cost of one clone execution, ``c`` coordination
    overhead, ``p`` the cost of one hashcash evaluation and ``w`` the number
    of proof-of-work miners.
    """

    k: int
    clone_cost: Number
    c: Number
    p: Number
    w: int

    def __post_init__(self) -> None:
        for name in ("k", "clone_cost", "c", "p", "w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def tau(m: CostModel) -> Number:
    return (m.k * m.clone_cost + m.c) - m.p * m.w


def payout_multiplier(r: Reputation) -> float:
    return r.score
