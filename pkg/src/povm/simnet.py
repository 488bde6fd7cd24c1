"""Deterministic discrete-event network of miners and customers.

Events are processed in strict (deliver_at, seq) order and every random
choice comes from a SplitMix64 stream derived from the scenario seed, so a
(config, seed) pair always yields the same report.

Timing model, per block round r starting at tick t = r * block_interval:

* PoVM mode: miners commit at t, reveal at t + phase and draw at
  t + 2 * phase. A reveal that has not arrived by the draw is treated as
  missing, which is how latency jitter produces competing blocks.
* Hashcash mode: the miners race on their own block templates, attempts
  interleaved one per miner from a random offset; the first valid nonce wins.

Verdicts are stamped with the latest send tick among their clone results.
Tickets and reputations for round t only use verdicts stamped before
``t - latency_max``, which every node has received by then, so honest nodes
agree on the ticket table.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import heapq
import io
import json
import logging
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Any, Callable

from .encoding import U64_MASK, sha256, u64_digest
from .hashcash import Difficulty, encode_nonce
from .hashchain import (
    Block, Chain, ChainMode, ChainView, Mempool, PovmRecord, Transaction, Verdict as RecordVerdict,
    digest_block, header_bytes, quorum, validate_chain,
)
from .jobvm import ExecutionTrace, Job, Sla, Status, coinflip_program, execute
from .lottery import (
    Commitment, EmptyTable, LotteryTranscript, ProofError, Reveal, TicketTable, commit, draw_with_voiding,
    issue_tickets, verify_lottery_proof,
)
from .redundancy import (
    CostModel, InsufficientMiners, Outcome, Reputation, Verdict, assign_clones, clone_outcomes,
    compare_checkpoints, majority_vote, tau, update_reputation,
)
from .rng import SplitMix64, derive

log = logging.getLogger(__name__)

SYSTEM = 0  # payer of block rewards and id of the environment


class InvalidConfig(ValueError):
    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class InvariantViolation(RuntimeError):
    pass


class DuplicateJob(ValueError):
    pass


FAULT_KINDS = ("wrong_output", "sla_violation", "bad_reveal", "silent")


# -- configuration -------------------------------------------------------------

def _exact(v: Any) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, float):
        return Fraction(str(v))
    return Fraction(v)


@dataclass
class EnergyModel:
    joules_per_hash_op: Fraction = Fraction(1)
    joules_per_instruction: Fraction = Fraction(1)
    joules_per_message: Fraction = Fraction(1)
    grams_co2_per_joule: Fraction = Fraction(1, 2500)

    def __post_init__(self) -> None:
        for f in fields(self):
            value = _exact(getattr(self, f.name))
            if value < 0:
                raise InvalidConfig(f"energy.{f.name}", "must be non-negative")
            setattr(self, f.name, value)


@dataclass
class ScenarioConfig:
    miners: int = 5
    customers: int = 1
    jobs: int = 20
    k: int = 3
    k_heads: int = 3
    block_interval: int = 10
    epoch_length: int = 100
    horizon: int = 500
    job_submit_start: int = 1
    job_submit_interval: int = 1
    latency_min: int = 1
    latency_max: int = 1
    lottery_phase: int | None = None
    instructions_per_tick: int = 100
    max_instructions: int = 1_000_000
    max_memory_cells: int = 64
    checkpoint_interval: int = 100
    seed: int = 0
    mode: str = "povm"
    difficulty: int = 8
    block_reward: int = 50
    job_price: int = 10
    max_block_txs: int = 1000
    faulty_miners: dict[int, str] = field(default_factory=dict)
    energy: EnergyModel = field(default_factory=EnergyModel)

    def __post_init__(self) -> None:
        if isinstance(self.energy, dict):
            self.energy = EnergyModel(**self.energy)
        self.faulty_miners = {int(m): kind for m, kind in dict(self.faulty_miners).items()}
        self.validate()

    @property
    def phase(self) -> int:
        return self.lottery_phase if self.lottery_phase is not None else self.latency_max + 1

    @property
    def sla(self) -> Sla:
        return Sla(self.max_instructions, self.max_memory_cells, self.checkpoint_interval, self.epoch_length)

    @property
    def chain_mode(self) -> ChainMode:
        return ChainMode.POVM if self.mode == "povm" else ChainMode.HASHCASH

    @property
    def miner_ids(self) -> list[int]:
        return list(range(1, self.miners + 1))

    @property
    def customer_ids(self) -> list[int]:
        return list(range(self.miners + 1, self.miners + self.customers + 1))

    @property
    def slots(self) -> int:
        return math.ceil(self.epoch_length / self.block_interval)

    def validate(self) -> None:
        ints = [f.name for f in fields(self) if f.name not in ("lottery_phase", "mode", "faulty_miners", "energy")]
        for name in ints:
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                raise InvalidConfig(name, "must be an integer")
        if self.miners < 1:
            raise InvalidConfig("miners", "need at least one miner")
        if self.customers < 0:
            raise InvalidConfig("customers", "must be non-negative")
        if self.jobs < 0:
            raise InvalidConfig("jobs", "must be non-negative")
        if self.jobs > 0 and self.customers < 1:
            raise InvalidConfig("customers", "jobs need at least one customer")
        if self.k < 1 or self.k % 2 == 0:
            raise InvalidConfig("k", f"must be odd and positive, got {self.k}")
        if self.mode == "povm" and self.jobs > 0 and self.k > self.miners:
            raise InvalidConfig("k", f"needs {self.k} miners, scenario has {self.miners}")
        if self.k_heads < 0:
            raise InvalidConfig("k_heads", "must be non-negative")
        if self.block_interval < 1:
            raise InvalidConfig("block_interval", "must be >= 1")
        if self.epoch_length < 1:
            raise InvalidConfig("epoch_length", "must be >= 1")
        if self.horizon < 0:
            raise InvalidConfig("horizon", "must be non-negative")
        if self.job_submit_start < 0 or self.job_submit_interval < 0:
            raise InvalidConfig("job_submit_start", "submission schedule must be non-negative")
        if not 0 <= self.latency_min <= self.latency_max:
            raise InvalidConfig("latency_min", "need 0 <= latency_min <= latency_max")
        if self.lottery_phase is not None and (not isinstance(self.lottery_phase, int) or self.lottery_phase < 1):
            raise InvalidConfig("lottery_phase", "must be a positive integer")
        if self.instructions_per_tick < 1:
            raise InvalidConfig("instructions_per_tick", "must be >= 1")
        for name in ("max_instructions", "max_memory_cells", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise InvalidConfig(name, "must be >= 1")
        if self.checkpoint_interval > self.max_instructions:
            raise InvalidConfig("checkpoint_interval", "must not exceed max_instructions")
        if self.mode not in ("povm", "hashcash"):
            raise InvalidConfig("mode", "must be 'povm' or 'hashcash'")
        if not 0 <= self.difficulty <= 255:
            raise InvalidConfig("difficulty", "must be in 0..255")
        if self.block_reward < 0 or self.job_price < 0:
            raise InvalidConfig("block_reward", "rewards must be non-negative")
        if self.max_block_txs < 1:
            raise InvalidConfig("max_block_txs", "must be >= 1")
        for m, kind in self.faulty_miners.items():
            if m not in self.miner_ids:
                raise InvalidConfig("faulty_miners", f"{m} is not a miner id")
            if kind not in FAULT_KINDS:
                raise InvalidConfig("faulty_miners", f"unknown fault {kind!r}")

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(sorted(unknown)[0], "unknown field")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig("energy", str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> ScenarioConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig("<file>", f"not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidConfig("<file>", "top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "energy"}
        out["faulty_miners"] = {str(m): k for m, k in self.faulty_miners.items()}
        out["energy"] = {f.name: _num(getattr(self.energy, f.name)) for f in fields(self.energy)}
        return out


def _num(x: Fraction | int):
    """Integers stay integers; other rationals become exact 'p/q' strings."""
    x = Fraction(x)
    return x.numerator if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


# -- events --------------------------------------------------------------------

@dataclass(frozen=True)
class JobSubmit:
    job: Job
    submit_tick: int


@dataclass(frozen=True)
class JobAssign:
    job: Job
    attempt: int


@dataclass(frozen=True)
class JobResult:
    job_id: int
    attempt: int
    miner: int
    output: int | None
    status: Status
    instructions: int
    peak_memory: int
    sent_at: int
    customer: int


@dataclass(frozen=True)
class CheckpointBatch:
    job_id: int
    attempt: int
    miner: int
    checkpoints: tuple[bytes, ...]
    sent_at: int


@dataclass(frozen=True)
class CommitMsg:
    round: int
    commitment: Commitment


@dataclass(frozen=True)
class RevealMsg:
    round: int
    reveal: Reveal


@dataclass(frozen=True)
class BlockAnnounce:
    block: Block


@dataclass(frozen=True)
class TxSubmit:
    tx: Transaction


# timers a node sets for itself
@dataclass(frozen=True)
class SubmitTimer:
    index: int


@dataclass(frozen=True)
class CloneDone:
    job: Job
    attempt: int


@dataclass(frozen=True)
class RoundStart:
    round: int


@dataclass(frozen=True)
class RevealPhase:
    round: int


@dataclass(frozen=True)
class DrawPhase:
    round: int


@dataclass(frozen=True)
class MiningRace:
    round: int


@dataclass(frozen=True)
class PaymentTimer:
    job_id: int


@dataclass(frozen=True)
class SimEvent:
    deliver_at: int
    seq: int
    src: int
    dst: int
    payload: Any


# -- replicated job queue ----------------------------------------------------------

class JobQueue:
    """Jobs in total order (submit tick, customer, job id), independent of arrival order."""

    def __init__(self) -> None:
        self._entries: list[tuple[int, int, int, Job]] = []
        self._ids: set[int] = set()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def jobs(self) -> list[Job]:
        return [e[3] for e in self._entries]

    def keys(self) -> list[tuple[int, int, int]]:
        return [e[:3] for e in self._entries]


def enqueue_job(q: JobQueue, j: Job, submit_tick: int) -> JobQueue:
    if j.id in q._ids:
        raise DuplicateJob(f"job {j.id} already queued")
    entry = (submit_tick, j.customer, j.id, j)
    keys = [e[:3] for e in q._entries]
    q._entries.insert(bisect.bisect(keys, entry[:3]), entry)
    q._ids.add(j.id)
    return q


# -- per-node bookkeeping ----------------------------------------------------------

@dataclass
class Counters:
    vm_instructions: int = 0
    hash_ops: int = 0
    messages_sent: int = 0
    dispatch_messages: int = 0
    clone_runs: int = 0


@dataclass
class Settlement:
    """Outcome of one voted attempt as one node computed it."""

    job_id: int
    attempt: int
    tick: int
    verdict: Verdict
    outcomes: dict[int, Outcome]
    records: tuple[PovmRecord, ...]
    customer: int

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.tick, self.job_id, self.attempt)


class ReputationLedger:
    """Scores replayed from settlements in (tick, job, attempt) order so every node agrees."""

    def __init__(self) -> None:
        self.scores: dict[int, Reputation] = {}
        self._pending: list[Settlement] = []
        self.applied_until = 0

    def add(self, s: Settlement) -> None:
        if s.tick < self.applied_until:
            raise InvariantViolation(
                f"settlement of job {s.job_id} at tick {s.tick} arrived after the ledger passed {self.applied_until}")
        self._pending.append(s)

    def advance(self, cutoff: int) -> dict[int, Reputation]:
        """Apply every settlement stamped before ``cutoff``."""
        if cutoff <= self.applied_until:
            return self.scores
        ready = sorted((s for s in self._pending if s.tick < cutoff), key=lambda s: s.sort_key)
        self._pending = [s for s in self._pending if s.tick >= cutoff]
        for s in ready:
            for miner in sorted(s.outcomes):
                cur = self.scores.get(miner, Reputation())
                self.scores[miner] = update_reputation(cur, s.outcomes[miner])
        self.applied_until = cutoff
        return self.scores

    def score(self, miner: int) -> float:
        return self.scores.get(miner, Reputation()).score


@dataclass
class RoundState:
    seed: int = 0
    salt: bytes = b""
    commitments: dict[int, Commitment] = field(default_factory=dict)
    reveals: dict[int, Reveal] = field(default_factory=dict)


class Node:
    def __init__(self, world: World, node_id: int, role: str) -> None:
        self.world = world
        self.id = node_id
        self.role = role
        cfg = world.config
        self.view = ChainView(Chain(mode=cfg.chain_mode, difficulty=cfg.difficulty if cfg.mode == "hashcash" else 0))
        self.mempool = Mempool()
        self.queue = JobQueue()
        self.reputation = ReputationLedger()
        self.counters = Counters()
        self.rng = SplitMix64(derive(cfg.seed, "node", node_id))
        self.results: dict[tuple[int, int], dict[int, JobResult]] = {}
        self.batches: dict[tuple[int, int], dict[int, CheckpointBatch]] = {}
        self.settlements: dict[tuple[int, int], Settlement] = {}
        self.final: dict[int, Settlement] = {}
        self.requeued: set[int] = set()
        self.rounds: dict[int, RoundState] = {}
        self.pending_work: list[tuple[Job, int]] = []
        self.active = 0
        self.ticket_log: list[tuple[int, TicketTable, bool]] = []
        self.fault = cfg.faulty_miners.get(node_id)
        self.jobs_by_id: dict[int, Job] = {}
        self.dispatched: dict[int, list[tuple[int, ...]]] = {}

    # -- helpers --

    def send(self, dst: int, payload: Any) -> None:
        self.counters.messages_sent += 1
        self.world.send(self.id, dst, payload)

    def broadcast(self, payload: Any) -> None:
        for other in self.world.node_ids:
            if other != self.id:
                self.send(other, payload)
        self.handle(payload, self.id)

    def handle(self, payload: Any, src: int) -> None:
        handler = getattr(self, "on_" + type(payload).__name__)
        handler(payload, src)

    # -- jobs --

    def on_SubmitTimer(self, msg: SubmitTimer, src: int) -> None:
        cfg = self.world.config
        job_id = (self.id << 32) | msg.index
        job = Job(id=job_id, program=self.world.program, sla=cfg.sla, customer=self.id,
                  seed=derive(cfg.seed, "job", job_id))
        self.world.prefetch(job)
        self.broadcast(JobSubmit(job, self.world.now))
        if cfg.mode == "povm":
            self.dispatch(job, 1)

    def dispatch(self, job: Job, attempt: int) -> None:
        cfg = self.world.config
        rng = SplitMix64(derive(cfg.seed, "assign", job.id, attempt))
        pool = set(cfg.miner_ids)
        used = {m for prev in self.dispatched.get(job.id, []) for m in prev}
        if len(pool - used - {job.customer}) >= cfg.k:
            pool -= used
        try:
            assignment = assign_clones(job, pool, cfg.k, rng)
        except InsufficientMiners as exc:
            raise InvariantViolation(str(exc)) from exc
        self.dispatched.setdefault(job.id, []).append(assignment.miners)
        for miner in assignment.miners:
            self.counters.dispatch_messages += 1
            self.send(miner, JobAssign(job, attempt))

    def on_JobSubmit(self, msg: JobSubmit, src: int) -> None:
        enqueue_job(self.queue, msg.job, msg.submit_tick)
        self.jobs_by_id[msg.job.id] = msg.job

    def on_JobAssign(self, msg: JobAssign, src: int) -> None:
        self.pending_work.append((msg.job, msg.attempt))
        self._start_work()

    def _start_work(self) -> None:
        cfg = self.world.config
        while self.pending_work and self.active < cfg.slots:
            job, attempt = self.pending_work.pop(0)
            trace = self.world.run_job(job)
            self.active += 1
            self.counters.vm_instructions += trace.instructions_executed
            self.counters.clone_runs += 1
            duration = max(1, math.ceil(trace.instructions_executed / cfg.instructions_per_tick))
            self.world.timer(self.id, self.world.now + duration, CloneDone(job, attempt))

    def _reported(self, job: Job) -> ExecutionTrace:
        trace = self.world.run_job(job)
        if self.fault == "wrong_output" and trace.output is not None:
            forged = tuple(sha256(b"forged" + self.id.to_bytes(8, "little") + i.to_bytes(8, "little"))
                           for i in range(len(trace.checkpoints)))
            return ExecutionTrace((trace.output + 1 + self.id) & U64_MASK, trace.instructions_executed,
                                  trace.peak_memory_cells, forged, Status.COMPLETED, trace.checkpoint_ticks)
        if self.fault == "sla_violation":
            half = len(trace.checkpoints) // 2
            return ExecutionTrace(None, trace.instructions_executed, trace.peak_memory_cells, trace.checkpoints[:half],
                                  Status.INSTRUCTION_BUDGET_EXCEEDED, trace.checkpoint_ticks[:half])
        return trace

    def on_CloneDone(self, msg: CloneDone, src: int) -> None:
        self.active -= 1
        trace = self._reported(msg.job)
        now = self.world.now
        self.broadcast(JobResult(msg.job.id, msg.attempt, self.id, trace.output, trace.status,
                                 trace.instructions_executed, trace.peak_memory_cells, now, msg.job.customer))
        self.broadcast(CheckpointBatch(msg.job.id, msg.attempt, self.id, trace.checkpoints, now))
        self._start_work()

    def on_JobResult(self, msg: JobResult, src: int) -> None:
        key = (msg.job_id, msg.attempt)
        self.results.setdefault(key, {})[msg.miner] = msg
        self._maybe_settle(key)

    def on_CheckpointBatch(self, msg: CheckpointBatch, src: int) -> None:
        key = (msg.job_id, msg.attempt)
        self.batches.setdefault(key, {})[msg.miner] = msg
        self._maybe_settle(key)

    def _maybe_settle(self, key: tuple[int, int]) -> None:
        k = self.world.config.k
        results = self.results.get(key, {})
        batches = self.batches.get(key, {})
        if key in self.settlements or len(results) < k or len(batches) < k:
            return
        job_id, attempt = key
        miners = sorted(results)
        traces = {
            m: ExecutionTrace(results[m].output, results[m].instructions, results[m].peak_memory,
                              batches[m].checkpoints, results[m].status)
            for m in miners
        }
        verdict = majority_vote([(m, traces[m].output) for m in miners])
        divergence = compare_checkpoints([traces[m] for m in miners]) if k > 1 else None
        verdict = Verdict(verdict.accepted_output, verdict.votes_for, verdict.votes_total,
                          verdict.dissenting_miners, divergence)
        outcomes = clone_outcomes(traces, verdict)
        tick = max(max(r.sent_at for r in results.values()), max(b.sent_at for b in batches.values()))
        final = verdict.accepted or attempt >= 2
        records = build_records(job_id, traces, k) if final else ()
        s = Settlement(job_id, attempt, tick, verdict, outcomes, records, results[miners[0]].customer)
        self.settlements[key] = s
        self.reputation.add(s)
        if final:
            self.final[job_id] = s
            if self.id == s.customer and verdict.accepted:
                self.world.timer(self.id, max(self.world.now, tick + self.world.lag), PaymentTimer(job_id))
        else:
            self.requeued.add(job_id)
            if self.id == s.customer:
                job = self.jobs_by_id.get(job_id) or self.world.jobs[job_id]
                self.dispatch(job, attempt + 1)

    def on_PaymentTimer(self, msg: PaymentTimer, src: int) -> None:
        s = self.final[msg.job_id]
        self.reputation.advance(s.tick)
        price = self.world.config.job_price
        for miner in sorted(s.outcomes):
            if s.outcomes[miner] is not Outcome.AGREED:
                continue
            amount = math.floor(price * self.reputation.score(miner))
            if amount <= 0:
                continue
            tx = Transaction(u64_digest("pay", msg.job_id, miner), self.id, miner, amount, self.world.now)
            self.broadcast(TxSubmit(tx))

    def on_TxSubmit(self, msg: TxSubmit, src: int) -> None:
        self.mempool.add(msg.tx)

    # -- lottery rounds --

    def ticket_table(self, round_tick: int) -> TicketTable:
        cfg = self.world.config
        cutoff = max(0, round_tick - self.world.lag)
        end = (cutoff // cfg.epoch_length) * cfg.epoch_length
        start = max(0, end - cfg.epoch_length)
        self.reputation.advance(end)
        scores = {m: r.score for m, r in self.reputation.scores.items()}
        stamped = [(s.tick, rec) for s in self.final.values() for rec in s.records]
        return issue_tickets(stamped, (start, end), scores)

    def on_RoundStart(self, msg: RoundStart, src: int) -> None:
        state = self.rounds.setdefault(msg.round, RoundState())
        state.seed = self.rng.next()
        state.salt = self.rng.bytes(16)
        self.broadcast(CommitMsg(msg.round, commit(state.seed, state.salt, self.id)))
        now = self.world.now
        self.world.timer(self.id, now + self.world.config.phase, RevealPhase(msg.round))
        self.world.timer(self.id, now + 2 * self.world.config.phase, DrawPhase(msg.round))

    def on_CommitMsg(self, msg: CommitMsg, src: int) -> None:
        if self.role != "miner":
            return
        self.rounds.setdefault(msg.round, RoundState()).commitments.setdefault(msg.commitment.miner, msg.commitment)

    def on_RevealPhase(self, msg: RevealPhase, src: int) -> None:
        if self.fault == "silent":
            return
        state = self.rounds[msg.round]
        seed = state.seed + 1 if self.fault == "bad_reveal" else state.seed
        self.broadcast(RevealMsg(msg.round, Reveal(self.id, seed & U64_MASK, state.salt)))

    def on_RevealMsg(self, msg: RevealMsg, src: int) -> None:
        if self.role != "miner":
            return
        self.rounds.setdefault(msg.round, RoundState()).reveals.setdefault(msg.reveal.miner, msg.reveal)

    def on_DrawPhase(self, msg: DrawPhase, src: int) -> None:
        state = self.rounds.pop(msg.round)
        round_tick = msg.round * self.world.config.block_interval
        tickets = self.ticket_table(round_tick)
        reveals = [state.reveals[m] for m in sorted(state.reveals)]
        bootstrap = tickets.total == 0
        if bootstrap:
            # nothing earned in the window yet: one ticket per committed revealer
            tickets = TicketTable({r.miner: 1 for r in reveals if r.miner in state.commitments}, tickets.window)
        self.ticket_log.append((msg.round, tickets, bootstrap))
        try:
            result = draw_with_voiding(reveals, state.commitments, tickets)
        except EmptyTable:
            # every ticket holder's reveal is missing here, so this view names no producer this round
            log.debug("node %d: no live tickets in round %d", self.id, msg.round)
            self.world.empty_draws += 1
            return
        if result.winner != self.id:
            return
        transcript = LotteryTranscript(msg.round, [state.commitments[m] for m in sorted(state.commitments)],
                                       result.reveals, result.tickets, result.voided, result.winner, bootstrap)
        block = self.assemble(round_tick, lottery_proof=transcript.encode())
        self.world.blocks_produced += 1
        self.broadcast(BlockAnnounce(block))

    def assemble(self, round_tick: int, *, lottery_proof: bytes | None = None, nonce: bytes | None = None) -> Block:
        cfg = self.world.config
        chain = self.view.chain
        txs = []
        if cfg.block_reward > 0:
            txs.append(Transaction(u64_digest("coinbase", chain.height + 1, self.id, round_tick),
                                   SYSTEM, self.id, cfg.block_reward, round_tick))
        for tx in self.mempool.pending:
            if len(txs) >= cfg.max_block_txs:
                break
            if not chain.contains_tx(tx.id):
                txs.append(tx)
        records: list[PovmRecord] = []
        if cfg.mode == "povm":
            on_chain = chain.job_ids()
            for job_id in sorted(self.final):
                if job_id not in on_chain:
                    records.extend(self.final[job_id].records)
        return Block(chain.height + 1, chain.head_digest, self.id, round_tick, tuple(txs), tuple(records),
                     nonce=nonce, lottery_proof=lottery_proof)

    def on_BlockAnnounce(self, msg: BlockAnnounce, src: int) -> None:
        block = msg.block
        if not all(r.is_consistent() for r in block.povm_records):
            log.debug("node %d drops block with inconsistent records", self.id)
            return
        if block.mode == ChainMode.POVM:
            try:
                verify_lottery_proof(block.lottery_proof, block.producer)
            except ProofError as exc:
                log.debug("node %d drops block: %s", self.id, exc)
                return
        else:
            from .hashcash import meets_target

            if not meets_target(digest_block(block), Difficulty(self.world.config.difficulty)):
                return
        status = self.view.receive(block)
        self.world.note_block_status(self.id, status)


def build_records(job_id: int, traces: dict[int, ExecutionTrace], k: int) -> tuple[PovmRecord, ...]:
    """One record per clone; votes_for counts the clones that reported the same answer."""
    out = []
    for m in sorted(traces):
        t = traces[m]
        agree = sum(1 for o in traces.values() if t.output is not None and o.output == t.output)
        sla_ok = t.completed
        accepted = sla_ok and agree >= quorum(k)
        out.append(PovmRecord(job_id, m, t.result_digest(), t.checkpoint_root(),
                              RecordVerdict.ACCEPTED if accepted else RecordVerdict.REJECTED, agree, k, sla_ok))
    return tuple(out)


# -- the world -------------------------------------------------------------------

class World:
    def __init__(self, config: ScenarioConfig, threads: int = 1,
                 trace: Callable[[SimEvent], None] | None = None) -> None:
        self.config = config
        self.now = 0
        self.seq = 0
        self.queue: list[tuple[int, int, SimEvent]] = []
        self.latency = SplitMix64(derive(config.seed, "latency"))
        self.race_rng = SplitMix64(derive(config.seed, "race"))
        self.program = coinflip_program(config.k_heads)
        self.lag = config.latency_max
        self.trace = trace
        self.blocks_produced = 0
        self.empty_draws = 0
        self.block_statuses: dict[str, int] = {}
        self.jobs: dict[int, Job] = {}
        self._traces: dict[int, ExecutionTrace] = {}
        self._futures: dict[int, Future] = {}
        self._pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        self.nodes: dict[int, Node] = {}
        for m in config.miner_ids:
            self.nodes[m] = Node(self, m, "miner")
        for c in config.customer_ids:
            self.nodes[c] = Node(self, c, "customer")
        self.node_ids = sorted(self.nodes)
        self.metrics: list[dict] = []
        self._schedule_initial()

    def _schedule_initial(self) -> None:
        cfg = self.config
        customers = cfg.customer_ids
        for i in range(cfg.jobs):
            cust = customers[i % len(customers)]
            self.timer(cust, cfg.job_submit_start + i * cfg.job_submit_interval, SubmitTimer(i // len(customers)))
        r = 1
        while r * cfg.block_interval <= cfg.horizon:
            t = r * cfg.block_interval
            if cfg.mode == "povm":
                for m in cfg.miner_ids:
                    self.timer(m, t, RoundStart(r))
            else:
                self.timer(SYSTEM, t, MiningRace(r))
            r += 1

    # -- scheduling --

    def _push(self, at: int, src: int, dst: int, payload: Any) -> None:
        ev = SimEvent(at, self.seq, src, dst, payload)
        self.seq += 1
        heapq.heappush(self.queue, (at, ev.seq, ev))

    def send(self, src: int, dst: int, payload: Any) -> None:
        cfg = self.config
        delay = self.latency.randint(cfg.latency_min, cfg.latency_max)
        self._push(self.now + delay, src, dst, payload)

    def timer(self, node: int, at: int, payload: Any) -> None:
        self._push(at, node, node, payload)

    # -- job execution (pure, so it may run on worker threads) --

    def prefetch(self, job: Job) -> None:
        self.jobs[job.id] = job
        if self._pool is not None and job.id not in self._futures and job.id not in self._traces:
            self._futures[job.id] = self._pool.submit(execute, job)

    def run_job(self, job: Job) -> ExecutionTrace:
        trace = self._traces.get(job.id)
        if trace is None:
            fut = self._futures.pop(job.id, None)
            trace = fut.result() if fut is not None else execute(job)
            self._traces[job.id] = trace
        return trace

    # -- hashcash race --

    def on_MiningRace(self, msg: MiningRace) -> None:
        cfg = self.config
        d = Difficulty(cfg.difficulty)
        threshold = d.threshold
        miners = cfg.miner_ids
        round_tick = msg.round * cfg.block_interval
        templates = {}
        for m in miners:
            node = self.nodes[m]
            block = node.assemble(round_tick, nonce=bytes(8))
            templates[m] = (block, sha256_prefix(header_bytes(block)), node.rng.next())
        offset = self.race_rng.below(len(miners))
        order = miners[offset:] + miners[:offset]
        attempt = 0
        while True:
            for m in order:
                block, prefix, start = templates[m]
                nonce = encode_nonce(start + attempt)
                h = prefix.copy()
                h.update(nonce)
                self.nodes[m].counters.hash_ops += 1
                if int.from_bytes(h.digest(), "big") < threshold:
                    won = Block(block.height, block.prev_digest, block.producer, block.timestamp,
                                block.transactions, block.povm_records, nonce=nonce)
                    self.blocks_produced += 1
                    self.nodes[m].broadcast(BlockAnnounce(won))
                    return
            attempt += 1

    def note_block_status(self, node: int, status: str) -> None:
        self.block_statuses[status] = self.block_statuses.get(status, 0) + 1

    # -- loop --

    def step(self) -> bool:
        """Process the next event; False when the queue is empty."""
        if not self.queue:
            return False
        at, _, ev = heapq.heappop(self.queue)
        if at < self.now:
            raise InvariantViolation(f"event at {at} scheduled in the past (now {self.now})")
        self.now = at
        if self.trace is not None:
            self.trace(ev)
        if ev.dst == SYSTEM:
            getattr(self, "on_" + type(ev.payload).__name__)(ev.payload)
        else:
            self.nodes[ev.dst].handle(ev.payload, ev.src)
        return True

    @property
    def reference(self) -> Node:
        return self.nodes[self.config.miner_ids[0]]

    def snapshot(self, tick: int) -> dict:
        ref = self.reference
        accepted = sum(1 for s in ref.final.values() if s.verdict.accepted)
        rejected = sum(1 for s in ref.final.values() if not s.verdict.accepted)
        return {
            "tick": tick,
            "blocks": ref.view.chain.height,
            "jobs_accepted": accepted,
            "jobs_rejected": rejected,
            "vm_instructions": sum(n.counters.vm_instructions for n in self.nodes.values()),
            "hash_ops": sum(n.counters.hash_ops for n in self.nodes.values()),
            "tickets_issued": sum(t.total for _, t, boot in ref.ticket_log if not boot),
        }

    def run(self) -> None:
        cfg = self.config
        next_metric = cfg.block_interval
        try:
            while self.queue:
                at = self.queue[0][0]
                while next_metric <= cfg.horizon and at > next_metric:
                    self.metrics.append(self.snapshot(next_metric))
                    next_metric += cfg.block_interval
                self.step()
            while next_metric <= cfg.horizon:
                self.metrics.append(self.snapshot(next_metric))
                next_metric += cfg.block_interval
        finally:
            if self._pool is not None:
                self._pool.shutdown(wait=True)


def sha256_prefix(data: bytes):
    return hashlib.sha256(data)


# -- energy and report --------------------------------------------------------------

@dataclass
class EnergyAccount:
    joules_pow: Fraction
    joules_povm: Fraction
    grams_co2: Fraction
    tau: Fraction
    cost_model: CostModel

    def to_json(self) -> dict:
        cm = self.cost_model
        return {
            "joules_pow": _num(self.joules_pow),
            "joules_povm": _num(self.joules_povm),
            "grams_co2": _num(self.grams_co2),
            "tau": _num(self.tau),
            "tau_float": float(self.tau),
            "tau_inputs": {"k": cm.k, "T": _num(cm.clone_cost), "c": _num(cm.c), "p": _num(cm.p), "w": cm.w},
        }


def account_energy(counters: dict, model: EnergyModel, k: int = 1, miners: int = 0) -> EnergyAccount:
    """Linear energy model over the summed counters, plus the tau comparison.

    ``counters`` needs hash_ops, vm_instructions, clone_runs and dispatch_messages.
    T is the mean instructions per clone run priced in joules, c the dispatch
    messages priced in joules, p the joules of one hash evaluation and w the
    miner count.
    """
    hash_ops = counters.get("hash_ops", 0)
    instr = counters.get("vm_instructions", 0)
    runs = counters.get("clone_runs", 0)
    msgs = counters.get("dispatch_messages", 0)
    e_h, e_i, e_m = model.joules_per_hash_op, model.joules_per_instruction, model.joules_per_message
    joules_pow = hash_ops * e_h
    joules_povm = instr * e_i
    grams = (joules_pow + joules_povm) * model.grams_co2_per_joule
    clone_cost = Fraction(instr, runs) * e_i if runs else Fraction(0)
    cm = CostModel(k=k, clone_cost=clone_cost, c=msgs * e_m, p=e_h, w=miners)
    return EnergyAccount(Fraction(joules_pow), Fraction(joules_povm), Fraction(grams), Fraction(tau(cm)), cm)


@dataclass
class SimReport:
    config: ScenarioConfig
    chain: Chain
    node_counters: dict[int, Counters]
    jobs_submitted: int
    jobs_accepted: int
    jobs_rejected: int
    jobs_requeued: int
    jobs_pending: int
    jobs_on_chain: int
    tickets_issued: int
    tickets_by_miner: dict[int, int]
    blocks_per_producer: dict[int, int]
    reputations: dict[int, float]
    energy: EnergyAccount
    forks_observed: int
    reorgs: int
    agreed_height: int
    tip_heights: dict[int, int]
    metrics: list[dict]
    validation: str

    @property
    def totals(self) -> dict:
        keys = ("vm_instructions", "hash_ops", "messages_sent", "dispatch_messages", "clone_runs")
        return {k: sum(getattr(c, k) for c in self.node_counters.values()) for k in keys}

    @property
    def chain_digest(self) -> str:
        return self.chain.head_digest.hex()

    def to_json(self) -> dict:
        return {
            "mode": self.config.mode,
            "seed": self.config.seed,
            "chain": {
                "height": self.chain.height,
                "head_digest": self.chain_digest,
                "validation": self.validation,
                "agreed_height": self.agreed_height,
                "tip_heights": {str(n): h for n, h in self.tip_heights.items()},
                "forks_observed": self.forks_observed,
                "reorgs": self.reorgs,
            },
            "jobs": {
                "submitted": self.jobs_submitted,
                "accepted": self.jobs_accepted,
                "rejected": self.jobs_rejected,
                "requeued": self.jobs_requeued,
                "pending": self.jobs_pending,
                "on_chain": self.jobs_on_chain,
            },
            "tickets": {"issued": self.tickets_issued,
                        "by_miner": {str(m): n for m, n in sorted(self.tickets_by_miner.items())}},
            "blocks_per_producer": {str(m): n for m, n in sorted(self.blocks_per_producer.items())},
            "reputations": {str(m): r for m, r in sorted(self.reputations.items())},
            "counters": {
                "totals": self.totals,
                "per_node": {str(n): asdict(c) for n, c in sorted(self.node_counters.items())},
            },
            "energy": self.energy.to_json(),
            "config": self.config.to_dict(),
        }

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        cols = ["tick", "blocks", "jobs_accepted", "jobs_rejected", "vm_instructions", "hash_ops", "tickets_issued"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.metrics:
            w.writerow(row)
        return buf.getvalue()


def step(world: World) -> bool:
    return world.step()


def run_scenario(config: ScenarioConfig, threads: int = 1,
                 trace: Callable[[SimEvent], None] | None = None) -> SimReport:
    world = World(config, threads=threads, trace=trace)
    world.run()
    return build_report(world)


def build_report(world: World) -> SimReport:
    cfg = world.config
    ref = world.reference
    chain = ref.view.chain
    report = validate_chain(chain)
    if not report.valid:
        raise InvariantViolation(f"reference chain invalid: {report}")

    accepted = sum(1 for s in ref.final.values() if s.verdict.accepted)
    rejected = len(ref.final) - accepted
    submitted = cfg.jobs
    pending = submitted - accepted - rejected
    if pending < 0:
        raise InvariantViolation("more settled jobs than submitted")

    on_chain_blocks: dict[int, int] = {}
    for b in chain.blocks:
        for job in {r.job_id for r in b.povm_records}:
            on_chain_blocks[job] = on_chain_blocks.get(job, 0) + 1
    if any(n != 1 for n in on_chain_blocks.values()):
        raise InvariantViolation("a job appears in more than one block")
    for job_id in on_chain_blocks:
        s = ref.final.get(job_id)
        if s is None:
            raise InvariantViolation(f"job {job_id} on chain but never settled at the reference node")

    tickets_by_miner: dict[int, int] = {}
    issued = 0
    for _, table, boot in ref.ticket_log:
        if boot:
            continue
        issued += table.total
        for m, n in table.entries.items():
            tickets_by_miner[m] = tickets_by_miner.get(m, 0) + n

    producers: dict[int, int] = {}
    for b in chain.blocks[1:]:
        producers[b.producer] = producers.get(b.producer, 0) + 1

    heights = {n: node.view.chain.height for n, node in world.nodes.items()}
    agreed = 0
    for h in range(min(heights.values()) + 1):
        if len({node.view.chain.digests[h] for node in world.nodes.values()}) == 1:
            agreed = h
        else:
            break

    final_rep = ReputationLedger()
    for s in ref.settlements.values():
        final_rep.add(s)
    final_rep.advance(1 << 62)

    counters = {n: node.counters for n, node in sorted(world.nodes.items())}
    totals = {k: sum(getattr(c, k) for c in counters.values())
              for k in ("vm_instructions", "hash_ops", "dispatch_messages", "clone_runs")}
    energy = account_energy(totals, cfg.energy, k=cfg.k, miners=cfg.miners)

    return SimReport(
        config=cfg,
        chain=chain,
        node_counters=counters,
        jobs_submitted=submitted,
        jobs_accepted=accepted,
        jobs_rejected=rejected,
        jobs_requeued=len(ref.requeued),
        jobs_pending=pending,
        jobs_on_chain=len(on_chain_blocks),
        tickets_issued=issued,
        tickets_by_miner=tickets_by_miner,
        blocks_per_producer=producers,
        reputations={m: final_rep.score(m) for m in cfg.miner_ids},
        energy=energy,
        forks_observed=sum(n.view.forks_seen for n in world.nodes.values()),
        reorgs=sum(n.view.reorgs for n in world.nodes.values()),
        agreed_height=agreed,
        tip_heights=heights,
        metrics=world.metrics,
        validation=str(report),
    )


def event_to_json(ev: SimEvent) -> str:
    return json.dumps({"t": ev.deliver_at, "seq": ev.seq, "from": ev.src, "to": ev.dst,
                       "type": type(ev.payload).__name__}, sort_keys=True)
