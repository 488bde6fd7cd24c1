"""Deterministic, instruction-metered stack VM for customer jobs.

Words are unsigned 64-bit; arithmetic wraps. The VM state a checkpoint
covers is (next pc, stack, memory, instructions executed). Input words are
preloaded into memory cells 0..n-1. Stack depth plus allocated memory cells
count against the SLA memory cap.

Opcodes::

    PUSH k   push k                    ADD/SUB/MUL  pop b, pop a, push a op b
    POP      drop top                  CMP          pop b, pop a, push 1 if a < b else 0
    DUP      duplicate top             JMP a        jump
    LOAD i   push mem[i] (0 if unset)  JZ a         pop x, jump if x == 0
    STORE i  pop into mem[i]           RAND         push next SplitMix64 word
    CHECKPOINT  emit a checkpoint      HALT         stop, answer = top of stack
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .encoding import U64_MASK, Writer, sha256
from .rng import GOLDEN_GAMMA

Digest = bytes


class Op(enum.IntEnum):
    PUSH = 0
    POP = 1
    DUP = 2
    ADD = 3
    SUB = 4
    MUL = 5
    CMP = 6
    JMP = 7
    JZ = 8
    LOAD = 9
    STORE = 10
    RAND = 11
    CHECKPOINT = 12
    HALT = 13


WITH_OPERAND = {Op.PUSH, Op.JMP, Op.JZ, Op.LOAD, Op.STORE}
JUMPS = {Op.JMP, Op.JZ}


class ProgramError(ValueError):
    """Malformed program text or structure."""


class Status(enum.Enum):
    COMPLETED = "Completed"
    INSTRUCTION_BUDGET_EXCEEDED = "InstructionBudgetExceeded"
    MEMORY_EXCEEDED = "MemoryExceeded"
    TRAP = "Trap"


@dataclass(frozen=True)
class Sla:
    max_instructions: int
    max_memory_cells: int
    checkpoint_interval: int
    epoch_length_ticks: int = 1440

    def __post_init__(self) -> None:
        for name in ("max_instructions", "max_memory_cells", "checkpoint_interval", "epoch_length_ticks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.checkpoint_interval > self.max_instructions:
            raise ValueError("checkpoint_interval must not exceed max_instructions")

    def encode(self) -> bytes:
        return (Writer().u64(self.max_instructions).u64(self.max_memory_cells)
                .u64(self.checkpoint_interval).u64(self.epoch_length_ticks).getvalue())


@dataclass(frozen=True)
class Instruction:
    op: Op
    arg: int = 0

    def __str__(self) -> str:
        return f"{self.op.name} {self.arg}" if self.op in WITH_OPERAND else self.op.name


@dataclass(frozen=True)
class Program:
    code: tuple[Instruction, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "code", tuple(self.code))
        n = len(self.code)
        if n == 0:
            raise ProgramError("empty program")
        for i, ins in enumerate(self.code):
            if ins.op in JUMPS and not 0 <= ins.arg < n:
                raise ProgramError(f"jump target {ins.arg} out of range at {i}")
            if ins.op in (Op.LOAD, Op.STORE) and ins.arg < 0:
                raise ProgramError(f"negative memory index at {i}")

    def encode(self) -> bytes:
        w = Writer().u32(len(self.code))
        for ins in self.code:
            w.u8(int(ins.op)).u64(ins.arg & U64_MASK)
        return w.getvalue()

    def to_text(self) -> str:
        return "\n".join(str(ins) for ins in self.code) + "\n"


def parse_program(text: str) -> Program:
    """One opcode per line, ``#`` starts a comment, operands are decimal."""
    code = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            op = Op[parts[0].upper()]
        except KeyError:
            raise ProgramError(f"line {lineno}: unknown opcode {parts[0]!r}") from None
        if op in WITH_OPERAND:
            if len(parts) != 2:
                raise ProgramError(f"line {lineno}: {op.name} takes one operand")
            try:
                arg = int(parts[1], 10)
            except ValueError:
                raise ProgramError(f"line {lineno}: operand {parts[1]!r} is not decimal") from None
            if op == Op.PUSH:
                arg &= U64_MASK
            code.append(Instruction(op, arg))
        else:
            if len(parts) != 1:
                raise ProgramError(f"line {lineno}: {op.name} takes no operand")
            code.append(Instruction(op))
    return Program(tuple(code))


@dataclass(frozen=True)
class Job:
    id: int
    program: Program
    sla: Sla
    customer: int = 0
    seed: int = 0
    input: tuple[int, ...] = ()

    def configuration_digest(self) -> Digest:
        """Stands in for attesting the VM configuration: program, SLA and seed."""
        w = Writer().blob(self.program.encode()).blob(self.sla.encode()).u64(self.seed & U64_MASK)
        return sha256(w.getvalue())


@dataclass(frozen=True)
class Fault:
    """Add ``delta`` to memory cell ``cell`` right after instruction index ``at_instruction`` runs."""

    at_instruction: int
    cell: int
    delta: int = 1


@dataclass(frozen=True)
class ExecutionTrace:
    output: int | None
    instructions_executed: int
    peak_memory_cells: int
    checkpoints: tuple[Digest, ...]
    status: Status
    # instruction count at which each checkpoint was taken
    checkpoint_ticks: tuple[int, ...] = field(default=(), compare=False)

    @property
    def completed(self) -> bool:
        return self.status is Status.COMPLETED

    def checkpoint_root(self) -> Digest:
        return sha256(b"".join(self.checkpoints))

    def result_digest(self) -> Digest:
        w = Writer().u8(1 if self.output is not None else 0).u64(self.output or 0)
        return sha256(w.getvalue())


def checkpoint_digest(pc: int, stack: Sequence[int], memory: Sequence[int], instructions: int) -> Digest:
    n, m = len(stack), len(memory)
    data = struct.pack(f"<QI{n}QI{m}QQ", pc, n, *stack, m, *memory, instructions)
    return sha256(data)


def execute(job: Job, fault: Fault | None = None) -> ExecutionTrace:
    """Run ``job`` to HALT or until it breaks its SLA; never raises for program faults."""
    sla = job.sla
    max_instr = sla.max_instructions
    max_cells = sla.max_memory_cells
    interval = sla.checkpoint_interval
    ops = [int(ins.op) for ins in job.program.code]
    args = [ins.arg for ins in job.program.code]
    ncode = len(ops)

    stack: list[int] = []
    mem: list[int] = [w & U64_MASK for w in job.input]
    rng = job.seed & U64_MASK
    pc = 0
    count = 0
    next_ckpt = interval
    peak = len(mem)
    cps: list[Digest] = []
    ticks: list[int] = []
    output = None
    status = Status.COMPLETED
    fault_at = fault.at_instruction if fault is not None else -1
    mask = U64_MASK

    if peak > max_cells:
        return ExecutionTrace(None, 0, peak, (), Status.MEMORY_EXCEEDED)

    while True:
        if count >= max_instr:
            status = Status.INSTRUCTION_BUDGET_EXCEEDED
            break
        if pc >= ncode:
            status = Status.TRAP
            break
        op = ops[pc]
        pc += 1
        explicit = False
        halt = False
        # ordered roughly by frequency in typical workloads
        if op == 9:  # LOAD
            i = args[pc - 1]
            stack.append(mem[i] if i < len(mem) else 0)
        elif op == 0:  # PUSH
            stack.append(args[pc - 1])
        elif op == 10:  # STORE
            if not stack:
                status = Status.TRAP
                break
            i = args[pc - 1]
            if i >= len(mem):
                mem.extend([0] * (i + 1 - len(mem)))
            mem[i] = stack.pop()
        elif op == 8:  # JZ
            if not stack:
                status = Status.TRAP
                break
            if stack.pop() == 0:
                pc = args[pc - 1]
        elif op == 3 or op == 4 or op == 5 or op == 6:
            if len(stack) < 2:
                status = Status.TRAP
                break
            b = stack.pop()
            a = stack[-1]
            if op == 3:
                stack[-1] = (a + b) & mask
            elif op == 4:
                stack[-1] = (a - b) & mask
            elif op == 5:
                stack[-1] = (a * b) & mask
            else:
                stack[-1] = 1 if a < b else 0
        elif op == 7:  # JMP
            pc = args[pc - 1]
        elif op == 11:  # RAND
            rng = (rng + GOLDEN_GAMMA) & mask
            z = rng
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
            stack.append(z ^ (z >> 31))
        elif op == 2:  # DUP
            if not stack:
                status = Status.TRAP
                break
            stack.append(stack[-1])
        elif op == 1:  # POP
            if not stack:
                status = Status.TRAP
                break
            stack.pop()
        elif op == 12:  # CHECKPOINT
            explicit = True
        elif op == 13:  # HALT
            if not stack:
                status = Status.TRAP
                break
            output = stack[-1]
            halt = True
        else:
            status = Status.TRAP
            break
        count += 1

        if count - 1 == fault_at:
            c = fault.cell
            if c >= len(mem):
                mem.extend([0] * (c + 1 - len(mem)))
            mem[c] = (mem[c] + fault.delta) & mask

        cells = len(stack) + len(mem)
        if cells > peak:
            peak = cells
        if explicit:
            cps.append(checkpoint_digest(pc, stack, mem, count))
            ticks.append(count)
        if count == next_ckpt:
            cps.append(checkpoint_digest(pc, stack, mem, count))
            ticks.append(count)
            next_ckpt += interval
        if cells > max_cells:
            status = Status.MEMORY_EXCEEDED
            break
        if halt:
            break

    if status is not Status.COMPLETED:
        output = None
    return ExecutionTrace(output, count, peak, tuple(cps), status, tuple(ticks))


# -- coin-flip workload -------------------------------------------------------

HEADS_SHIFT = 1 << 63  # multiplying by 2^63 keeps only the low bit, moved to the top
FLIPS_PER_CHECKPOINT = 64


def coinflip_program(k: int) -> Program:
    """Flip coins (low bit of RAND, 1 = heads) until ``k`` heads in a row; answer = flips.

    Memory: cell 0 flips so far, cell 1 current run of heads, cell 2 flips
    left until the next explicit checkpoint.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return Program((Instruction(Op.PUSH, 0), Instruction(Op.HALT)))
    P = Instruction
    loop, flip, tails, ckpt, done = 6, 16, 29, 32, 36
    code = [
        P(Op.PUSH, 0), P(Op.STORE, 0),
        P(Op.PUSH, 0), P(Op.STORE, 1),
        P(Op.PUSH, FLIPS_PER_CHECKPOINT), P(Op.STORE, 2),
        # loop: count the flip, checkpoint every 64th
        P(Op.LOAD, 0), P(Op.PUSH, 1), P(Op.ADD), P(Op.STORE, 0),
        P(Op.LOAD, 2), P(Op.PUSH, 1), P(Op.SUB), P(Op.DUP), P(Op.STORE, 2),
        P(Op.JZ, ckpt),
        # flip
        P(Op.RAND), P(Op.PUSH, HEADS_SHIFT), P(Op.MUL), P(Op.JZ, tails),
        # heads
        P(Op.LOAD, 1), P(Op.PUSH, 1), P(Op.ADD), P(Op.DUP), P(Op.STORE, 1),
        P(Op.PUSH, k), P(Op.SUB), P(Op.JZ, done),
        P(Op.JMP, loop),
        # tails
        P(Op.PUSH, 0), P(Op.STORE, 1), P(Op.JMP, loop),
        # ckpt
        P(Op.CHECKPOINT), P(Op.PUSH, FLIPS_PER_CHECKPOINT), P(Op.STORE, 2), P(Op.JMP, flip),
        # done
        P(Op.LOAD, 0), P(Op.HALT),
    ]
    assert code[loop].op == Op.LOAD and code[flip].op == Op.RAND
    assert code[tails].op == Op.PUSH and code[ckpt].op == Op.CHECKPOINT and code[done].op == Op.LOAD
    return Program(tuple(code))


def expected_flips(k: int) -> int:
    return 2 ** (k + 1) - 2


def coinflip_job(k: int, seed: int, sla: Sla | None = None, job_id: int = 0, customer: int = 0) -> Job:
    if sla is None:
        sla = Sla(max_instructions=10_000_000, max_memory_cells=64, checkpoint_interval=1000)
    return Job(id=job_id, program=coinflip_program(k), sla=sla, customer=customer, seed=seed)


def run_outputs(program: Program, sla: Sla, seeds: Iterable[int]) -> list[int | None]:
    """Outputs of ``program`` for many seeds; see ``fastvm`` for a compiled path."""
    return [execute(Job(0, program, sla, seed=s)).output for s in seeds]
