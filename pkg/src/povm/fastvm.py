"""Compiled batch runner for Monte-Carlo work over many seeds.

Same semantics as ``jobvm.execute`` but returns only (output, instruction
count, status, checkpoint count); no checkpoint digests are computed. Falls
back to the reference interpreter when numba is unavailable.
"""

from __future__ import annotations

import numpy as np

from .jobvm import Job, Program, Sla, Status, execute

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_STATUS = [Status.COMPLETED, Status.INSTRUCTION_BUDGET_EXCEEDED, Status.MEMORY_EXCEEDED, Status.TRAP]


def _kernel(ops, args, seeds, max_instr, max_cells, interval, outputs, counts, statuses, ncheck):
    ncode = ops.shape[0]
    stack = np.zeros(max_cells + 2, dtype=np.uint64)
    # memory is addressed by operand, so size it by the largest index used
    mem_size = 1
    for i in range(ncode):
        if ops[i] == 9 or ops[i] == 10:
            if args[i] + 1 > mem_size:
                mem_size = args[i] + 1
    mem = np.zeros(mem_size, dtype=np.uint64)
    g = np.uint64(0x9E3779B97F4A7C15)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    s30 = np.uint64(30)
    s27 = np.uint64(27)
    s31 = np.uint64(31)
    for j in range(seeds.shape[0]):
        rng = seeds[j]
        sp = 0
        mlen = 0
        for i in range(mem_size):
            mem[i] = 0
        pc = 0
        count = 0
        nck = 0
        status = 0
        out = np.uint64(0)
        while True:
            if count >= max_instr:
                status = 1
                break
            if pc >= ncode:
                status = 3
                break
            op = ops[pc]
            a = args[pc]
            pc += 1
            halt = False
            explicit = False
            if op == 9:
                stack[sp] = mem[a] if a < mlen else np.uint64(0)
                sp += 1
            elif op == 0:
                stack[sp] = np.uint64(a)
                sp += 1
            elif op == 10:
                if sp == 0:
                    status = 3
                    break
                if a >= mlen:
                    for i in range(mlen, a + 1):
                        mem[i] = 0
                    mlen = a + 1
                sp -= 1
                mem[a] = stack[sp]
            elif op == 8:
                if sp == 0:
                    status = 3
                    break
                sp -= 1
                if stack[sp] == 0:
                    pc = a
            elif op >= 3 and op <= 6:
                if sp < 2:
                    status = 3
                    break
                sp -= 1
                y = stack[sp]
                x = stack[sp - 1]
                if op == 3:
                    stack[sp - 1] = x + y
                elif op == 4:
                    stack[sp - 1] = x - y
                elif op == 5:
                    stack[sp - 1] = x * y
                else:
                    stack[sp - 1] = np.uint64(1) if x < y else np.uint64(0)
            elif op == 7:
                pc = a
            elif op == 11:
                rng = rng + g
                z = rng
                z = (z ^ (z >> s30)) * m1
                z = (z ^ (z >> s27)) * m2
                stack[sp] = z ^ (z >> s31)
                sp += 1
            elif op == 2:
                if sp == 0:
                    status = 3
                    break
                stack[sp] = stack[sp - 1]
                sp += 1
            elif op == 1:
                if sp == 0:
                    status = 3
                    break
                sp -= 1
            elif op == 12:
                explicit = True
            elif op == 13:
                if sp == 0:
                    status = 3
                    break
                out = stack[sp - 1]
                halt = True
            else:
                status = 3
                break
            count += 1
            if explicit:
                nck += 1
            if count % interval == 0:
                nck += 1
            if sp + mlen > max_cells:
                status = 2
                break
            if halt:
                break
        outputs[j] = out
        counts[j] = count
        statuses[j] = status
        ncheck[j] = nck


if numba is not None:
    _compiled = numba.njit(cache=True, nogil=True)(_kernel)
else:  # pragma: no cover
    _compiled = None


def available() -> bool:
    return _compiled is not None


def run_batch(program: Program, sla: Sla, seeds) -> dict[str, np.ndarray]:
    """Run ``program`` once per seed; returns arrays keyed output/instructions/status/checkpoints.

    ``output`` is only meaningful where ``status`` is 0 (Completed).
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    n = seeds.shape[0]
    outputs = np.zeros(n, dtype=np.uint64)
    counts = np.zeros(n, dtype=np.int64)
    statuses = np.zeros(n, dtype=np.int8)
    ncheck = np.zeros(n, dtype=np.int64)
    if _compiled is None:
        for j, s in enumerate(seeds.tolist()):
            tr = execute(Job(0, program, sla, seed=s))
            outputs[j] = tr.output or 0
            counts[j] = tr.instructions_executed
            statuses[j] = _STATUS.index(tr.status)
            ncheck[j] = len(tr.checkpoints)
    else:
        ops = np.array([int(i.op) for i in program.code], dtype=np.int64)
        args = np.array([i.arg for i in program.code], dtype=np.uint64).astype(np.int64)
        _compiled(ops, args, seeds, sla.max_instructions, sla.max_memory_cells,
                  sla.checkpoint_interval, outputs, counts, statuses, ncheck)
    return {"output": outputs, "instructions": counts, "status": statuses, "checkpoints": ncheck}


def status_of(code: int) -> Status:
    return _STATUS[code]
