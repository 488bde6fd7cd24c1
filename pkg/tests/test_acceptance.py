"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run under pytest (lines appear in the verbose log) or directly:

    python tests/test_acceptance.py
"""

import bisect
import itertools
import json
import math
import sys
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import random_chain  # noqa: E402
from povm import fastvm  # noqa: E402
from povm.encoding import DecodeError  # noqa: E402
from povm.hashcash import Difficulty, mine  # noqa: E402
from povm.hashchain import deserialize_block, serialize_block, validate_chain  # noqa: E402
from povm.jobvm import (  # noqa: E402
    Fault, Instruction, Job, Op, Program, Sla, Status, coinflip_job, coinflip_program, execute,
)
from povm.lottery import Reveal, TicketTable, combine_reveals, commit, draw_winner  # noqa: E402
from povm.redundancy import Outcome, Reputation, compare_checkpoints, majority_vote, update_reputation  # noqa: E402
from povm.rng import SplitMix64, derive  # noqa: E402
from povm.simnet import ScenarioConfig, World, build_report, run_scenario  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
SMOKE = ROOT / "scenarios" / "smoke.json"


def smoke_config(**over) -> ScenarioConfig:
    data = json.loads(SMOKE.read_text())
    data.update(over)
    return ScenarioConfig.from_dict(data)


# -- 1: coin-flip expectation ----------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    seeds = np.arange(100_000, dtype=np.uint64)
    sla = Sla(10_000_000, 64, 1_000_000)
    parts, ok = [], True
    for k in (1, 2, 3):
        res = fastvm.run_batch(coinflip_program(k), sla, seeds)
        if not (res["status"] == 0).all():
            return False, f"k={k}: some runs did not complete"
        mean = float(res["output"].astype(np.float64).mean())
        target = 2 ** (k + 1) - 2
        rel = abs(mean - target) / target
        ok &= rel < 0.02
        parts.append(f"k={k} mean={mean:.4f} target={target} err={rel:.2%}")
    # the batch path must agree with the reference interpreter it stands in for
    for k in (1, 2, 3):
        ref = [execute(coinflip_job(k, s, sla)).output for s in range(500)]
        res = fastvm.run_batch(coinflip_program(k), sla, seeds[:500])
        if [int(x) for x in res["output"]] != ref:
            return False, f"k={k}: batch runner disagrees with execute"
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    return ok, "; ".join(parts) + f"; {elapsed:.1f}s"


# -- 2: hashcash attempts ---------------------------------------------------------

def criterion_2():
    t0 = time.perf_counter()
    parts, ok = [], True
    for d in (4, 8, 12):
        attempts = [mine(b"trial" + i.to_bytes(4, "little"), Difficulty(d)).attempts for i in range(1000)]
        mean = sum(attempts) / len(attempts)
        rel = abs(mean - 2 ** d) / 2 ** d
        ok &= rel < 0.10
        parts.append(f"d={d} mean={mean:.1f} expected={2 ** d} err={rel:.2%}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    return ok, "; ".join(parts) + f"; {elapsed:.1f}s"


# -- 3: quorum --------------------------------------------------------------------

def brute_force_vote(outputs):
    k = len(outputs)
    for o in sorted({o for o in outputs if o is not None}):
        n = sum(1 for x in outputs if x == o)
        if 2 * n >= k + 1:
            return o, n
    return None, None


def criterion_3():
    cases = 0
    for symbols in (range(3), [0, 1, None]):
        for outputs in itertools.product(symbols, repeat=3):
            v = majority_vote(list(enumerate(outputs)))
            want, n = brute_force_vote(outputs)
            if v.accepted_output != want or (want is not None and v.votes_for != n):
                return False, f"k=3 {outputs}: got {v.accepted_output}, brute force {want}"
            cases += 1

    @settings(max_examples=500, deadline=None, database=None)
    @given(st.sampled_from([1, 3, 5, 7]).flatmap(
        lambda k: st.lists(st.one_of(st.none(), st.integers(0, 3)), min_size=k, max_size=k)))
    def prop(outputs):
        v = majority_vote(list(enumerate(outputs)))
        want, n = brute_force_vote(outputs)
        assert v.accepted_output == want
        if want is not None:
            assert v.votes_for == n
            assert v.dissenting_miners == {i for i, o in enumerate(outputs) if o != want}

    try:
        prop()
    except AssertionError as exc:
        return False, f"property failed: {exc}"
    return True, f"{cases} exhaustive k=3 sequences and 500 random multisets for k in 1,3,5,7 match brute force"


# -- 4: lottery fairness -------------------------------------------------------------

def criterion_4():
    n = 10_000
    tickets = TicketTable({1: 3, 2: 1})
    # miner 2 reveals the same value every round; miner 1 alone supplies randomness
    fixed = Reveal(2, 0, bytes(16))
    fixed_c = commit(fixed.seed, fixed.salt, 2)
    wins = Counter()
    residues4, residues16 = Counter(), Counter()
    for i in range(n):
        rng = SplitMix64(derive(2024, "draw", i))
        honest = Reveal(1, rng.next(), rng.bytes(16))
        commitments = {1: commit(honest.seed, honest.salt, 1), 2: fixed_c}
        wins[draw_winner([honest, fixed], commitments, tickets)] += 1
        value = int.from_bytes(combine_reveals([honest, fixed]), "big")
        residues4[value % 4] += 1
        residues16[value % 16] += 1
    sigma = math.sqrt(0.75 * 0.25 / n)
    f1 = wins[1] / n
    within = abs(f1 - 0.75) <= 3 * sigma
    p4 = chisquare([residues4[r] for r in range(4)]).pvalue
    p16 = chisquare([residues16[r] for r in range(16)]).pvalue
    ok = within and p4 > 0.01 and p16 > 0.01
    return ok, (f"freq 3-ticket={f1:.4f} 1-ticket={1 - f1:.4f} (3 sigma={3 * sigma:.4f}); "
                f"residue chi-square p mod4={p4:.3f} mod16={p16:.3f}")


# -- 5: chain integrity -----------------------------------------------------------------

def mutation_detected(chain, height, data, pos, xor):
    mutated = bytearray(data)
    mutated[pos] ^= xor
    try:
        block = deserialize_block(bytes(mutated))
    except DecodeError:
        return True
    original = chain.blocks[height]
    chain.blocks[height] = block
    try:
        report = validate_chain(chain)
    finally:
        chain.blocks[height] = original
    return not report.valid and report.first_invalid == height


def criterion_5():
    t0 = time.perf_counter()
    chains = [random_chain(seed, 20) for seed in range(100)]
    if not all(validate_chain(c).valid for c in chains):
        return False, "a generated chain failed validation"
    rng = SplitMix64(5)
    checked = 0
    for ci, chain in enumerate(chains):
        encoded = [serialize_block(b) for b in chain.blocks]
        # two random bytes of every block, genesis included
        for h in range(len(chain.blocks)):
            data = encoded[h]
            for _ in range(2):
                pos, xor = rng.below(len(data)), 1 + rng.below(255)
                if not mutation_detected(chain, h, data, pos, xor):
                    return False, f"chain {ci} height {h} byte {pos} ^ {xor:#x} undetected"
                checked += 1
    # and every byte of one full block, the tip included
    for ci, h in ((0, 10), (1, 20)):
        data = serialize_block(chains[ci].blocks[h])
        for pos in range(len(data)):
            if not mutation_detected(chains[ci], h, data, pos, 1 + rng.below(255)):
                return False, f"chain {ci} height {h} byte {pos} undetected"
            checked += 1
    elapsed = time.perf_counter() - t0
    return elapsed < 10, f"100 chains x 20 blocks valid; {checked} single-byte mutations all detected; {elapsed:.1f}s"


# -- 6: determinism -------------------------------------------------------------------

def criterion_6():
    cfg = smoke_config()
    a = run_scenario(cfg)
    b = run_scenario(cfg)
    c = run_scenario(cfg, threads=4)
    ja, jb, jc = a.chain.dump_json(), b.chain.dump_json(), c.chain.dump_json()
    ok = ja == jb == jc and a.chain.height == 50 and cfg.miners == 5 and cfg.k == 3 and cfg.jobs == 20
    return ok, f"height={a.chain.height} head={a.chain_digest[:16]} identical across 2 runs and threads 1/4: {ok}"


# -- 7: ledger completeness and punishment ------------------------------------------------

def criterion_7():
    bad = 3
    cfg = smoke_config(faulty_miners={str(bad): "wrong_output"})
    world = World(cfg)
    world.run()
    report = build_report(world)
    ref = world.reference
    chain = report.chain
    if not validate_chain(chain).valid:
        return False, "chain invalid"
    blocks_with = Counter()
    for b in chain.blocks:
        for job_id in {r.job_id for r in b.povm_records}:
            blocks_with[job_id] += 1
    accepted = [j for j, s in ref.final.items() if s.verdict.accepted]
    if len(accepted) != cfg.jobs or any(blocks_with[j] != 1 for j in accepted):
        return False, f"{len(accepted)} accepted, on-chain counts {dict(blocks_with)}"
    involved = [s for s in ref.settlements.values() if bad in s.outcomes]
    if not involved or any(s.outcomes[bad] is not Outcome.DISSENTED or not s.verdict.accepted for s in involved):
        return False, "faulty miner was not outvoted on every job"
    # replay its score in ledger order and count dissents until it drops below 0.1
    rep, dissents, dropped_after = Reputation(), 0, None
    for s in sorted(involved, key=lambda s: s.sort_key):
        rep = update_reputation(rep, s.outcomes[bad])
        dissents += 1
        if dropped_after is None and rep.score < 0.1:
            dropped_after = dissents
    honest = run_scenario(smoke_config())
    t_bad = report.tickets_by_miner.get(bad, 0)
    t_honest_run = honest.tickets_by_miner.get(bad, 0)
    others = [report.tickets_by_miner.get(m, 0) for m in cfg.miner_ids if m != bad]
    ok = (dropped_after is not None and dropped_after <= 5 and report.reputations[bad] < 0.1
          and t_bad < t_honest_run and t_bad < min(others))
    return ok, (f"{len(accepted)}/{cfg.jobs} accepted jobs each in exactly 1 block; miner {bad} outvoted on "
                f"{len(involved)} jobs, below 0.1 after {dropped_after} dissents (final {report.reputations[bad]:.5f}); "
                f"tickets {t_bad} vs {t_honest_run} when honest, honest peers min {min(others)}")


# -- 8: tau --------------------------------------------------------------------------------

def compare_tau(argv):
    import contextlib
    import io

    from povm.cli import main

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["compare", str(SMOKE)] + argv)
    lines = buf.getvalue().strip().splitlines()
    cols = lines[0].split("\t")
    rows = {line.split("\t")[0]: dict(zip(cols, line.split("\t"))) for line in lines[1:3]}
    tau_line = lines[3].split("\t")
    return code, rows, Fraction(tau_line[1])


def criterion_8():
    parts, ok = [], True
    base = json.loads(SMOKE.read_text())
    for label, argv in (("smoke", []), ("smoke d=4 jobs=5", ["--difficulty", "4", "--jobs", "5"])):
        code, rows, tau = compare_tau(argv)
        povm = rows["povm"]
        e = {k: Fraction(str(v)) for k, v in base["energy"].items()}
        instr, runs, msgs = int(povm["vm_instructions"]), int(povm["clone_runs"]), int(povm["dispatch_messages"])
        T = Fraction(instr, runs) * e["joules_per_instruction"]
        c = msgs * e["joules_per_message"]
        pw = e["joules_per_hash_op"] * base["miners"]
        # clear every denominator so the comparison runs in plain integer arithmetic
        scale = math.lcm(T.denominator, c.denominator, pw.denominator)
        hand_scaled = base["k"] * int(T * scale) + int(c * scale) - int(pw * scale)
        match = code == 0 and tau * scale == hand_scaled
        ok &= match
        parts.append(f"{label}: tau={tau} hand={Fraction(hand_scaled, scale)} exact={match}")
    return ok, "; ".join(parts)


# -- 9: fault localization -------------------------------------------------------------------

def counting_loop() -> Program:
    P = Instruction
    return Program((P(Op.PUSH, 0), P(Op.STORE, 0), P(Op.LOAD, 0), P(Op.PUSH, 1), P(Op.ADD), P(Op.STORE, 0),
                    P(Op.JMP, 2)))


def criterion_9():
    checked = 0
    for interval in (1, 7, 50, 100):
        job = Job(0, counting_loop(), Sla(5000, 8, interval))
        clean = execute(job)
        for n in list(range(0, 300)) + list(range(300, 4900, 37)):
            # cell 1 is never written by the program, so the perturbation persists
            faulty = execute(job, Fault(n, cell=1, delta=1))
            got = compare_checkpoints([clean, faulty])
            if got != n // interval:
                return False, f"interval {interval} fault at {n}: diverged at {got}, expected {n // interval}"
            checked += 1
    # with explicit CHECKPOINTs the first differing index counts every checkpoint taken at or before n
    explicit = 0
    for seed in range(40):
        job = coinflip_job(7, seed, Sla(10_000_000, 64, 100))
        clean = execute(job)
        if clean.status is not Status.COMPLETED:
            return False, "coin-flip run failed"
        interval_only = sum(1 for t in clean.checkpoint_ticks if t % 100 == 0)
        explicit += len(clean.checkpoints) - interval_only
        rng = SplitMix64(seed)
        for _ in range(20):
            # a fault after the last checkpoint has nothing left to diverge on
            n = rng.below(clean.checkpoint_ticks[-1])
            faulty = execute(job, Fault(n, cell=5, delta=3))
            want = bisect.bisect_right(clean.checkpoint_ticks, n)
            got = compare_checkpoints([clean, faulty])
            if got != want:
                return False, f"coin-flip seed {seed} fault at {n}: diverged at {got}, expected {want}"
            checked += 1
    return True, (f"{checked} faults: first divergence = floor(n/interval) without explicit checkpoints, "
                  f"offset by the {explicit} explicit ones otherwise")


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 9: criterion_9}


def run_criterion(n: int) -> tuple[bool, str]:
    try:
        return CRITERIA[n]()
    except Exception as exc:  # a crash is a failure of that criterion, not of the whole suite
        return False, f"error: {type(exc).__name__}: {exc}"


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    ok, detail = run_criterion(n)
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for n in sorted(CRITERIA):
        ok, detail = run_criterion(n)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
    sys.exit(1 if failed else 0)
