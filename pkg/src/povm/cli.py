"""Command line: ``povm run | verify | job | compare``.

Exit codes are the only success channel. Standard output carries
machine-readable results; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .encoding import DecodeError
from .hashchain import Chain
from .jobvm import Job, ProgramError, Sla, coinflip_program, execute, parse_program
from .simnet import (
    InvalidConfig, InvariantViolation, ScenarioConfig, SimReport, account_energy, event_to_json, run_scenario,
)

log = logging.getLogger("povm")

EXIT_OK, EXIT_INVALID, EXIT_BROKEN = 0, 1, 2

_OVERRIDABLE = [f.name for f in dataclasses.fields(ScenarioConfig)
                if f.name not in ("faulty_miners", "energy", "mode", "lottery_phase")]


def _setup_logging() -> bool:
    level = os.environ.get("POVM_LOG", "warning").lower()
    trace = level == "trace"
    logging.basicConfig(level=logging.DEBUG if trace else getattr(logging, level.upper(), logging.WARNING),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    return trace


def _add_overrides(p: argparse.ArgumentParser) -> None:
    for name in _OVERRIDABLE:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int, default=None)
    p.add_argument("--mode", choices=["povm", "hashcash"], default=None)
    p.add_argument("--lottery-phase", dest="lottery_phase", type=int, default=None)
    p.add_argument("--threads", type=int, default=1, help="worker threads for clone execution")


def load_config(path: str, args: argparse.Namespace) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfig("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig("<file>", f"not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidConfig("<file>", "top level must be an object")
    for name in _OVERRIDABLE + ["mode", "lottery_phase"]:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return ScenarioConfig.from_dict(data)


def _write_outputs(report: SimReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out_dir / "chain.bin").write_bytes(report.chain.dumps())
    (out_dir / "chain.json").write_text(report.chain.dump_json())
    (out_dir / "metrics.csv").write_text(report.metrics_csv())


def cmd_run(args: argparse.Namespace) -> int:
    trace_all = _setup_logging()
    try:
        cfg = load_config(args.config, args)
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    trace_file = open(args.trace, "w") if args.trace else None

    def tracer(ev):
        line = event_to_json(ev)
        if trace_file is not None:
            trace_file.write(line + "\n")
        if trace_all:
            print(line, file=sys.stderr)

    try:
        report = run_scenario(cfg, threads=args.threads, trace=tracer if (trace_file or trace_all) else None)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_BROKEN
    finally:
        if trace_file is not None:
            trace_file.close()
    _write_outputs(report, Path(args.out))
    summary = {
        "height": report.chain.height,
        "head_digest": report.chain_digest,
        "jobs_accepted": report.jobs_accepted,
        "jobs_submitted": report.jobs_submitted,
        "out": str(args.out),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    _setup_logging()
    try:
        data = Path(args.chain).read_bytes()
        chain = Chain.loads(data)
    except (OSError, DecodeError, ValueError) as exc:
        print(f"unreadable chain file: {exc}", file=sys.stderr)
        return EXIT_BROKEN
    report = chain.validate()
    if report.valid:
        print(f"Valid height={chain.height}")
        return EXIT_OK
    print(f"Invalid height={report.first_invalid} reason={report.reason!r}")
    return EXIT_INVALID


def cmd_job(args: argparse.Namespace) -> int:
    _setup_logging()
    if args.program:
        try:
            program = parse_program(Path(args.program).read_text())
        except OSError as exc:
            print(f"cannot read program: {exc.strerror}", file=sys.stderr)
            return EXIT_BROKEN
        except ProgramError as exc:
            print(f"bad program: {exc}", file=sys.stderr)
            return EXIT_BROKEN
    elif args.k_heads is not None:
        program = coinflip_program(args.k_heads)
    else:
        print("give a program file or --k-heads", file=sys.stderr)
        return EXIT_BROKEN
    try:
        sla = Sla(args.max_instructions, args.max_memory_cells,
                  min(args.checkpoint_interval, args.max_instructions), args.epoch_length)
    except ValueError as exc:
        print(f"bad SLA: {exc}", file=sys.stderr)
        return EXIT_BROKEN
    inputs = tuple(args.input or ())
    trace = execute(Job(id=0, program=program, sla=sla, seed=args.seed, input=inputs))
    output = "none" if trace.output is None else str(trace.output)
    print(f"status={trace.status.value} output={output} instructions={trace.instructions_executed} "
          f"checkpoints={len(trace.checkpoints)} peak_memory={trace.peak_memory_cells}")
    return EXIT_OK if trace.completed else EXIT_INVALID


COMPARE_COLUMNS = ["mode", "blocks", "hash_ops", "vm_instructions", "clone_runs", "dispatch_messages",
                   "joules_pow", "joules_povm", "grams_co2"]


def cmd_compare(args: argparse.Namespace) -> int:
    _setup_logging()
    try:
        base = load_config(args.config, args)
        runs = {}
        for mode in ("povm", "hashcash"):
            cfg = ScenarioConfig.from_dict({**base.to_dict(), "mode": mode})
            runs[mode] = run_scenario(cfg, threads=args.threads)
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_BROKEN

    povm = runs["povm"]
    tau_account = account_energy(povm.totals, base.energy, k=base.k, miners=base.miners)
    rows = []
    for mode, rep in runs.items():
        e = rep.energy.to_json()
        t = rep.totals
        rows.append([mode, rep.chain.height, t["hash_ops"], t["vm_instructions"], t["clone_runs"],
                     t["dispatch_messages"], e["joules_pow"], e["joules_povm"], e["grams_co2"]])
    if args.json:
        out = {
            "modes": {r[0]: dict(zip(COMPARE_COLUMNS[1:], r[1:])) for r in rows},
            "energy_model": base.to_dict()["energy"],
            "tau": tau_account.to_json()["tau"],
            "tau_inputs": tau_account.to_json()["tau_inputs"],
        }
        print(json.dumps(out, sort_keys=True))
        return EXIT_OK
    print("\t".join(COMPARE_COLUMNS))
    for r in rows:
        print("\t".join(str(x) for x in r))
    inputs = tau_account.to_json()["tau_inputs"]
    print(f"tau\t{tau_account.to_json()['tau']}\tk={inputs['k']}\tT={inputs['T']}\tc={inputs['c']}"
          f"\tp={inputs['p']}\tw={inputs['w']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="povm", description="Proof-of-VM blockchain simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write report.json, chain.bin, chain.json, metrics.csv")
    p.add_argument("config")
    p.add_argument("--out", default="out")
    p.add_argument("--trace", default=None, help="write every event as a JSON line to this file")
    _add_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="validate a chain.bin file")
    p.add_argument("chain")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("job", help="run one job locally")
    p.add_argument("program", nargs="?", default=None, help="program text file")
    p.add_argument("--k-heads", dest="k_heads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", type=int, nargs="*", default=None)
    p.add_argument("--max-instructions", dest="max_instructions", type=int, default=10_000_000)
    p.add_argument("--max-memory-cells", dest="max_memory_cells", type=int, default=64)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int, default=1000)
    p.add_argument("--epoch-length", dest="epoch_length", type=int, default=1440)
    p.set_defaults(func=cmd_job)

    p = sub.add_parser("compare", help="run the same load under PoVM and hashcash and report energy and tau")
    p.add_argument("config")
    p.add_argument("--json", action="store_true", help="print one JSON object instead of the table")
    _add_overrides(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
