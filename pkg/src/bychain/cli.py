"""Command-line driver: run, attack, bench, report.

Exit codes: 0 success, 1 scenario error, 2 attack expectation missed,
64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .sim import adversary, report, scenario
from .sim.harness import Simulation

EXIT_OK = 0
EXIT_SCENARIO = 1
EXIT_ATTACK = 2
EXIT_USAGE = 64
SEED_ENV = "BYCHAIN_SEED"
SUMMARY_SCHEMA = "run-summary/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bychain", description="Proof-of-location blockchain simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scenario_flags(sp):
        sp.add_argument("--scenario", default="standard", help="scenario file, or a bundled name")
        sp.add_argument("--seed", type=int, help=f"overrides the scenario seed (fallback: ${SEED_ENV})")
        sp.add_argument("--out", default="bychain-out", help="output directory")
        sp.add_argument("--rounds", type=int, help="override the number of rounds")
        sp.add_argument("--epoch-blocks", type=int, help="blocks per incentive epoch")
        votes = sp.add_mutually_exclusive_group()
        votes.add_argument("--deterministic-votes", dest="votes", action="store_const", const=True,
                           help="expected-value vote casting")
        votes.add_argument("--sampled-votes", dest="votes", action="store_const", const=False,
                           help="multinomial vote casting")
        sp.add_argument("--format", choices=("csv", "text"), default="text")

    run = sub.add_parser("run", help="run a scenario and write the report bundle")
    scenario_flags(run)

    attack = sub.add_parser("attack", help="run a scenario, then the adversary suite")
    scenario_flags(attack)
    attack.add_argument("--all", action="store_true", help="run every built-in attack")
    attack.add_argument("--action", action="append", default=[], choices=sorted(adversary.ACTIONS),
                        help="run one attack with defaults (repeatable)")

    b = sub.add_parser("bench", help="time the signature primitives")
    b.add_argument("--op", choices=bench.OPS + ("all",), default="all")
    b.add_argument("--iters", type=int, default=10_000)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="also write the stats table here")
    b.add_argument("--format", choices=("csv", "text"), default="text")

    rep = sub.add_parser("report", help="print the summary of a finished run")
    rep.add_argument("--run-dir", required=True)
    rep.add_argument("--format", choices=("csv", "text"), default="text")
    return p


def _seed(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _load(args) -> scenario.Scenario:
    sc = scenario.load(args.scenario)
    seed = _seed(args.seed)
    if seed is not None:
        sc = replace(sc, seed=seed)
    if args.rounds is not None:
        sc = replace(sc, rounds=args.rounds)
    if args.epoch_blocks is not None:
        sc = replace(sc, incentive=replace(sc.incentive, epoch_blocks=args.epoch_blocks))
    if args.votes is not None:
        sc = replace(sc, consensus=replace(sc.consensus, deterministic_votes=args.votes))
    return sc


def _summary_csv(text: str) -> str:
    buf = io.StringIO()
    buf.write(f"#schema={SUMMARY_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for line in text.splitlines():
        key, _, value = line.partition(": ")
        w.writerow([key, value])
    return buf.getvalue()


def _emit(text: str, fmt: str):
    sys.stdout.write(_summary_csv(text) if fmt == "csv" else text)


def cmd_run(args) -> int:
    sc = _load(args)
    rep = Simulation(sc).run()
    rep.write(Path(args.out))
    _emit(rep.summary_text(), args.format)
    return EXIT_OK


def cmd_attack(args) -> int:
    sc = _load(args)
    if args.all:
        actions = adversary.default_suite()
    elif args.action:
        actions = [adversary.ACTIONS[name]() for name in args.action]
    elif sc.adversary:
        try:
            actions = [adversary.parse_action(a) for a in sc.adversary]
        except ValueError as exc:
            raise scenario.ScenarioError(str(exc)) from exc
    else:
        actions = adversary.default_suite()
    sim = Simulation(sc)
    rep = sim.run()
    rep.attacks = adversary.run_suite(sim, actions)
    rep.write(Path(args.out))
    _emit(rep.summary_text(), args.format)
    return EXIT_OK if all(a.expected_met for a in rep.attacks) else EXIT_ATTACK


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be positive")
    seed = _seed(args.seed) or 0
    ops = bench.OPS if args.op == "all" else (args.op,)
    stats = [bench.run_bench(op, args.iters, seed) for op in ops]
    buf = io.StringIO()
    buf.write(f"#schema={bench.BENCH_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(bench.BENCH_HEADER)
    for s in stats:
        w.writerow(s.row())
    table = buf.getvalue()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(table)
    if args.format == "csv":
        sys.stdout.write(table)
    else:
        for s in stats:
            print(f"{s.op:<7} n={s.iterations:<6} min={s.min_us:9.2f}us mean={s.mean_us:9.2f}us "
                  f"max={s.max_us:9.2f}us ok={s.success_rate:.2%}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary = run_dir / report.SUMMARY_FILE
    if not summary.is_file():
        raise scenario.ScenarioError(f"no run summary in {run_dir}")
    text = summary.read_text()
    if args.format == "text":
        sys.stdout.write(text)
        attacks = run_dir / "attacks.csv"
        if attacks.is_file():
            _, rows = report.read_csv(attacks)
            for row in rows:
                print(f"  {row['action']}: {row['evidence']}")
    else:
        sys.stdout.write(_summary_csv(text))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "attack": cmd_attack, "bench": cmd_bench, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bychain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except scenario.ScenarioError as exc:
        print(f"bychain: scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
