"""Command-line front end: scan binaries, run scenarios, print the matrix.

Exit codes: 0 on success (and on matching expectations), 1 when an outcome
misses its expectation, 2 for usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import attacks
from .elf import MalformedElf, NotElf, elf_exec_segments
from .policy import PolicyKind
from .scanner import erim_gate_patterns, scan_bytes
from .machine import pkru_locked_value
from .scenario import ScenarioError, parse_scenario, run_scenario

POLICY_CHOICES = [k.value for k in PolicyKind]


def _policy_kind(name: str) -> PolicyKind:
    return PolicyKind(name)


def cmd_scan(args: argparse.Namespace) -> int:
    try:
        blob = Path(args.file).read_bytes()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    patterns = erim_gate_patterns([0, pkru_locked_value(args.trusted_key)])
    regions: list[tuple[int, bytes]] = []
    if args.elf:
        try:
            regions = [(seg.vaddr, seg.data) for seg in elf_exec_segments(blob)]
        except (NotElf, MalformedElf) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    else:
        regions = [(args.base, blob)]

    occurrences = []
    for base, data in regions:
        occurrences.extend(scan_bytes(data, base, patterns))
    if args.json:
        print(
            json.dumps(
                [
                    {
                        "addr": o.addr,
                        "kind": o.kind.value,
                        "safe": o.safe,
                        "spanning": o.spanning,
                        "length": o.length,
                    }
                    for o in occurrences
                ]
            )
        )
    else:
        for o in occurrences:
            print(o.report_line())
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    try:
        text = Path(args.scenario).read_text()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        scn = parse_scenario(text, name=Path(args.scenario).stem)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = run_scenario(scn, _policy_kind(args.policy))
    if args.json:
        print(
            json.dumps(
                {
                    "scenario": scn.name,
                    "policy": args.policy,
                    "outcome": result.outcome.kind.value,
                    "reason": result.outcome.reason,
                    "expectation": scn.expectation.value,
                    "matched": result.matched,
                    "log": result.log_lines(),
                }
            )
        )
    else:
        for line in result.log_lines():
            print(line)
        print(f"outcome: {result.outcome}")
        print(f"expectation: {scn.expectation.value} -> {'ok' if result.matched else 'MISMATCH'}")
    return 0 if result.matched else 1


def cmd_attacks(args: argparse.Namespace) -> int:
    kinds = (
        [_policy_kind(args.policy)] if args.policy else list(PolicyKind)
    )
    scenarios = attacks.builtin_attacks()
    table = attacks.attack_matrix(kinds, scenarios)

    rows = []
    all_match = True
    for scn in scenarios:
        for kind in kinds:
            result = table[(scn.name, kind)]
            expected = attacks.EXPECTED_OUTCOMES.get(scn.name, {}).get(kind)
            if result is None:
                rows.append(
                    {"scenario": scn.name, "policy": kind.value, "outcome": "n/a", "expected": "n/a", "matched": True}
                )
                continue
            outcome = result.outcome.kind.value
            matched = expected is not None and outcome == expected.value
            all_match = all_match and matched
            rows.append(
                {
                    "scenario": scn.name,
                    "policy": kind.value,
                    "outcome": outcome,
                    "expected": expected.value if expected else "n/a",
                    "matched": matched,
                }
            )

    if args.json:
        print(json.dumps({"rows": rows, "all_matched": all_match}))
    else:
        width = max(len(r["scenario"]) for r in rows) + 2
        for r in rows:
            flag = "" if r["matched"] else "  <-- expected " + r["expected"]
            print(f"{r['scenario']:<{width}} {r['policy']:<12} {r['outcome']}{flag}")
        print(f"result: {'all outcomes as expected' if all_match else 'MISMATCH'}")
    return 0 if all_match else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pkusim",
        description="Simulator and policy library for PKU-based in-process sandboxing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_scan = sub.add_parser("scan", help="scan a binary for register-modifying sequences")
    p_scan.add_argument("file")
    p_scan.add_argument("--base", type=lambda s: int(s, 0), default=0, help="load address for flat files")
    p_scan.add_argument("--elf", action="store_true", help="parse as ELF and scan executable segments")
    p_scan.add_argument("--trusted-key", type=int, default=1)
    p_scan.add_argument("--json", action="store_true")
    p_scan.set_defaults(func=cmd_scan)

    p_run = sub.add_parser("run", help="run a scenario file under a policy")
    p_run.add_argument("scenario")
    p_run.add_argument("--policy", choices=POLICY_CHOICES, default="garmr-erim")
    p_run.add_argument("--json", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_attacks = sub.add_parser("attacks", help="run the built-in corpus and print the matrix")
    p_attacks.add_argument("--policy", choices=POLICY_CHOICES)
    p_attacks.add_argument("--json", action="store_true")
    p_attacks.set_defaults(func=cmd_attacks)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
