"""Command-line entry point.

Three subcommands: ``run`` executes seeded simulations and writes trace
files plus property reports, ``map`` repacks a saved trace into step-aligned
shells and translates it into the benign model with every condition checked,
and ``fuzz`` sweeps seeds and summarizes violations. Outputs carry no
timestamps, so identical invocations write identical bytes.

Exit codes: 0 all checks passed, 1 a property or mapping check failed,
2 unusable input (config, trace file or flags), 3 the strategy broke a
model rule mid-run.
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Tuple

from . import mappings
from .checkers import PropertyReport, coin_statistics, standard_checks
from .engine import IllegalStrategyAction, Trace, run, run_smplus
from .presets import PRESET_NAMES, figure1_demo, get_preset
from .tracefile import (
    ConfigError,
    TraceFormatError,
    load_config,
    load_trace,
    save_trace,
)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_BAD_INPUT = 2
EXIT_ILLEGAL_STRATEGY = 3


def _parse_seeds(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip() != "")
    except ValueError:
        raise ConfigError("--seed wants comma-separated integers, got %r" % text)


def _dump_json(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _execute(model: str, env, strategy, seed: int, unit_bits: int) -> Trace:
    if model == "sm+":
        return run_smplus(env, scheduler=strategy, seed=seed)
    return run(env, strategy, seed=seed, model=model)


class RunPlan:
    """Everything a subcommand needs to execute seeded runs."""

    def __init__(self, env, model, label, seeds, make_strategy, check_termination):
        self.env = env
        self.model = model
        self.label = label
        self.seeds = tuple(seeds)
        self.make_strategy = make_strategy
        self.check_termination = check_termination

    def runs(self):
        return [(s, self.make_strategy(s)) for s in self.seeds]


def _resolve_plan(args) -> RunPlan:
    if (args.preset is None) == (args.config is None):
        raise ConfigError("choose exactly one of --preset or --config")
    if args.preset is not None:
        preset = get_preset(args.preset, max_steps=args.max_steps)
        return RunPlan(
            env=preset.env,
            model=args.model or preset.model,
            label=preset.name,
            seeds=_parse_seeds(args.seed) if args.seed else preset.seeds,
            make_strategy=preset.make_strategy,
            check_termination=preset.check_termination,
        )
    cfg = load_config(args.config)
    env = cfg.env
    if args.max_steps is not None:
        from dataclasses import replace
        env = replace(env, max_steps=args.max_steps)
    return RunPlan(
        env=env,
        model=args.model or cfg.model,
        label=os.path.splitext(os.path.basename(args.config))[0],
        seeds=_parse_seeds(args.seed) if args.seed else cfg.seeds,
        make_strategy=cfg.make_strategy,
        check_termination=False,
    )


def _report_dict(reports: List[PropertyReport]) -> Dict[str, object]:
    return {
        r.name: {"passed": r.passed, "details": r.details, "stats": r.stats}
        for r in reports
    }


def cmd_run(args) -> int:
    plan = _resolve_plan(args)
    label, model = plan.label, plan.model
    os.makedirs(args.out, exist_ok=True)
    failed = False
    for seed, strategy in plan.runs():
        trace = _execute(model, plan.env, strategy, seed, unit_bits=64)
        reports = standard_checks(trace, expect_decisions=plan.check_termination)
        stem = "%s-s%d" % (label, seed)
        save_trace(trace, os.path.join(args.out, "trace-%s.jsonl" % stem))
        report = {
            "label": label,
            "seed": seed,
            "model": model,
            "stopped_at_step": trace.meta.get("stopped_at_step"),
            "decisions": trace.meta.get("decisions", {}),
            "coins": coin_statistics(trace),
            "checks": _report_dict(reports),
        }
        if label == "figure1":
            demo = figure1_demo(trace)
            report["repack"] = demo
            ok = (
                demo["no_peek"]["outcome"] == "shell-exhaustion"
                and demo["peek"]["outcome"] == "reorganized"
                and not demo["peek"]["reorg_problems"]
                and not demo["peek"]["claim_problems"]
            )
            reports.append(PropertyReport(
                name="repack-contrast",
                passed=ok,
                details=[] if ok else ["expected no-peek exhaustion and a clean peek repack"],
            ))
            report["checks"] = _report_dict(reports)
        _dump_json(report, os.path.join(args.out, "report-%s.json" % stem))
        for r in reports:
            print("%s seed=%d %s" % (label, seed, r.line()))
        failed = failed or any(not r.passed for r in reports)
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_map(args) -> int:
    trace = load_trace(args.trace)
    stem = os.path.splitext(os.path.basename(args.trace))[0]
    os.makedirs(args.out, exist_ok=True)
    try:
        rebuilt, assignment = mappings.reorg(trace, allow_peek=not args.no_peek)
    except mappings.ShellExhaustion as exc:
        print("reorg: shell exhaustion: %s" % exc)
        _dump_json(
            {"source": stem, "outcome": "shell-exhaustion", "detail": str(exc)},
            os.path.join(args.out, "map-report-%s.json" % stem),
        )
        return EXIT_VIOLATION
    report: Dict[str, object] = {
        "source": stem,
        "outcome": "reorganized",
        "shells": len(assignment.step_of),
        "peek": not args.no_peek,
    }
    problems: List[str] = []
    if args.which in ("reorg", "both"):
        save_trace(rebuilt, os.path.join(args.out, "reorg-%s.jsonl" % stem))
        reorg_problems = mappings.check_reorg(trace, rebuilt, assignment)
        claim_problems = mappings.check_claims(trace, rebuilt, assignment)
        report["reorg_problems"] = reorg_problems
        report["claim_problems"] = claim_problems
        problems += reorg_problems + claim_problems
        print("reorg: %d shells, %d condition problems, %d claim problems"
              % (len(assignment.step_of), len(reorg_problems), len(claim_problems)))
    if args.which in ("interpret", "both"):
        interp = mappings.interpret(rebuilt)
        save_trace(interp.sm_trace,
                   os.path.join(args.out, "interpreted-%s.jsonl" % stem))
        interp_problems = mappings.check_interpretation(rebuilt, interp)
        instances = sum(
            1 for sender, _uid in interp.attribution.values()
            if sender.startswith("d")
        )
        report["interpretation_problems"] = interp_problems
        report["defective_instances"] = instances
        report["dropped_messages"] = len(interp.dropped)
        problems += interp_problems
        print("interpret: %d defective instances, %d dropped, %d condition problems"
              % (instances, len(interp.dropped), len(interp_problems)))
    _dump_json(report, os.path.join(args.out, "map-report-%s.json" % stem))
    return EXIT_VIOLATION if problems else EXIT_OK


def cmd_fuzz(args) -> int:
    plan = _resolve_plan(args)
    label, model = plan.label, plan.model
    if args.count is not None:
        plan.seeds = tuple(range(args.count))
    runs = plan.runs()
    os.makedirs(args.out, exist_ok=True)
    totals: Dict[str, int] = {}
    violations: List[str] = []
    decided = 0
    for seed, strategy in runs:
        try:
            trace = _execute(model, plan.env, strategy, seed, unit_bits=64)
        except IllegalStrategyAction as exc:
            violations.append("seed %d: illegal strategy action: %s" % (seed, exc))
            continue
        reports = standard_checks(trace, expect_decisions=False)
        if model in ("gm", "gm+") and not args.no_map:
            rebuilt, assignment = mappings.reorg(trace, allow_peek=True)
            extra = (
                mappings.check_reorg(trace, rebuilt, assignment)
                + mappings.check_claims(trace, rebuilt, assignment)
            )
            interp = mappings.interpret(rebuilt)
            extra += mappings.check_interpretation(rebuilt, interp)
            if extra:
                reports.append(PropertyReport("mapping", False, extra))
            else:
                reports.append(PropertyReport("mapping", True))
        if trace.meta.get("decisions"):
            decided += 1
        for r in reports:
            totals[r.name] = totals.get(r.name, 0) + 1
            if not r.passed:
                violations.append("seed %d: %s" % (seed, r.line()))
                save_trace(trace, os.path.join(
                    args.out, "violation-%s-s%d.jsonl" % (label, seed)))
    summary = {
        "label": label,
        "model": model,
        "runs": len(runs),
        "runs_with_decisions": decided,
        "checks_run": totals,
        "violations": violations,
    }
    _dump_json(summary, os.path.join(args.out, "fuzz-summary-%s.json" % label))
    print("fuzz %s: %d runs, %d with decisions, %d violations"
          % (label, len(runs), decided, len(violations)))
    for v in violations[:10]:
        print("  " + v)
    return EXIT_VIOLATION if violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gorillasim",
        description="Tick-accurate consensus simulator and verification harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--preset", choices=PRESET_NAMES,
                       help="built-in scenario instead of a config")
        p.add_argument("--seed", help="comma-separated seed list")
        p.add_argument("--model", choices=("gm", "gm+", "sm+"),
                       help="override the configured model")
        p.add_argument("--max-steps", type=int, dest="max_steps",
                       help="override the configured horizon")
        p.add_argument("--out", default="out", help="output directory")

    p_run = sub.add_parser("run", help="simulate and check properties")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_map = sub.add_parser("map", help="repack and translate a saved trace")
    p_map.add_argument("trace", help="trace file from a run")
    p_map.add_argument("--which", choices=("reorg", "interpret", "both"),
                       default="both")
    p_map.add_argument("--no-peek", action="store_true",
                       help="forbid completion pledges while repacking")
    p_map.add_argument("--out", default="out", help="output directory")
    p_map.set_defaults(func=cmd_map)

    p_fuzz = sub.add_parser("fuzz", help="seed sweep with every checker on")
    common(p_fuzz)
    p_fuzz.add_argument("--count", type=int,
                        help="run seeds 0..count-1 instead of the seed list")
    p_fuzz.add_argument("--no-map", action="store_true",
                        help="skip the repack/translate checks")
    p_fuzz.set_defaults(func=cmd_fuzz)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceFormatError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_BAD_INPUT
    except FileNotFoundError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_BAD_INPUT
    except IllegalStrategyAction as exc:
        print("error: illegal strategy action: %s" % exc, file=sys.stderr)
        return EXIT_ILLEGAL_STRATEGY


if __name__ == "__main__":
    sys.exit(main())
