"""Executable protocol properties over finished traces.

Each checker replays nothing: it reads the event log and the message store
and reports whether a property held, with enough detail to debug a failure.
Agreement, validity and termination are the consensus properties; the
support checker enforces the threshold structure every honest message must
carry; the round-gap checker is the benign-model synchronization bound; coin
statistics feed the fairness test.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .engine import Trace
from .messages import VALUES
from .oracle import Oracle, VdfInput

HONEST_ROLE = "correct"


@dataclass
class PropertyReport:
    name: str
    passed: bool
    details: List[str] = field(default_factory=list)
    stats: Dict[str, object] = field(default_factory=dict)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = ("; " + "; ".join(self.details)) if self.details else ""
        return "%s %s%s" % (mark, self.name, extra)


def _decisions(trace: Trace) -> Dict[str, List[Tuple[int, str]]]:
    """Per honest node: every (step, value) it decided, in order."""
    out: Dict[str, List[Tuple[int, str]]] = {}
    for ev in trace.events:
        if ev.kind == "Decide" and ev.data.get("role") == HONEST_ROLE:
            out.setdefault(ev.data["node"], []).append(
                (ev.data["step"], ev.data["value"])
            )
    return out


def check_agreement(trace: Trace) -> PropertyReport:
    """No two honest decisions, by any nodes at any steps, differ."""
    decided = _decisions(trace)
    values = {v for pairs in decided.values() for _, v in pairs}
    details = []
    for node, pairs in sorted(decided.items()):
        vals = {v for _, v in pairs}
        if len(vals) > 1:
            details.append("%s flipped its decision: %s" % (node, pairs))
    if len(values) > 1:
        details.append(
            "conflicting decisions: "
            + ", ".join(
                "%s=%s" % (n, pairs[0][1]) for n, pairs in sorted(decided.items())
            )
        )
    return PropertyReport(
        name="agreement",
        passed=not details,
        details=details,
        stats={"deciders": len(decided), "values": sorted(values)},
    )


def check_validity(trace: Trace) -> PropertyReport:
    """Decisions come from the value alphabet, and when every honest node
    started with the same value, that value is the only possible decision."""
    inputs = {spec.value for spec in trace.env.correct}
    decided = _decisions(trace)
    details = []
    for node, pairs in sorted(decided.items()):
        for step, v in pairs:
            if v not in VALUES:
                details.append("%s decided a non-value %r at step %d" % (node, v, step))
            if len(inputs) == 1 and v != next(iter(inputs)):
                details.append(
                    "%s decided %s against the unanimous input %s"
                    % (node, v, next(iter(inputs)))
                )
    return PropertyReport(
        name="validity",
        passed=not details,
        details=details,
        stats={"inputs": sorted(inputs)},
    )


def check_termination(trace: Trace, within: Optional[int] = None) -> PropertyReport:
    """Every honest node that stays active to the end decides, no later than
    ``within`` (defaults to the run's horizon)."""
    deadline = within if within is not None else trace.env.max_steps
    last_step = trace.meta.get("stopped_at_step", trace.env.max_steps - 1)
    decided = _decisions(trace)
    details = []
    steps = {}
    for spec in trace.env.correct:
        if spec.leave is not None and spec.leave <= last_step:
            continue  # left before the end; termination says nothing about it
        pairs = decided.get(spec.node_id)
        if not pairs:
            details.append("%s never decided" % spec.node_id)
            continue
        steps[spec.node_id] = pairs[0][0]
        if pairs[0][0] > deadline:
            details.append(
                "%s decided at step %d, after the bound %d"
                % (spec.node_id, pairs[0][0], deadline)
            )
    return PropertyReport(
        name="termination",
        passed=not details,
        details=details,
        stats={"decision_steps": steps, "bound": deadline},
    )


def check_round_gap(trace: Trace, max_gap: int = 1) -> PropertyReport:
    """Honest nodes broadcasting in the same step sit within ``max_gap``
    rounds of each other. In the benign model with synchronized receipt this
    gap is at most one; the synchronous models inherit it per step."""
    by_step: Dict[int, Dict[str, int]] = {}
    for ev in trace.events:
        if ev.kind == "Broadcast" and ev.data.get("role") == HONEST_ROLE:
            m = trace.store.get(ev.data["msg"])
            by_step.setdefault(ev.data["step"], {})[ev.data["node"]] = m.round
    details = []
    worst = 0
    for step in sorted(by_step):
        rounds = by_step[step]
        gap = max(rounds.values()) - min(rounds.values())
        worst = max(worst, gap)
        if gap > max_gap and len(details) < 5:
            details.append(
                "step %d: rounds %s spread %d > %d"
                % (step, sorted(rounds.values()), gap, max_gap)
            )
    return PropertyReport(
        name="round-gap",
        passed=not details,
        details=details,
        stats={"worst_gap": worst, "bound": max_gap},
    )


def check_support(trace: Trace) -> PropertyReport:
    """Every honest broadcast carries the threshold structure: enough
    round-(r-1) support in its closure, an under-threshold current slice, and
    matching counter/priority. Synchronous traces additionally verify every
    chain value against the oracle."""
    t = trace.t
    synchronous = trace.model in ("gm", "gm+")
    oracle = None
    if synchronous:
        oracle = Oracle(trace.seed, trace.k, plus=(trace.model == "gm+"),
                        unit_bits=trace.meta.get("unit_bits", 64))
    details = []
    checked = 0
    for ev in trace.events:
        if ev.kind != "Broadcast" or ev.data.get("role") != HONEST_ROLE:
            continue
        mid = ev.data["msg"]
        msg = trace.store.get(mid)
        checked += 1
        problem = trace.store.check_structure(msg, t)
        if problem is None and synchronous:
            ok, reason = trace.store.is_valid(mid, oracle, t)
            if not ok:
                problem = reason
        if problem is not None and len(details) < 5:
            details.append(
                "%s step %d: %s" % (ev.data["node"], ev.data["step"], problem)
            )
    return PropertyReport(
        name="support",
        passed=not details,
        details=details,
        stats={"messages": checked, "threshold": t},
    )


def coin_statistics(trace: Trace) -> Dict[str, object]:
    """Counts of honest tie-break draws by value, for fairness aggregation."""
    counts: Dict[str, int] = {}
    for ev in trace.events:
        if ev.kind == "CoinOutcome" and ev.data.get("role") == HONEST_ROLE:
            counts[ev.data["value"]] = counts.get(ev.data["value"], 0) + 1
    total = sum(counts.values())
    first = VALUES[0]
    freq = counts.get(first, 0) / total if total else None
    return {"counts": counts, "total": total, "first_value_frequency": freq}


def standard_checks(trace: Trace, expect_decisions: bool = True) -> List[PropertyReport]:
    """The battery the command line runs after a simulation."""
    reports = [check_agreement(trace), check_validity(trace), check_support(trace)]
    if trace.model == "sm+":
        reports.append(check_round_gap(trace))
    if expect_decisions:
        reports.append(check_termination(trace))
    return reports
