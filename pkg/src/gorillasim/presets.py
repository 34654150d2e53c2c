"""Ready-made scenarios: tiny deterministic runs, the adversarial wall
demonstration, and fuzzing environments.

``solo`` and ``duo`` are the smallest decidable runs and double as frozen
regression anchors. ``figure1`` scripts six Byzantine chains whose spread
layout is tick-legal yet impossible to repack into step-aligned shells
without peeking: messages 4, 5 and 6 each embed 1, 2 and 3, all three land
at the start of step 4, and per-step adversary capacities 1, 1, 3, 1 leave
the no-peek packer one step short. The fuzz presets are the seeded search
environments the acceptance battery sweeps.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from . import adversary as adv
from . import mappings
from .engine import CorrectNodeSpec, Environment, Trace
from .messages import GorillaMessage, coin_value
from .oracle import Oracle, VdfInput


@dataclass
class Preset:
    name: str
    model: str
    env: Environment
    seeds: Tuple[int, ...]
    make_strategy: Callable[[int], object]
    check_termination: bool
    note: str


def _solo(max_steps: Optional[int]) -> Preset:
    env = Environment(
        k=3, n=1, max_steps=max_steps or 20,
        correct=(CorrectNodeSpec("p", "a"),),
        capacity=(0,),
    )
    return Preset(
        name="solo", model="gm", env=env, seeds=(0,),
        make_strategy=lambda seed: adv.NullStrategy(),
        check_termination=max_steps is None,
        note="single node, input a: decides a at round 16 / step 15",
    )


def _duo(max_steps: Optional[int]) -> Preset:
    env = Environment(
        k=3, n=2, max_steps=max_steps or 50,
        correct=(CorrectNodeSpec("p", "b"), CorrectNodeSpec("q", "b")),
        capacity=(0,),
    )
    return Preset(
        name="duo", model="gm", env=env, seeds=(0,),
        make_strategy=lambda seed: adv.NullStrategy(),
        check_termination=max_steps is None,
        note="two nodes, both input b: decide b at round 43 / step 42",
    )


def _duo_split(max_steps: Optional[int]) -> Preset:
    env = Environment(
        k=3, n=2, max_steps=max_steps or 80,
        correct=(CorrectNodeSpec("p", "a"), CorrectNodeSpec("q", "b")),
        capacity=(0,),
    )
    return Preset(
        name="duo-split", model="gm", env=env, seeds=(7,),
        make_strategy=lambda seed: adv.NullStrategy(),
        check_termination=max_steps is None,
        note="two nodes, inputs a and b: coin ties break by step ~44",
    )


FIG1_CAPACITY = (1, 1, 3, 1)


def figure1_script(seed: int, unit_bits: int = 64) -> Dict[int, List[object]]:
    """Six chains spread across steps 0-3 under capacities 1,1,3,1.

    Chains 1-3 carry independent round-1 messages; chains 4-6 embed all
    three. Units are packed so every Byzantine unit-tick is used: 1-3 finish
    together at tick 6, 4-6 start at tick 7 and finish at ticks 9, 10, 11,
    and all of messages 4-6 are broadcast at tick 11, reaching the correct
    nodes at step 4's first tick.
    """
    k = 3
    scratch = Oracle(seed, k, unit_bits=unit_bits)
    base: List[VdfInput] = []
    members: List[GorillaMessage] = []
    for i in (1, 2, 3):
        inp = VdfInput(frozenset(), b"fig1-m%d" % i)
        v = scratch.value(inp)
        base.append(inp)
        members.append(GorillaMessage(
            round=1, value=coin_value(v), priority=0, uc=0,
            coffer=frozenset(), nonce=inp.nonce, vdf=v,
        ))
    top_coffer = frozenset(m.id for m in members)
    tops = [VdfInput(top_coffer, b"fig1-m%d" % i) for i in (4, 5, 6)]
    g = adv.ByzGet
    return {
        0: [g(0, "y0", base[0]), g(1, "y0", base[0]), g(2, "y0", base[1])],
        1: [g(3, "y1", base[1]), g(4, "y1", base[2]), g(5, "y1", base[2])],
        2: [
            adv._InternHint(message=members[0]),
            adv._InternHint(message=members[1]),
            adv._InternHint(message=members[2]),
            g(6, "y2a", base[0]), g(6, "y2b", base[1]), g(6, "y2c", base[2]),
            g(7, "y2a", tops[0]), g(7, "y2b", tops[1]), g(7, "y2c", tops[2]),
            g(8, "y2a", tops[0]), g(8, "y2b", tops[1]), g(8, "y2c", tops[2]),
        ],
        3: [
            g(9, "y3", tops[0]),
            g(10, "y3", tops[1]),
            g(11, "y3", tops[2]),
            adv.ByzSend(11, "y3", top_coffer, tops[0].nonce, ("*",)),
            adv.ByzSend(11, "y3", top_coffer, tops[1].nonce, ("*",)),
            adv.ByzSend(11, "y3", top_coffer, tops[2].nonce, ("*",)),
        ],
    }


def _figure1(max_steps: Optional[int]) -> Preset:
    env = Environment(
        k=3, n=7, max_steps=max_steps or 5,
        correct=(
            CorrectNodeSpec("p1", "a"), CorrectNodeSpec("p2", "b"),
            CorrectNodeSpec("p3", "a"), CorrectNodeSpec("p4", "b"),
        ),
        capacity=FIG1_CAPACITY,
    )
    return Preset(
        name="figure1", model="gm", env=env, seeds=(0,),
        make_strategy=lambda seed: adv.ScriptedStrategy(
            figure1_script(seed), label="figure1"
        ),
        check_termination=False,
        note="spread chains that repack only with peeking",
    )


def _fuzz_gm(max_steps: Optional[int]) -> Preset:
    env = Environment(
        k=3, n=3, max_steps=max_steps or 60,
        correct=(CorrectNodeSpec("p", "a"), CorrectNodeSpec("q", "b")),
        capacity=(1,),
    )
    return Preset(
        name="fuzz-gm", model="gm", env=env,
        seeds=tuple(range(20)),
        make_strategy=lambda seed: adv.FuzzStrategy(seed=seed),
        check_termination=False,
        note="seeded adversary search, two correct nodes vs one slot",
    )


def _fuzz_smplus(max_steps: Optional[int]) -> Preset:
    env = Environment(
        k=3, n=3, max_steps=max_steps or 60,
        correct=(CorrectNodeSpec("p", "a"), CorrectNodeSpec("q", "b")),
        capacity=(1,),
    )
    return Preset(
        name="fuzz-smplus", model="sm+", env=env,
        seeds=tuple(range(20)),
        make_strategy=lambda seed: adv.FuzzScheduler(seed=seed),
        check_termination=False,
        note="seeded scheduler search in the benign model",
    )


_PRESETS: Dict[str, Callable[[Optional[int]], Preset]] = {
    "solo": _solo,
    "duo": _duo,
    "duo-split": _duo_split,
    "figure1": _figure1,
    "fuzz-gm": _fuzz_gm,
    "fuzz-smplus": _fuzz_smplus,
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def get_preset(name: str, max_steps: Optional[int] = None) -> Preset:
    if name not in _PRESETS:
        raise KeyError(
            "unknown preset %r (have: %s)" % (name, ", ".join(PRESET_NAMES))
        )
    return _PRESETS[name](max_steps)


def figure1_demo(trace: Trace) -> Dict[str, object]:
    """Repack the scripted trace both ways and report what happened.

    Without peeks the packer must run dry: chains 1-3 occupy one shell in
    each of steps 0-2, so chains 4-6 all need step 3, which holds one. With
    peeks two of them share step 2 with their dependency and the report
    carries the shell layout plus the claim/condition check results.
    """
    report: Dict[str, object] = {}
    try:
        mappings.reorg(trace, allow_peek=False)
        report["no_peek"] = {"outcome": "reorganized"}
    except mappings.ShellExhaustion as exc:
        report["no_peek"] = {
            "outcome": "shell-exhaustion",
            "detail": str(exc),
            "chain": exc.digest.hex(),
            "window": [exc.earliest, exc.deadline],
        }
    rebuilt, assignment = mappings.reorg(trace, allow_peek=True)
    peeked = sorted({
        ev.data["input"].hex()[:12]
        for ev in rebuilt.events
        if ev.kind == "PeekCall"
    })
    # the rebuild runs under the peek-auditing engine, which aborts on any
    # broken pledge, so reaching this point certifies the audit
    report["peek"] = {
        "outcome": "reorganized",
        "shells": {
            d.hex()[:12]: assignment.step_of[d]
            for d in sorted(assignment.step_of)
        },
        "peeked_chains": peeked,
        "audit": "clean",
        "reorg_problems": mappings.check_reorg(trace, rebuilt, assignment),
        "claim_problems": mappings.check_claims(trace, rebuilt, assignment),
    }
    return report
