"""Adversary interfaces: Byzantine strategies for the synchronous models and
scheduler strategies for the benign asynchronous model, plus seeded fuzzers
for both and for environments.

A Byzantine strategy is planned per step: given a view of everything sent so
far it returns tick-stamped actions (Get, Peek, Send). The engine executes
them under model legality; a strategy that oversteps aborts the run. Sends to
correct nodes follow the library convention of landing on step-first receive
ticks (mid-step delivery is ingestion-equivalent, and boundary delivery keeps
trace comparisons exact).
"""

import random
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .messages import GorillaMessage, MessageStore, coin_value
from .oracle import Oracle, VdfInput


@dataclass(frozen=True)
class ByzGet:
    tick: int
    slot: str
    input: VdfInput


@dataclass(frozen=True)
class ByzPeek:
    tick: int
    slot: str
    input: VdfInput
    commit_tick: int


@dataclass(frozen=True)
class ByzSend:
    """Send a message at a tick.

    With ``raw`` unset the engine derives protocol-consistent fields over the
    coffer and fills the true chain value (the send is then subject to the
    knowledge rule). With ``raw`` set the exact fields are sent as-is, which
    is how invalid messages are produced.
    """

    tick: int
    slot: str
    coffer: FrozenSet[bytes]
    nonce: bytes
    to: Tuple[str, ...]  # recipient node ids, or ("*",) for broadcast
    raw: Optional[GorillaMessage] = None


@dataclass
class StrategyView:
    step: int
    model: str
    k: int
    t: int
    capacity: int
    correct_ids: List[str]
    active_correct: List[str]
    store: MessageStore
    oracle: Oracle
    correct_broadcasts: List[Tuple[int, bytes]]
    byz_sent: List[bytes]
    rng: random.Random


def derive_fields(store: MessageStore, t: int, coffer: FrozenSet[bytes], vdf: int):
    """Round, value, priority and unanimity counter a protocol-follower would
    attach to this coffer and chain value. The round is pinned by the coffer;
    the value falls back to the chain's parity when the top support is mixed.
    """
    seen = store.closure_union(coffer)
    by_round: Dict[int, List] = {}
    for x in (store.get(m) for m in seen):
        by_round.setdefault(x.round, []).append(x)
    reachable = [r for r, xs in by_round.items() if len(xs) >= t]
    if not reachable:
        return 1, None, 0, 0
    rnd = max(reachable) + 1
    prev = by_round[rnd - 1]
    top = max(x.priority for x in prev)
    support = {x.value for x in prev if x.priority == top}
    value = next(iter(support)) if len(support) == 1 else coin_value(vdf)
    if all(x.value == value for x in prev):
        uc = 1 + min(x.uc for x in prev)
    else:
        uc = 0
    return rnd, value, max(0, uc // t - 5), uc


def shape_coffer(
    store: MessageStore,
    members: Iterable[bytes],
    t: int,
    extra: Optional[Tuple[bytes, int]] = None,
) -> FrozenSet[bytes]:
    """Rebuild a member pick the way a single node step would emit it: the
    closure of the supporting round slice plus the current-round slice.

    Shaped coffers are exactly the coffers one protocol step can produce, so
    a message derived over one stays reproducible by a single follower fed
    its members. ``extra`` names one not-yet-interned message (id, round)
    whose own coffer equals ``members``; it is treated as a member too.
    """
    seen = store.closure_union(members)
    rounds = {m: store.get(m).round for m in seen}
    if extra is not None:
        seen.add(extra[0])
        rounds[extra[0]] = extra[1]
    by_round: Dict[int, Set[bytes]] = {}
    for m in seen:
        by_round.setdefault(rounds[m], set()).add(m)
    reachable = [r for r, ids in by_round.items() if len(ids) >= t]
    rnd = max(reachable) + 1 if reachable else 1
    if rnd == 1:
        return frozenset(by_round.get(1, set()))
    support = by_round.get(rnd - 1, set())
    if extra is not None and extra[0] in support:
        shaped = set(seen)
    else:
        shaped = store.closure_union(support)
    shaped.update(by_round.get(rnd, ()))
    return frozenset(shaped)


def build_message(store: MessageStore, t: int, coffer: FrozenSet[bytes], nonce: bytes, vdf: int) -> GorillaMessage:
    rnd, value, priority, uc = derive_fields(store, t, coffer, vdf)
    if value is None:
        value = coin_value(vdf)
    return GorillaMessage(
        round=rnd, value=value, priority=priority, uc=uc,
        coffer=coffer, nonce=nonce, vdf=vdf,
    )


class Strategy:
    name = "null"

    def __init__(self, **params) -> None:
        self.params = params

    def plan_step(self, view: StrategyView) -> List[object]:
        return []

    def describe(self) -> Dict[str, object]:
        return {"name": self.name, "params": dict(self.params)}


class NullStrategy(Strategy):
    """No Byzantine activity at all."""

    name = "null"


class _ChainPlanner:
    """Shared bookkeeping: spread one chain's K Gets across steps and track
    how many units are already planned.
    """

    def __init__(self) -> None:
        self.progress: Dict[bytes, int] = {}

    def plan_gets(self, inp: VdfInput, slot: str, t0: int, k: int, budget_ticks: Sequence[int]) -> List[ByzGet]:
        done = self.progress.get(inp.digest, 0)
        out = []
        for tick in budget_ticks:
            if done >= k:
                break
            out.append(ByzGet(tick=tick, slot=slot, input=inp))
            done += 1
        self.progress[inp.digest] = done
        return out


class SplitVdfStrategy(Strategy):
    """Spread each chain's K Gets across two steps, then deliver.

    The message lands one step later than a step-aligned computation would
    allow, which is exactly what the shell reorganization has to repair.
    """

    name = "split_vdf"

    def __init__(self, start_step: int = 1, **params) -> None:
        super().__init__(start_step=start_step, **params)
        self.start_step = start_step
        self._chains = _ChainPlanner()
        self._current: Optional[Tuple[VdfInput, bytes]] = None
        self._ready: List[Tuple[int, VdfInput]] = []
        self._counter = 0

    def plan_step(self, view: StrategyView) -> List[object]:
        if view.capacity < 1 or view.step < self.start_step:
            return []
        k, t0 = view.k, view.step * view.k
        actions: List[object] = []
        first = max(1, k // 2)
        if self._current is None:
            known = [m for _, m in view.correct_broadcasts[-(2 * view.t + 4):]]
            if not known:
                return []
            self._counter += 1
            nonce = ("split|%d" % self._counter).encode()
            inp = VdfInput(shape_coffer(view.store, known, view.t), nonce)
            self._current = (inp, nonce)
            actions.extend(self._chains.plan_gets(inp, "b0", t0, k, range(t0, t0 + first)))
        else:
            inp, _ = self._current
            done = self._chains.progress[inp.digest]
            ticks = range(t0, t0 + (k - done))
            actions.extend(self._chains.plan_gets(inp, "b0", t0, k, ticks))
            if self._chains.progress[inp.digest] >= k:
                actions.append(
                    ByzSend(
                        tick=t0 + k - 1,
                        slot="b0",
                        coffer=inp.coffer,
                        nonce=inp.nonce,
                        to=tuple(view.active_correct),
                    )
                )
                self._current = None
        return actions


class WithholdReleaseStrategy(Strategy):
    """Compute a valid message step-aligned, sit on it, release it late."""

    name = "withhold_release"

    def __init__(self, delay: int = 2, recipients: str = "all", **params) -> None:
        super().__init__(delay=delay, recipients=recipients, **params)
        self.delay = delay
        self.recipients = recipients
        self._held: List[Tuple[int, VdfInput]] = []
        self._counter = 0

    def plan_step(self, view: StrategyView) -> List[object]:
        if view.capacity < 1:
            return []
        k, t0 = view.k, view.step * view.k
        actions: List[object] = []
        for due, inp in list(self._held):
            if due == view.step:
                targets = view.active_correct
                if self.recipients == "first" and targets:
                    targets = targets[:1]
                if targets:
                    actions.append(
                        ByzSend(tick=t0 + k - 1, slot="b0", coffer=inp.coffer,
                                nonce=inp.nonce, to=tuple(targets))
                    )
                self._held.remove((due, inp))
        known = [m for _, m in view.correct_broadcasts[-(2 * view.t + 4):]]
        if known and view.step % (self.delay + 1) == 1:
            self._counter += 1
            nonce = ("hold|%d" % self._counter).encode()
            inp = VdfInput(shape_coffer(view.store, known, view.t), nonce)
            for j in range(k):
                actions.append(ByzGet(tick=t0 + j, slot="b0", input=inp))
            self._held.append((view.step + self.delay, inp))
        return actions


class EquivocateNonceStrategy(Strategy):
    """One honest chain, two messages: the true (coffer, nonce) pair goes to
    half the nodes, the other half get the same chain value glued to a fresh
    nonce, which no verifier accepts.
    """

    name = "equivocate_nonce"

    def __init__(self, at_step: int = 2, **params) -> None:
        super().__init__(at_step=at_step, **params)
        self.at_step = at_step
        self._inp: Optional[VdfInput] = None
        self._sent = False

    def plan_step(self, view: StrategyView) -> List[object]:
        if view.capacity < 1 or self._sent:
            return []
        k, t0 = view.k, view.step * view.k
        if view.step == self.at_step:
            known = [m for _, m in view.correct_broadcasts[-(2 * view.t + 4):]]
            if not known:
                return []
            self._inp = VdfInput(shape_coffer(view.store, known, view.t), b"equi|real")
            return [ByzGet(tick=t0 + j, slot="b0", input=self._inp) for j in range(k)]
        if self._inp is not None and view.step == self.at_step + 1:
            self._sent = True
            inp = self._inp
            vdf = view.oracle.value(inp)
            half = max(1, len(view.active_correct) // 2)
            honest_to = tuple(view.active_correct[:half])
            forged_to = tuple(view.active_correct[half:]) or honest_to
            forged = build_message(view.store, view.t, inp.coffer, b"equi|forged", vdf)
            return [
                ByzSend(tick=t0 + k - 1, slot="b0", coffer=inp.coffer,
                        nonce=inp.nonce, to=honest_to),
                ByzSend(tick=t0 + k - 1, slot="b0", coffer=inp.coffer,
                        nonce=b"equi|forged", to=forged_to, raw=forged),
            ]
        return []


class FuzzStrategy(Strategy):
    """Seeded random legal behavior: start chains over random known subsets,
    finish them, deliver to random recipients with random lag, sprinkle in
    junk sends; in the peek model, occasionally build on a peeked same-step
    chain the way the reorganized histories do.
    """

    name = "fuzz"

    def __init__(self, seed: int = 0, junk_rate: float = 0.15, peeky: bool = False, **params) -> None:
        super().__init__(seed=seed, junk_rate=junk_rate, peeky=peeky, **params)
        self.rng = random.Random("fuzzstrat|%d" % seed)
        self.junk_rate = junk_rate
        self.peeky = peeky
        self._chains = _ChainPlanner()
        self._open: List[VdfInput] = []
        self._complete: List[VdfInput] = []
        self._counter = 0

    def _fresh_input(self, view: StrategyView) -> Optional[VdfInput]:
        # a recent window keeps adversary coffers the size real attacks use;
        # stuffing the whole history in gains nothing and only slows runs
        known = [m for _, m in view.correct_broadcasts[-(3 * view.t):]]
        for mid in view.byz_sent[-6:]:
            if self.rng.random() < 0.5:
                known.append(mid)
        if not known:
            return None
        size = self.rng.randint(1, min(len(known), 2 * view.t + 4))
        coffer = shape_coffer(view.store, self.rng.sample(known, size), view.t)
        self._counter += 1
        return VdfInput(coffer, ("fz|%d" % self._counter).encode())

    def plan_step(self, view: StrategyView) -> List[object]:
        cap = view.capacity
        if cap < 1:
            return []
        rng = self.rng
        k, t0 = view.k, view.step * view.k
        actions: List[object] = []
        slots = ["b%d" % i for i in range(cap)]
        finished: List[VdfInput] = []

        i = 0
        while i < len(slots):
            slot = slots[i]
            if (
                self.peeky
                and i + 1 < len(slots)
                and rng.random() < 0.4
                and view.correct_broadcasts
            ):
                # two slots ride one step: this slot computes a base chain,
                # the next peeks it at the first tick (pledging in-step
                # completion) and spends the step computing on its message
                base = self._fresh_input(view)
                if base is not None and self._chains.progress.get(base.digest, 0) == 0:
                    rider_slot = slots[i + 1]
                    actions.extend(
                        self._chains.plan_gets(base, slot, t0, k, range(t0, t0 + k))
                    )
                    actions.append(
                        ByzPeek(tick=t0, slot=rider_slot, input=base,
                                commit_tick=t0 + k - 1)
                    )
                    vdf = view.oracle.value(base)
                    carried = build_message(view.store, view.t, base.coffer, base.nonce, vdf)
                    rider_coffer = shape_coffer(
                        view.store, base.coffer, view.t,
                        extra=(carried.id, carried.round),
                    )
                    self._counter += 1
                    rider = VdfInput(rider_coffer, ("fzpk|%d" % self._counter).encode())
                    actions.append(_InternHint(message=carried))
                    actions.extend(
                        self._chains.plan_gets(rider, rider_slot, t0, k, range(t0, t0 + k))
                    )
                    if self._chains.progress[base.digest] >= k:
                        finished.append(base)
                    if self._chains.progress[rider.digest] >= k:
                        finished.append(rider)
                    i += 2
                    continue
            inp: Optional[VdfInput] = None
            if self._open and rng.random() < 0.7:
                inp = self._open.pop(rng.randrange(len(self._open)))
            elif rng.random() < 0.8:
                inp = self._fresh_input(view)
            if inp is None:
                i += 1
                continue
            done = self._chains.progress.get(inp.digest, 0)
            take = min(k - done, rng.randint(1, k))
            actions.extend(
                self._chains.plan_gets(inp, slot, t0, k, range(t0, t0 + take))
            )
            if self._chains.progress[inp.digest] >= k:
                finished.append(inp)
            else:
                self._open.append(inp)
            i += 1

        self._complete.extend(finished)
        sendable = [inp for inp in self._complete if rng.random() < 0.6]
        for inp in sendable:
            self._complete.remove(inp)
            if not view.active_correct:
                continue
            n = rng.randint(1, len(view.active_correct))
            to = tuple(rng.sample(view.active_correct, n))
            actions.append(
                ByzSend(tick=t0 + k - 1, slot=slots[0], coffer=inp.coffer,
                        nonce=inp.nonce, to=to)
            )
        if rng.random() < self.junk_rate and view.correct_broadcasts and view.active_correct:
            base = view.store.get(view.correct_broadcasts[-1][1])
            junk = GorillaMessage(
                round=base.round, value=base.value, priority=base.priority,
                uc=base.uc, coffer=base.coffer, nonce=b"junk", vdf=rng.getrandbits(63),
            )
            actions.append(
                ByzSend(tick=t0 + k - 1, slot=slots[0], coffer=junk.coffer,
                        nonce=junk.nonce, to=(rng.choice(view.active_correct),),
                        raw=junk)
            )
        return actions


@dataclass(frozen=True)
class _InternHint:
    """Planner-side request: make this message object known to the store so a
    later action in the same plan may reference its id.
    """

    message: GorillaMessage


class ScriptedStrategy(Strategy):
    """Replay a fixed per-step action script (used by scenario presets)."""

    name = "scripted"

    def __init__(self, script: Dict[int, List[object]], label: str = "scripted", **params) -> None:
        super().__init__(label=label, **params)
        self.script = script
        self.name = label

    def plan_step(self, view: StrategyView) -> List[object]:
        return list(self.script.get(view.step, []))


BUILTIN_STRATEGIES = {
    "null": NullStrategy,
    "split_vdf": SplitVdfStrategy,
    "withhold_release": WithholdReleaseStrategy,
    "equivocate_nonce": EquivocateNonceStrategy,
    "fuzz": FuzzStrategy,
}


def strategy_from_config(name: str, params: Optional[Dict[str, object]] = None) -> Strategy:
    if name not in BUILTIN_STRATEGIES:
        raise KeyError("unknown strategy: %r" % name)
    return BUILTIN_STRATEGIES[name](**(params or {}))


# --- benign-model scheduler strategies ---------------------------------------


@dataclass
class SMView:
    step: int
    k: int
    t: int
    capacity: int
    active_good: List[str]
    slots: List[int]
    pool: List[Tuple[bytes, str, str, int]]  # (msg id, sender, role, gen step)
    store: MessageStore
    rng: random.Random


@dataclass
class SMPlan:
    to_good: List[Tuple[bytes, str]] = field(default_factory=list)
    to_defective: Dict[int, List[bytes]] = field(default_factory=dict)
    same_step_feeds: List[Tuple[int, int]] = field(default_factory=list)


class SchedulerStrategy:
    name = "null"

    def __init__(self, **params) -> None:
        self.params = params

    def plan_step(self, view: SMView) -> SMPlan:
        return SMPlan()

    def describe(self) -> Dict[str, object]:
        return {"name": self.name, "params": dict(self.params)}


class NullScheduler(SchedulerStrategy):
    """Synchronous image: everything sent last step reaches everyone now."""

    name = "null"

    def plan_step(self, view: SMView) -> SMPlan:
        plan = SMPlan()
        last = [(m, role) for m, _s, role, g in view.pool if g == view.step - 1]
        for mid, role in last:
            if role == "defective":
                for p in view.active_good:
                    plan.to_good.append((mid, p))
        for i in view.slots:
            plan.to_defective[i] = [m for m, _s, _r, g in view.pool if g == view.step - 1]
        return plan


class DelayScheduler(SchedulerStrategy):
    """Defective messages reach good nodes ``delay`` steps late."""

    name = "delay"

    def __init__(self, delay: int = 2, recipients: str = "all", **params) -> None:
        super().__init__(delay=delay, recipients=recipients, **params)
        self.delay = delay
        self.recipients = recipients

    def plan_step(self, view: SMView) -> SMPlan:
        plan = SMPlan()
        for mid, _sender, role, g in view.pool:
            if role == "defective" and g == view.step - 1 - self.delay:
                targets = view.active_good
                if self.recipients == "first" and targets:
                    targets = targets[:1]
                for p in targets:
                    plan.to_good.append((mid, p))
        for i in view.slots:
            plan.to_defective[i] = [m for m, _s, _r, g in view.pool if g == view.step - 1]
        return plan


class SameStepScheduler(SchedulerStrategy):
    """Exploit the defective same-step allowance: slot 1 ingests slot 0's
    fresh message inside the step, mirroring a peeked chain.
    """

    name = "same_step"

    def plan_step(self, view: SMView) -> SMPlan:
        plan = NullScheduler().plan_step(view)
        if len(view.slots) >= 2:
            plan.same_step_feeds.append((view.slots[0], view.slots[1]))
        return plan


class FuzzScheduler(SchedulerStrategy):
    """Seeded random legal routing: random delays to good nodes, random
    defective inboxes, occasional same-step feeds.
    """

    name = "fuzz"

    def __init__(self, seed: int = 0, **params) -> None:
        super().__init__(seed=seed, **params)
        self.rng = random.Random("fuzzsched|%d" % seed)
        self._undelivered: Dict[bytes, int] = {}

    def plan_step(self, view: SMView) -> SMPlan:
        rng = self.rng
        plan = SMPlan()
        for mid, _sender, role, g in view.pool:
            if role != "defective" or g >= view.step:
                continue
            if mid not in self._undelivered:
                self._undelivered[mid] = g + 1 + rng.randint(0, 3)
            if self._undelivered[mid] == view.step:
                for p in view.active_good:
                    if rng.random() < 0.8:
                        plan.to_good.append((mid, p))
        past = [(m, g) for m, _s, _r, g in view.pool if g < view.step]
        stale = [m for m, g in past if g < view.step - 6]
        for i in view.slots:
            inbox = [
                m for m, g in past
                if g >= view.step - 6 and rng.random() < 0.7
            ]
            if stale and rng.random() < 0.15:
                inbox.append(rng.choice(stale))
            plan.to_defective[i] = inbox
        if len(view.slots) >= 2 and rng.random() < 0.3:
            plan.same_step_feeds.append((view.slots[0], view.slots[1]))
        return plan


BUILTIN_SCHEDULERS = {
    "null": NullScheduler,
    "delay": DelayScheduler,
    "same_step": SameStepScheduler,
    "fuzz": FuzzScheduler,
}


def scheduler_from_config(name: str, params: Optional[Dict[str, object]] = None) -> SchedulerStrategy:
    if name not in BUILTIN_SCHEDULERS:
        raise KeyError("unknown scheduler: %r" % name)
    return BUILTIN_SCHEDULERS[name](**(params or {}))


def scheduler_strategy_from(strategy: Strategy) -> SchedulerStrategy:
    """The benign-model image of a Byzantine strategy.

    Withholding maps to the delayed-delivery scheduler with the same delay
    pattern, peek-shaped splits map to same-step defective receipt, seeded
    fuzzing carries its seed over, and anything else degrades to the
    synchronous scheduler (invalid sends have no benign image: they are
    filtered noise).
    """
    if isinstance(strategy, WithholdReleaseStrategy):
        return DelayScheduler(delay=strategy.delay, recipients=strategy.recipients)
    if isinstance(strategy, SplitVdfStrategy):
        return DelayScheduler(delay=1)
    if isinstance(strategy, FuzzStrategy):
        return FuzzScheduler(seed=strategy.params.get("seed", 0))
    if isinstance(strategy, Strategy) and getattr(strategy, "peeky", False):
        return SameStepScheduler()
    return NullScheduler()
