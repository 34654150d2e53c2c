"""Deterministic tick-level run loops for the three models.

A run is driven per step: node joins, boundary deliveries, the lock-step
compute of every active correct node, then adversary actions in tick order.
Anything sent at tick x is receivable from tick x+1; receipts landing on a
step's first tick are consumed by that step's compute, later ticks feed the
next step. The whole history comes out as a Trace: an ordered event list plus
the message store, the chain catalog and the final node states, all fully
determined by (environment, strategy, seed).
"""

import random
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from . import adversary as adv
from .gorilla import GorillaNodeState, init_state, run_step
from .messages import MessageStore, VALUES, coin_value
from .oracle import Oracle, OracleError, VdfInput
from .sandglass import init_sandglass_state, run_step_sandglass

PH_JOIN = 0
PH_DELIVER = 1
PH_COMPUTE = 2
PH_SEND = 3
PH_LEAVE = 4


class IllegalStrategyAction(Exception):
    """An adversary action the model forbids; aborts the run."""


@dataclass(frozen=True)
class CorrectNodeSpec:
    node_id: str
    value: str
    join: int = 0
    leave: Optional[int] = None  # first step the node is absent from

    def active_at(self, step: int) -> bool:
        return self.join <= step and (self.leave is None or step < self.leave)


@dataclass(frozen=True)
class Environment:
    """Static run parameters: node schedule and per-step adversary capacity.

    ``capacity[s]`` is the number of Byzantine (or defective) slots usable at
    step s; the last entry repeats forever. ``n`` caps simultaneously active
    nodes and sets the support threshold t = ceil(n^2 / 2).
    """

    k: int
    n: int
    max_steps: int
    correct: Tuple[CorrectNodeSpec, ...]
    capacity: Tuple[int, ...] = (0,)
    defective_values: Tuple[str, ...] = ("a", "b")

    @property
    def t(self) -> int:
        return (self.n * self.n + 1) // 2

    def capacity_at(self, step: int) -> int:
        if not self.capacity:
            return 0
        return self.capacity[min(step, len(self.capacity) - 1)]

    def active_correct(self, step: int) -> List[str]:
        return [s.node_id for s in self.correct if s.active_at(step)]

    def defective_value(self, step: int, slot: int) -> str:
        pat = self.defective_values or ("a",)
        return pat[(step + slot) % len(pat)]


def validate_environment(env: Environment) -> None:
    if env.k < 1:
        raise ValueError("k must be at least 1")
    if env.max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    seen = set()
    for spec in env.correct:
        if spec.node_id in seen:
            raise ValueError("duplicate node id %r" % spec.node_id)
        seen.add(spec.node_id)
        if spec.value not in VALUES:
            raise ValueError("input value must be one of %s" % (VALUES,))
        if spec.leave is not None and spec.leave <= spec.join:
            raise ValueError("node %s leaves before joining" % spec.node_id)
    for c in env.capacity:
        if c < 0:
            raise ValueError("capacity cannot be negative")
    for step in range(env.max_steps):
        c = len(env.active_correct(step))
        b = env.capacity_at(step)
        if c + b > env.n:
            raise ValueError(
                "step %d: %d active nodes exceed the bound n=%d" % (step, c + b, env.n)
            )
        if c <= b:
            raise ValueError(
                "step %d: correct nodes (%d) must outnumber the adversary (%d)"
                % (step, c, b)
            )


@dataclass(frozen=True)
class Event:
    tick: int
    phase: int
    seq: int
    kind: str
    data: Dict[str, object]

    def sort_key(self):
        return (self.tick, self.phase, self.seq)


@dataclass
class Trace:
    model: str
    seed: int
    env: Environment
    events: List[Event]
    store: MessageStore
    chains: Dict[bytes, VdfInput]
    final_states: Dict[str, Dict[str, object]]
    meta: Dict[str, object]

    @property
    def k(self) -> int:
        return self.env.k

    @property
    def t(self) -> int:
        return self.env.t

    def events_of_kind(self, *kinds: str) -> List[Event]:
        return [ev for ev in self.events if ev.kind in kinds]


def message_history(trace: Trace, upto_step: Optional[int] = None) -> List[Tuple[bytes, str, int]]:
    """(message id, recipient, step) for every receipt by a correct node."""
    correct = {s.node_id for s in trace.env.correct}
    out = []
    for ev in trace.events:
        if ev.kind != "Receive" or ev.data.get("role") != "correct":
            continue
        step = ev.data["step"]
        if upto_step is not None and step > upto_step:
            continue
        if ev.data["node"] in correct:
            out.append((ev.data["msg"], ev.data["node"], step))
    return out


class _Emitter:
    def __init__(self) -> None:
        self.events: List[Event] = []
        self._seq = 0

    def __call__(self, tick: int, phase: int, kind: str, **data) -> None:
        self.events.append(Event(tick, phase, self._seq, kind, data))
        self._seq += 1


def _final_state(st) -> Dict[str, object]:
    out = {
        "value": st.value,
        "round": st.round,
        "uc": st.uc,
        "priority": st.priority,
        "decided": st.decided,
    }
    return out


def run(
    env: Environment,
    strategy: Optional[adv.Strategy] = None,
    *,
    seed: int = 0,
    model: str = "gm",
    unit_bits: int = 64,
) -> Trace:
    """Execute a run of the synchronous protocol under ``strategy``.

    ``model`` is "gm" (plain oracle) or "gm+" (peek enabled, pledges audited
    at each step boundary). Raises IllegalStrategyAction if the strategy
    exceeds capacity, breaks the one-Get-per-tick rule, uses chain values it
    has not computed (or, in gm+, peeked), or breaks a peek pledge.
    """
    if model not in ("gm", "gm+"):
        raise ValueError("model must be 'gm' or 'gm+'")
    validate_environment(env)
    if strategy is None:
        strategy = adv.NullStrategy()
    k, t = env.k, env.t
    oracle = Oracle(seed, k, plus=(model == "gm+"), unit_bits=unit_bits)
    store = MessageStore()
    emit = _Emitter()
    rng = random.Random("%d|strategy" % seed)

    states: Dict[str, GorillaNodeState] = {}
    inbox: Dict[str, List[bytes]] = {}
    pending: Dict[int, List[Tuple[str, bytes, Optional[str]]]] = {}
    all_broadcasts: List[Tuple[int, bytes]] = []  # (send tick, msg)
    correct_broadcasts: List[Tuple[int, bytes]] = []
    byz_sent: List[bytes] = []
    decisions: Dict[str, Dict[str, object]] = {}
    correct_ids = {s.node_id for s in env.correct}
    knowledge_ok: set = set()  # messages whose embedded chains passed already
    last_step = -1

    def deliver(tick: int) -> None:
        step = tick // k
        for sender, mid, target in pending.pop(tick, ()):
            if target is None:
                recipients = env.active_correct(step)
            else:
                recipients = [target] if target in correct_ids else []
            for node in recipients:
                spec = next(s for s in env.correct if s.node_id == node)
                if not spec.active_at(step):
                    continue
                inbox[node].append(mid)
                emit(
                    tick, PH_DELIVER, "Receive",
                    node=node, role="correct", msg=mid, sender=sender, step=step,
                    via="broadcast" if target is None else "targeted",
                )

    for step in range(env.max_steps):
        t0 = step * k
        cap = env.capacity_at(step)

        # joins, with catch-up on everything broadcast strictly earlier
        for spec in sorted(env.correct, key=lambda s: s.node_id):
            if spec.join != step:
                continue
            states[spec.node_id] = init_state(spec.node_id, spec.value)
            inbox[spec.node_id] = []
            emit(t0, PH_JOIN, "Join", node=spec.node_id, role="correct",
                 value=spec.value, step=step)
            for sent_tick, mid in all_broadcasts:
                if sent_tick < t0 - 1:
                    inbox[spec.node_id].append(mid)
                    emit(t0, PH_DELIVER, "Receive", node=spec.node_id,
                         role="correct", msg=mid, sender=None, step=step,
                         via="catchup")

        deliver(t0)

        view = adv.StrategyView(
            step=step, model=model, k=k, t=t, capacity=cap,
            correct_ids=sorted(correct_ids),
            active_correct=env.active_correct(step),
            store=store, oracle=oracle,
            correct_broadcasts=list(correct_broadcasts),
            byz_sent=list(byz_sent), rng=rng,
        )
        try:
            planned = list(strategy.plan_step(view))
        except OracleError as exc:
            raise IllegalStrategyAction("step %d: %s" % (step, exc)) from exc

        # lock-step compute for the active correct nodes
        for node in sorted(env.active_correct(step)):
            st = states[node]
            delivered, inbox[node] = inbox[node], []
            res = run_step(
                st, delivered, store=store, oracle=oracle, t=t, k=k, step=step
            )
            for tick, j, unit in res.gets:
                emit(tick, PH_COMPUTE, "GetCall", node=node, role="correct",
                     input=res.input_digest, index=j, unit=unit, step=step)
            if res.coin is not None:
                emit(t0 + k - 1, PH_COMPUTE, "CoinOutcome", node=node,
                     role="correct", value=res.coin, round=st.round, step=step)
            if res.decide:
                emit(t0 + k - 1, PH_COMPUTE, "Decide", node=node,
                     role="correct", value=st.value, round=st.round, step=step)
                if node not in decisions:
                    decisions[node] = {
                        "step": step, "round": st.round, "value": st.value,
                    }
            emit(t0 + k - 1, PH_SEND, "Broadcast", node=node, role="correct",
                 msg=res.message_id, step=step)
            pending.setdefault(t0 + k, []).append((node, res.message_id, None))
            all_broadcasts.append((t0 + k - 1, res.message_id))
            correct_broadcasts.append((t0 + k - 1, res.message_id))

        # adversary actions, grouped by tick, executed in plan order
        actors: Dict[int, set] = {}
        by_tick: Dict[int, List[object]] = {}
        for act in planned:
            if isinstance(act, adv._InternHint):
                try:
                    store.intern(act.message)
                except Exception as exc:
                    raise IllegalStrategyAction(
                        "step %d: bad intern hint: %s" % (step, exc)
                    ) from exc
                continue
            if not isinstance(act, (adv.ByzGet, adv.ByzPeek, adv.ByzSend)):
                raise IllegalStrategyAction(
                    "step %d: unknown action %r" % (step, act)
                )
            tick = act.tick
            if not (t0 <= tick < t0 + k):
                raise IllegalStrategyAction(
                    "step %d: action at tick %d outside its step" % (step, tick)
                )
            if act.slot in correct_ids:
                raise IllegalStrategyAction(
                    "step %d: slot %r shadows a correct node" % (step, act.slot)
                )
            by_tick.setdefault(tick, []).append(act)

        def note_actor(tick: int, slot: str) -> None:
            slots = actors.setdefault(tick, set())
            slots.add(slot)
            if len(slots) > cap:
                raise IllegalStrategyAction(
                    "step %d: %d actors at tick %d exceed capacity %d"
                    % (step, len(slots), tick, cap)
                )

        def require_known(inp: VdfInput, tick: int, what: str) -> None:
            """Sending or building on a verifying chain value requires having
            finished the chain, or (gm+) holding a live peek on it."""
            done = oracle.chain_completed_at(inp)
            if done is not None and done <= tick:
                return
            peeked = oracle.peeked_at(inp)
            if peeked is not None and peeked <= tick:
                return
            raise IllegalStrategyAction(
                "step %d: %s uses chain %s never computed by tick %d"
                % (step, what, inp.digest.hex()[:12], tick)
            )

        def check_embedded(coffer, tick: int, what: str) -> None:
            # chain knowledge is monotone (completion and peeks never undo),
            # so a message that passed once never needs rechecking
            seen_local = set()
            frontier = [m for m in coffer if m not in knowledge_ok]
            while frontier:
                mid = frontier.pop()
                if mid in seen_local or mid in knowledge_ok:
                    continue
                seen_local.add(mid)
                try:
                    msg = store.get(mid)
                except KeyError as exc:
                    raise IllegalStrategyAction(
                        "step %d: %s references unknown message" % (step, what)
                    ) from exc
                inp = VdfInput(msg.coffer, msg.nonce)
                if oracle.verify(msg.vdf, inp):
                    require_known(inp, tick, what)
                frontier.extend(msg.coffer)
            knowledge_ok.update(seen_local)

        for tick in range(t0, t0 + k):
            if tick > t0:
                deliver(tick)
            for act in by_tick.get(tick, ()):
                if isinstance(act, adv.ByzGet):
                    note_actor(tick, act.slot)
                    check_embedded(act.input.coffer, tick, "Get input")
                    rec = oracle.records.get(act.input.digest)
                    prev = rec.units[-1] if rec and rec.units else None
                    try:
                        unit = oracle.get(act.slot, tick, act.input, prev)
                    except OracleError as exc:
                        raise IllegalStrategyAction(
                            "step %d: %s" % (step, exc)
                        ) from exc
                    idx = len(oracle.records[act.input.digest].units)
                    emit(tick, PH_COMPUTE, "GetCall", node=act.slot, role="byz",
                         input=act.input.digest, index=idx, unit=unit, step=step)
                elif isinstance(act, adv.ByzPeek):
                    note_actor(tick, act.slot)
                    members = []
                    for mid in sorted(act.input.coffer):
                        try:
                            m = store.get(mid)
                        except KeyError as exc:
                            raise IllegalStrategyAction(
                                "step %d: peek references unknown message" % step
                            ) from exc
                        members.append(VdfInput(m.coffer, m.nonce))
                    try:
                        oracle.peek(act.slot, tick, act.input, act.commit_tick, members)
                    except OracleError as exc:
                        raise IllegalStrategyAction(
                            "step %d: %s" % (step, exc)
                        ) from exc
                    emit(tick, PH_COMPUTE, "PeekCall", node=act.slot, role="byz",
                         input=act.input.digest, commit_tick=act.commit_tick,
                         step=step)
                elif isinstance(act, adv.ByzSend):
                    note_actor(tick, act.slot)
                    if act.raw is not None:
                        msg = act.raw
                    else:
                        inp = VdfInput(act.coffer, act.nonce)
                        require_known(inp, tick, "send")
                        msg = adv.build_message(
                            store, t, act.coffer, act.nonce, oracle.value(inp)
                        )
                    try:
                        mid = store.intern(msg)
                    except Exception as exc:
                        raise IllegalStrategyAction(
                            "step %d: unsendable message: %s" % (step, exc)
                        ) from exc
                    check_embedded([mid], tick, "send")
                    if act.to == ("*",):
                        emit(tick, PH_SEND, "Broadcast", node=act.slot,
                             role="byz", msg=mid, step=step)
                        pending.setdefault(tick + 1, []).append((act.slot, mid, None))
                        all_broadcasts.append((tick, mid))
                    else:
                        for target in act.to:
                            emit(tick, PH_SEND, "TargetedSend", node=act.slot,
                                 role="byz", msg=mid, to=target, step=step)
                            pending.setdefault(tick + 1, []).append(
                                (act.slot, mid, target)
                            )
                    byz_sent.append(mid)
                else:
                    raise IllegalStrategyAction(
                        "step %d: unknown action %r" % (step, act)
                    )

        for spec in env.correct:
            if spec.leave == step + 1:
                emit(t0 + k - 1, PH_LEAVE, "Leave", node=spec.node_id,
                     role="correct", step=step)

        if model == "gm+":
            broken = oracle.audit_step(step)
            if broken:
                b = broken[0]
                raise IllegalStrategyAction(
                    "step %d: peek pledge broken for chain %s (peeked at tick %d)"
                    % (step, b.input_digest.hex()[:12], b.peek_tick)
                )

        last_step = step
        if all(s.join <= step for s in env.correct) and states and all(
            st.decided for st in states.values()
        ):
            break

    events = sorted(emit.events, key=Event.sort_key)
    chains = {d: rec.input for d, rec in oracle.records.items()}
    return Trace(
        model=model,
        seed=seed,
        env=env,
        events=events,
        store=store,
        chains=chains,
        final_states={n: _final_state(st) for n, st in states.items()},
        meta={
            "strategy": strategy.describe(),
            "stopped_at_step": last_step,
            "decisions": decisions,
            "unit_bits": unit_bits,
        },
    )


def run_smplus(
    env: Environment,
    scheduler: Optional[adv.SchedulerStrategy] = None,
    *,
    seed: int = 0,
) -> Trace:
    """Execute a benign-model run: good nodes in lock-step, plus per-step
    one-shot defective instances whose receipt timing the scheduler controls.

    Good-to-good delivery is automatic (next step). Everything else goes
    through the scheduler's plan: past messages to good nodes or into
    defective inboxes, and same-step defective-to-defective feeds, which are
    legal only while the fed message's coffer holds no same-step message.
    """
    validate_environment(env)
    if scheduler is None:
        scheduler = adv.NullScheduler()
    k, t = env.k, env.t
    store = MessageStore()
    emit = _Emitter()
    rng = random.Random("%d|scheduler" % seed)

    states: Dict[str, object] = {}
    inbox: Dict[str, List[bytes]] = {}
    coins: Dict[str, random.Random] = {}
    pool: List[Tuple[bytes, str, str, int]] = []  # (msg, sender, role, gen step)
    pool_meta: Dict[bytes, Tuple[str, str, int]] = {}
    decisions: Dict[str, Dict[str, object]] = {}
    last_step = -1

    def coin_next_for(node: str):
        if node not in coins:
            coins[node] = random.Random("%d|coin|%s" % (seed, node))

        def _next() -> str:
            return coin_value(coins[node].getrandbits(1))

        return _next

    def add_to_pool(mid: bytes, sender: str, role: str, step: int) -> None:
        pool.append((mid, sender, role, step))
        pool_meta[mid] = (sender, role, step)

    for step in range(env.max_steps):
        t0 = step * k
        cap = env.capacity_at(step)
        slots = list(range(cap))

        for spec in sorted(env.correct, key=lambda s: s.node_id):
            if spec.join != step:
                continue
            states[spec.node_id] = init_sandglass_state(spec.node_id, spec.value)
            inbox[spec.node_id] = []
            emit(t0, PH_JOIN, "Join", node=spec.node_id, role="good",
                 value=spec.value, step=step)
            for mid, sender, role, g in pool:
                if role == "good" and g < step - 1:
                    inbox[spec.node_id].append(mid)
                    emit(t0, PH_DELIVER, "Receive", node=spec.node_id,
                         role="correct", msg=mid, sender=sender, step=step,
                         via="catchup")

        active_good = env.active_correct(step)

        # automatic good-to-good sync: last step's broadcasts land now
        for mid, sender, role, g in pool:
            if role == "good" and g == step - 1:
                for node in active_good:
                    inbox[node].append(mid)
                    emit(t0, PH_DELIVER, "Receive", node=node, role="correct",
                         msg=mid, sender=sender, step=step, via="sync")

        plan = scheduler.plan_step(
            adv.SMView(
                step=step, k=k, t=t, capacity=cap,
                active_good=list(active_good), slots=list(slots),
                pool=list(pool), store=store, rng=rng,
            )
        ) or adv.SMPlan()

        for mid, node in plan.to_good:
            meta = pool_meta.get(mid)
            if meta is None:
                raise IllegalStrategyAction(
                    "step %d: scheduler routes unknown message" % step
                )
            sender, role, g = meta
            if role != "defective":
                continue  # good traffic is already synced; re-sends are no-ops
            if g >= step:
                raise IllegalStrategyAction(
                    "step %d: delivery to a good node before the send" % step
                )
            if node not in active_good:
                continue
            inbox[node].append(mid)
            emit(t0, PH_DELIVER, "Receive", node=node, role="correct",
                 msg=mid, sender=sender, step=step, via="scheduled")

        for node in sorted(active_good):
            st = states[node]
            delivered, inbox[node] = inbox[node], []
            res = run_step_sandglass(
                st, delivered, store=store, t=t, coin_next=coin_next_for(node)
            )
            if res.coin is not None:
                emit(t0 + k - 1, PH_COMPUTE, "CoinOutcome", node=node,
                     role="correct", value=res.coin, round=st.round, step=step)
            if res.decide:
                emit(t0 + k - 1, PH_COMPUTE, "Decide", node=node,
                     role="correct", value=st.value, round=st.round, step=step)
                if node not in decisions:
                    decisions[node] = {
                        "step": step, "round": st.round, "value": st.value,
                    }
            emit(t0 + k - 1, PH_SEND, "Broadcast", node=node, role="correct",
                 msg=res.message_id, step=step)
            add_to_pool(res.message_id, node, "good", step)

        # defective instances: one step of the benign protocol each, run in
        # same-step feed order
        feeds: Dict[int, List[int]] = {}
        indeg = {i: 0 for i in slots}
        for producer, consumer in plan.same_step_feeds:
            if producer not in indeg or consumer not in indeg:
                raise IllegalStrategyAction(
                    "step %d: feed names a slot beyond capacity %d" % (step, cap)
                )
            feeds.setdefault(producer, []).append(consumer)
            indeg[consumer] += 1
        order: List[int] = [i for i in sorted(slots) if indeg[i] == 0]
        cursor = 0
        while cursor < len(order):
            for consumer in feeds.get(order[cursor], ()):
                indeg[consumer] -= 1
                if indeg[consumer] == 0:
                    order.append(consumer)
            cursor += 1
        if len(order) != len(slots):
            raise IllegalStrategyAction(
                "step %d: same-step feeds form a cycle" % step
            )

        produced: Dict[int, bytes] = {}
        for i in order:
            slot_id = "d%d.%d" % (step, i)
            emit(t0, PH_JOIN, "Join", node=slot_id, role="defective",
                 value=env.defective_value(step, i), step=step)
            delivered: List[bytes] = []
            for mid in plan.to_defective.get(i, ()):  # past traffic only
                meta = pool_meta.get(mid)
                if meta is None:
                    raise IllegalStrategyAction(
                        "step %d: defective inbox holds unknown message" % step
                    )
                if meta[2] >= step:
                    raise IllegalStrategyAction(
                        "step %d: defective inbox reaches into the future" % step
                    )
                delivered.append(mid)
                emit(t0, PH_DELIVER, "Receive", node=slot_id, role="defective",
                     msg=mid, sender=meta[0], step=step, via="scheduled")
            for producer, consumers in feeds.items():
                if i not in consumers:
                    continue
                mid = produced[producer]
                msg = store.get(mid)
                for member in msg.coffer:
                    if pool_meta[member][2] >= step:
                        raise IllegalStrategyAction(
                            "step %d: same-step feed carries a same-step coffer"
                            % step
                        )
                delivered.append(mid)
                emit(t0 + k - 1, PH_DELIVER, "Receive", node=slot_id,
                     role="defective", msg=mid, sender=pool_meta[mid][0],
                     step=step, via="same-step")
            st = init_sandglass_state(slot_id, env.defective_value(step, i))
            res = run_step_sandglass(
                st, delivered, store=store, t=t, coin_next=coin_next_for(slot_id)
            )
            if res.coin is not None:
                emit(t0 + k - 1, PH_COMPUTE, "CoinOutcome", node=slot_id,
                     role="defective", value=res.coin, round=st.round, step=step)
            emit(t0 + k - 1, PH_SEND, "Broadcast", node=slot_id,
                 role="defective", msg=res.message_id, step=step)
            add_to_pool(res.message_id, slot_id, "defective", step)
            produced[i] = res.message_id
            emit(t0 + k - 1, PH_LEAVE, "Leave", node=slot_id, role="defective",
                 step=step)

        for spec in env.correct:
            if spec.leave == step + 1:
                emit(t0 + k - 1, PH_LEAVE, "Leave", node=spec.node_id,
                     role="good", step=step)

        last_step = step
        if all(s.join <= step for s in env.correct) and states and all(
            st.decided for st in states.values()
        ):
            break

    events = sorted(emit.events, key=Event.sort_key)
    return Trace(
        model="sm+",
        seed=seed,
        env=env,
        events=events,
        store=store,
        chains={},
        final_states={n: _final_state(st) for n, st in states.items()},
        meta={
            "strategy": scheduler.describe(),
            "stopped_at_step": last_step,
            "decisions": decisions,
        },
    )
