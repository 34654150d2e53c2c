"""Trace mappings: shell reorganization of adversary computations and the
interpretation of synchronous runs in the benign asynchronous model.

Reorganization repacks every adversary-computed chain into per-step "shells"
(one full chain per slot per step, the shape correct nodes use) without
touching what correct nodes see: the rebuilt run keeps every receipt by a
correct node at its original tick. Without peeks a chain must finish before
its first use, and traces that deliberately split a chain across the deadline
have no legal repacking: that is reported as ShellExhaustion. With peeks the
repacking always lands, pledging in-step completion where a value is used
before its last unit.

Interpretation turns a shell-shaped synchronous trace into a benign-model
trace: correct nodes become good nodes, each valid adversary message becomes
a one-step defective instance, peeks become same-step defective receipts, and
invalid messages vanish (correct nodes never acted on them). The companion
checkers replay both sides to confirm the translation is faithful.
"""

import heapq
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from . import adversary as adv
from .engine import (
    Environment,
    Event,
    PH_COMPUTE,
    PH_DELIVER,
    PH_JOIN,
    PH_LEAVE,
    PH_SEND,
    Trace,
    message_history,
    run,
)
from .messages import MessageStore, UnknownSender, mapm
from .oracle import Oracle, VdfInput
from .sandglass import init_sandglass_state, run_step_sandglass


class ShellExhaustion(Exception):
    """No legal shell placement exists for a chain under the no-peek rules."""

    def __init__(self, digest: bytes, earliest: int, deadline: int) -> None:
        super().__init__(
            "chain %s needs a shell in steps [%d, %d] and none is free"
            % (digest.hex()[:12], earliest, deadline)
        )
        self.digest = digest
        self.earliest = earliest
        self.deadline = deadline


@dataclass
class ShellAssignment:
    """Where each adversary chain was repacked: digest -> (step, slot)."""

    step_of: Dict[bytes, int] = field(default_factory=dict)
    slot_of: Dict[bytes, int] = field(default_factory=dict)
    depth_of: Dict[bytes, int] = field(default_factory=dict)

    def per_step(self) -> Dict[int, List[bytes]]:
        out: Dict[int, List[bytes]] = {}
        for d, s in self.step_of.items():
            out.setdefault(s, []).append(d)
        for s in out:
            out[s].sort(key=lambda d: self.slot_of[d])
        return out


class TraceIndex:
    """Precomputed lookups over a synchronous trace."""

    def __init__(self, trace: Trace) -> None:
        self.trace = trace
        k = trace.k
        self.correct_ids = {s.node_id for s in trace.env.correct}
        self.byz_gets: Dict[bytes, List[Event]] = {}
        self.all_gets: Dict[bytes, List[Event]] = {}
        self.byz_send_events: List[Event] = []
        self.first_send_tick: Dict[bytes, int] = {}
        self.correct_broadcasts: Dict[bytes, int] = {}  # msg -> send tick
        self.peek_events: List[Event] = []
        for ev in trace.events:
            if ev.kind == "GetCall":
                self.all_gets.setdefault(ev.data["input"], []).append(ev)
                if ev.data["role"] == "byz":
                    self.byz_gets.setdefault(ev.data["input"], []).append(ev)
            elif ev.kind == "PeekCall":
                self.peek_events.append(ev)
            elif ev.kind in ("Broadcast", "TargetedSend"):
                mid = ev.data["msg"]
                if ev.data["role"] == "byz":
                    self.byz_send_events.append(ev)
                    self.first_send_tick.setdefault(mid, ev.tick)
                else:
                    self.correct_broadcasts.setdefault(mid, ev.tick)
        self.completion_tick: Dict[bytes, int] = {}
        for digest, gets in self.all_gets.items():
            if len(gets) >= k:
                self.completion_tick[digest] = gets[k - 1].tick

    def candidates(self) -> List[bytes]:
        """Adversary-computed complete chains, the units to repack."""
        out = []
        for digest, gets in self.byz_gets.items():
            if len(gets) < self.trace.k:
                continue  # abandoned partial work disappears in the repacking
            if len(self.all_gets[digest]) != len(gets):
                raise ValueError(
                    "chain %s was computed by both sides; such traces are not"
                    " repackable" % digest.hex()[:12]
                )
            out.append(digest)
        return out


class _ChainVerifier:
    """Per-trace memo: message id -> its verifying chain digest (or None)."""

    def __init__(self, store: MessageStore, oracle: Oracle) -> None:
        self.store = store
        self.oracle = oracle
        self._chain_of: Dict[bytes, Optional[bytes]] = {}
        self._embedded: Dict[bytes, FrozenSet[bytes]] = {}

    def chain_of(self, mid: bytes) -> Optional[bytes]:
        if mid in self._chain_of:
            return self._chain_of[mid]
        msg = self.store.get(mid)
        inp = VdfInput(msg.coffer, msg.nonce)
        digest = inp.digest if self.oracle.verify(msg.vdf, inp) else None
        self._chain_of[mid] = digest
        return digest

    def embedded_chains(self, mid: bytes) -> FrozenSet[bytes]:
        """Digests of every verifying chain in the message's closure."""
        if mid in self._embedded:
            return self._embedded[mid]
        found: Set[bytes] = set()
        for member in self.store.closure(mid):
            digest = self.chain_of(member)
            if digest is not None:
                found.add(digest)
        result = frozenset(found)
        self._embedded[mid] = result
        return result

    def chain_deps(self, inp: VdfInput, candidate_set: Set[bytes]) -> Set[bytes]:
        """Candidate chains this input's direct members are built on."""
        deps: Set[bytes] = set()
        for mid in inp.coffer:
            digest = self.chain_of(mid)
            if digest is not None and digest in candidate_set:
                deps.add(digest)
        return deps


def plan_shells(trace: Trace, allow_peek: bool) -> ShellAssignment:
    """Assign every adversary chain a (step, slot) shell.

    Chains are placed earliest-first in dependency order. A chain may not
    start before its original first Get (its input did not exist earlier),
    must follow the chains its input builds on (same step is allowed only
    with peeks, one level deep), and must be done in time for every original
    send that embeds it: finished by the send tick, or, with peeks, finishing
    within the send's step under a pledge.
    """
    index = TraceIndex(trace)
    k = trace.k
    env = trace.env
    oracle = Oracle(trace.seed, k, plus=True,
                    unit_bits=trace.meta.get("unit_bits", 64))
    cands = index.candidates()
    cand_set = set(cands)
    chains = trace.chains
    last_step = trace.meta.get("stopped_at_step", env.max_steps - 1)

    verifier = _ChainVerifier(trace.store, oracle)
    deps: Dict[bytes, Set[bytes]] = {}
    rdeps: Dict[bytes, Set[bytes]] = {d: set() for d in cands}
    for d in cands:
        deps[d] = verifier.chain_deps(chains[d], cand_set)
        for dep in deps[d]:
            rdeps.setdefault(dep, set()).add(d)

    # a send of a message embedding chain d is a use of d at that tick
    use_tick: Dict[bytes, int] = {}
    for ev in index.byz_send_events:
        for d in verifier.embedded_chains(ev.data["msg"]):
            if d in cand_set:
                use_tick[d] = min(use_tick.get(d, ev.tick), ev.tick)

    assignment = ShellAssignment()
    filled: Dict[int, int] = {}
    indeg = {d: len(deps[d]) for d in cands}
    ready = [(index.byz_gets[d][-1].tick, d) for d in cands if indeg[d] == 0]
    heapq.heapify(ready)
    done = 0
    while ready:
        _, d = heapq.heappop(ready)
        done += 1
        entry = index.byz_gets[d][0].tick // k
        lower = entry
        for mid in chains[d].coffer:
            # a correct member's chain only completes with its broadcast, so
            # a shell that starts at a step's first tick needs the next step
            sent = index.correct_broadcasts.get(mid)
            if sent is not None:
                lower = max(lower, sent // k + 1)
        for dep in deps[d]:
            ds = assignment.step_of[dep]
            lower = max(lower, ds if allow_peek else ds + 1)
        use = use_tick.get(d)
        if use is None:
            strict_deadline = peek_deadline = last_step
        else:
            # finished by the send: last unit at s*k + k - 1 <= send tick
            strict_deadline = (use - (k - 1)) // k
            peek_deadline = use // k if allow_peek else strict_deadline
        placed = False
        s = lower
        while s <= peek_deadline:
            if filled.get(s, 0) >= env.capacity_at(s):
                s += 1
                continue
            depth = 0
            for dep in deps[d]:
                if assignment.step_of[dep] == s:
                    depth = max(depth, assignment.depth_of[dep] + 1)
            if depth > 1:
                s += 1
                continue  # peeking a chain built on a peeked chain is barred
            if depth >= 1 and s > strict_deadline:
                # a same-step-fed chain cannot itself be peeked at its send
                s += 1
                continue
            assignment.step_of[d] = s
            assignment.slot_of[d] = filled.get(s, 0)
            assignment.depth_of[d] = depth
            filled[s] = filled.get(s, 0) + 1
            placed = True
            break
        if not placed:
            raise ShellExhaustion(d, lower, peek_deadline)
        for nxt in rdeps.get(d, ()):
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, (index.byz_gets[nxt][-1].tick, nxt))
    if done != len(cands):
        raise ValueError("chain dependencies form a cycle")
    return assignment


def _intern_hints(store: MessageStore, order_pos: Dict[bytes, int],
                  ids: Set[bytes]) -> List[adv._InternHint]:
    return [
        adv._InternHint(message=store.get(m))
        for m in sorted(ids, key=lambda m: order_pos[m])
    ]


def rebuild(trace: Trace, assignment: ShellAssignment, allow_peek: bool) -> Trace:
    """Re-run the trace's environment with the repacked adversary.

    The script re-derives every adversary action: shells compute whole chains
    step-aligned, original sends replay byte-identical at their original
    ticks, and (with peeks) pledges cover values used before completion. The
    engine then enforces every model rule, so a successful rebuild is itself
    evidence the repacking is legal.
    """
    index = TraceIndex(trace)
    k = trace.k
    unit_bits = trace.meta.get("unit_bits", 64)
    oracle = Oracle(trace.seed, k, plus=True, unit_bits=unit_bits)
    chains = trace.chains
    order_pos = {m: i for i, m in enumerate(trace.store.ids_in_order())}
    script: Dict[int, List[object]] = {}

    def at(step: int) -> List[object]:
        return script.setdefault(step, [])

    completion: Dict[bytes, int] = {}  # digest -> rebuilt completion tick
    for digest, s in assignment.step_of.items():
        completion[digest] = s * k + k - 1

    visited: Set[bytes] = set()

    def hint_closure(step: int, ids, bucket: List[object]) -> None:
        need: Set[bytes] = set()
        stack = [m for m in ids if m not in visited]
        while stack:
            m = stack.pop()
            if m in visited:
                continue
            visited.add(m)
            if m not in index.correct_broadcasts:
                need.add(m)
            stack.extend(trace.store.get(m).coffer)
        bucket.extend(_intern_hints(trace.store, order_pos, need))

    peeked: Dict[bytes, int] = {}  # digest -> first rebuilt peek tick

    per_step = assignment.per_step()
    verifier = _ChainVerifier(trace.store, oracle)
    steps_with_work = sorted(
        set(per_step) | {ev.tick // k for ev in index.byz_send_events}
    )
    for s in steps_with_work:
        hints: List[object] = []
        peeks: List[object] = []
        gets: List[object] = []
        sends: List[object] = []
        t0 = s * k
        for digest in per_step.get(s, ()):
            inp = chains[digest]
            slot = "s%d" % assignment.slot_of[digest]
            hint_closure(s, inp.coffer, hints)
            for dep in verifier.chain_deps(inp, set(assignment.step_of)):
                if assignment.step_of[dep] == s and dep not in peeked:
                    peeks.append(
                        adv.ByzPeek(tick=t0, slot=slot, input=chains[dep],
                                    commit_tick=t0 + k - 1)
                    )
                    peeked[dep] = t0
            for j in range(k):
                gets.append(adv.ByzGet(tick=t0 + j, slot=slot, input=inp))
        for ev in index.byz_send_events:
            if ev.tick // k != s:
                continue
            mid = ev.data["msg"]
            msg = trace.store.get(mid)
            hint_closure(s, [mid], hints)
            if allow_peek:
                for d in verifier.embedded_chains(mid):
                    if d not in assignment.step_of:
                        continue
                    if completion[d] > ev.tick and peeked.get(d, ev.tick + 1) > ev.tick:
                        peeks.append(
                            adv.ByzPeek(tick=ev.tick, slot="s0", input=chains[d],
                                        commit_tick=completion[d])
                        )
                        peeked[d] = ev.tick
            if ev.kind == "Broadcast":
                to: Tuple[str, ...] = ("*",)
            else:
                target = ev.data["to"]
                if target not in index.correct_ids:
                    continue  # adversary-internal delivery: nothing to replay
                to = (target,)
            sends.append(
                adv.ByzSend(tick=ev.tick, slot="s0", coffer=msg.coffer,
                            nonce=msg.nonce, to=to, raw=msg)
            )
        at(s).extend(hints + peeks + gets + sends)

    strategy = adv.ScriptedStrategy(script, label="reorg")
    return run(
        trace.env,
        strategy,
        seed=trace.seed,
        model="gm+" if allow_peek else "gm",
        unit_bits=unit_bits,
    )


def reorg(trace: Trace, allow_peek: bool = False) -> Tuple[Trace, ShellAssignment]:
    """Repack a trace's adversary work into per-step shells and re-run it.

    Raises ShellExhaustion when ``allow_peek`` is False and some chain has no
    legal placement; with peeks the placement always exists for legal traces.
    """
    if trace.model not in ("gm", "gm+"):
        raise ValueError("only synchronous traces can be repacked")
    assignment = plan_shells(trace, allow_peek)
    rebuilt = rebuild(trace, assignment, allow_peek)
    return rebuilt, assignment


def _correct_view(trace: Trace) -> List[Tuple]:
    """Everything a correct node did or saw, in comparable form."""
    out = []
    for ev in trace.events:
        if ev.data.get("role") != "correct":
            continue
        if ev.kind == "Receive":
            out.append((ev.tick, "Receive", ev.data["node"], ev.data["msg"]))
        elif ev.kind == "Broadcast":
            out.append((ev.tick, "Broadcast", ev.data["node"], ev.data["msg"]))
        elif ev.kind in ("Decide", "CoinOutcome"):
            out.append((ev.tick, ev.kind, ev.data["node"], ev.data["value"]))
    out.sort()
    return out


def check_reorg(original: Trace, rebuilt: Trace,
                assignment: ShellAssignment) -> List[str]:
    """Confirm the rebuilt run is shell-shaped and correct-node-identical."""
    problems: List[str] = []
    if sorted(message_history(original)) != sorted(message_history(rebuilt)):
        problems.append("correct nodes saw a different message history")
    if _correct_view(original) != _correct_view(rebuilt):
        problems.append("correct node behavior diverged")
    k = rebuilt.k
    by_digest: Dict[bytes, List[Event]] = {}
    per_step_slots: Dict[int, Set[str]] = {}
    for ev in rebuilt.events:
        if ev.kind == "GetCall" and ev.data["role"] == "byz":
            by_digest.setdefault(ev.data["input"], []).append(ev)
            per_step_slots.setdefault(ev.tick // k, set()).add(ev.data["node"])
    for digest, gets in by_digest.items():
        ticks = sorted(ev.tick for ev in gets)
        nodes = {ev.data["node"] for ev in gets}
        step = ticks[0] // k
        if len(gets) != k or len(nodes) != 1 or ticks != list(
            range(step * k, step * k + k)
        ):
            problems.append(
                "chain %s is not one whole-step shell" % digest.hex()[:12]
            )
        if assignment.step_of.get(digest) != step:
            problems.append(
                "chain %s ran at step %d, not its assigned shell"
                % (digest.hex()[:12], step)
            )
    for step, slots in per_step_slots.items():
        if len(slots) > rebuilt.env.capacity_at(step):
            problems.append("step %d uses more shells than capacity" % step)
    if rebuilt.model == "gm":
        if any(ev.kind == "PeekCall" for ev in rebuilt.events):
            problems.append("peek appeared in a no-peek rebuild")
    return problems


def check_claims(original: Trace, rebuilt: Trace,
                 assignment: ShellAssignment) -> List[str]:
    """Peek-mode guarantees: pledges honored, no chain finishes later than it
    originally did, and same-step feeding stays one level deep."""
    problems: List[str] = []
    k = rebuilt.k
    completion: Dict[bytes, int] = {}
    for ev in rebuilt.events:
        if ev.kind == "GetCall" and ev.data["role"] == "byz":
            if ev.data["index"] == k:
                completion[ev.data["input"]] = ev.tick
    for ev in rebuilt.events:
        if ev.kind != "PeekCall":
            continue
        digest = ev.data["input"]
        done = completion.get(digest)
        if done is None or done // k > ev.data["commit_tick"] // k:
            problems.append(
                "peek pledge on chain %s was not honored" % digest.hex()[:12]
            )
    index = TraceIndex(original)
    for digest, step in assignment.step_of.items():
        orig_done = index.completion_tick.get(digest)
        if orig_done is not None and step > orig_done // k:
            problems.append(
                "chain %s was deferred past its original completion"
                % digest.hex()[:12]
            )
    for digest, depth in assignment.depth_of.items():
        if depth > 1:
            problems.append(
                "chain %s sits on a same-step chain of depth %d"
                % (digest.hex()[:12], depth)
            )
    return problems


# --- benign-model interpretation ---------------------------------------------


@dataclass
class Interpretation:
    """A benign-model trace derived from a shell-shaped synchronous one."""

    sm_trace: Trace
    attribution: Dict[bytes, Tuple[str, int]]
    image: Dict[bytes, bytes]  # synchronous message id -> benign message id
    dropped: Set[bytes]  # invalid messages with no benign image


def _shell_shape(trace: Trace) -> Dict[bytes, Tuple[int, str]]:
    """digest -> (step, computing node) for every complete chain; error if
    any chain is not computed whole within one step by one node."""
    k = trace.k
    gets: Dict[bytes, List[Event]] = {}
    for ev in trace.events:
        if ev.kind == "GetCall":
            gets.setdefault(ev.data["input"], []).append(ev)
    out: Dict[bytes, Tuple[int, str]] = {}
    for digest, evs in gets.items():
        if len(evs) < k:
            continue
        ticks = sorted(e.tick for e in evs)
        nodes = {e.data["node"] for e in evs}
        step = ticks[0] // k
        if len(evs) != k or len(nodes) != 1 or ticks != list(
            range(step * k, step * k + k)
        ):
            raise ValueError(
                "interpretation needs a shell-shaped trace; chain %s is split"
                % digest.hex()[:12]
            )
        out[digest] = (step, next(iter(nodes)))
    return out


def interpret(trace: Trace) -> Interpretation:
    """Map a shell-shaped synchronous trace into the benign model.

    Correct nodes carry over one-to-one (their receipts keep their ingestion
    step, invalid messages drop out). Every valid adversary message becomes a
    one-step defective instance at its chain's shell step; a member computed
    in the same step arrives as a same-step defective receipt, the image of a
    peek. Coins are carried over for correct nodes and synthesized for
    defective instances whose top support was mixed.
    """
    if trace.model not in ("gm", "gm+"):
        raise ValueError("only synchronous traces have a benign interpretation")
    k, t = trace.k, trace.t
    env = trace.env
    oracle = Oracle(trace.seed, k, plus=(trace.model == "gm+"),
                    unit_bits=trace.meta.get("unit_bits", 64))
    shells = _shell_shape(trace)
    correct_ids = {s.node_id for s in env.correct}
    correct_broadcast_step: Dict[bytes, int] = {}
    broadcast_rank: Dict[bytes, Tuple[str, int]] = {}
    counts: Dict[str, int] = {}
    for ev in trace.events:
        if ev.kind == "Broadcast" and ev.data["role"] == "correct":
            node = ev.data["node"]
            counts[node] = counts.get(node, 0) + 1
            broadcast_rank[ev.data["msg"]] = (node, counts[node])
            correct_broadcast_step[ev.data["msg"]] = ev.data["step"]

    # classify every stored message: correct broadcast, valid adversary
    # message (gets an instance), or invalid noise (dropped)
    instance_step: Dict[bytes, int] = {}
    dropped: Set[bytes] = set()
    byz_msgs: List[Tuple[int, int, bytes]] = []  # (step, order, mid)
    for pos, mid in enumerate(trace.store.ids_in_order()):
        if mid in broadcast_rank:
            continue
        ok, _reason = trace.store.is_valid(mid, oracle, t)
        if not ok:
            dropped.add(mid)
            continue
        msg = trace.store.get(mid)
        digest = VdfInput(msg.coffer, msg.nonce).digest
        if digest not in shells:
            raise ValueError(
                "valid message %s has no computed chain" % mid.hex()[:12]
            )
        byz_msgs.append((shells[digest][0], pos, mid))
    byz_msgs.sort()

    attribution: Dict[bytes, Tuple[str, int]] = dict(broadcast_rank)
    per_step_count: Dict[int, int] = {}
    for step, _pos, mid in byz_msgs:
        idx = per_step_count.get(step, 0)
        per_step_count[step] = idx + 1
        attribution[mid] = ("d%d.%d" % (step, idx), 1)
        instance_step[mid] = step

    sstore = MessageStore()
    image: Dict[bytes, bytes] = {}
    memo: Dict[bytes, bytes] = {}

    def attr(m: bytes) -> Tuple[str, int]:
        try:
            return attribution[m]
        except KeyError:
            raise UnknownSender(m.hex())

    for mid in trace.store.ids_in_order():
        if mid in dropped or mid in image:
            continue
        if any(x in dropped for x in trace.store.closure(mid)):
            dropped.add(mid)
            continue
        image[mid] = mapm(trace.store, sstore, mid, attr, memo)

    avail_step: Dict[bytes, int] = dict(correct_broadcast_step)
    avail_step.update(instance_step)

    events: List[Event] = []
    seq = [0]

    def emit(tick: int, phase: int, kind: str, **data) -> None:
        events.append(Event(tick, phase, seq[0], kind, data))
        seq[0] += 1

    decisions: Dict[str, Dict[str, object]] = {}
    for ev in trace.events:
        role = ev.data.get("role")
        if role != "correct":
            continue
        node = ev.data["node"]
        step = ev.data["step"]
        t0 = step * k
        if ev.kind == "Join":
            emit(t0, PH_JOIN, "Join", node=node, role="good",
                 value=ev.data["value"], step=step)
        elif ev.kind == "Leave":
            emit(t0 + k - 1, PH_LEAVE, "Leave", node=node, role="good", step=step)
        elif ev.kind == "Receive":
            mid = ev.data["msg"]
            if mid in dropped:
                continue
            consumed = step if ev.tick == t0 else step + 1
            emit(consumed * k, PH_DELIVER, "Receive", node=node, role="correct",
                 msg=image[mid], sender=attribution[mid][0], step=consumed,
                 via=ev.data.get("via", "mapped"))
        elif ev.kind == "Broadcast":
            emit(t0 + k - 1, PH_SEND, "Broadcast", node=node, role="correct",
                 msg=image[ev.data["msg"]], step=step)
        elif ev.kind == "CoinOutcome":
            emit(t0 + k - 1, PH_COMPUTE, "CoinOutcome", node=node,
                 role="correct", value=ev.data["value"],
                 round=ev.data["round"], step=step)
        elif ev.kind == "Decide":
            emit(t0 + k - 1, PH_COMPUTE, "Decide", node=node, role="correct",
                 value=ev.data["value"], round=ev.data["round"], step=step)
            decisions.setdefault(node, {
                "step": step, "round": ev.data["round"],
                "value": ev.data["value"],
            })

    for step, _pos, mid in byz_msgs:
        slot_id = attribution[mid][0]
        t0 = step * k
        gmsg = trace.store.get(mid)
        smsg = sstore.get(image[mid])
        emit(t0, PH_JOIN, "Join", node=slot_id, role="defective",
             value=gmsg.value, step=step)
        for member in sorted(gmsg.coffer):
            same_step = avail_step[member] == step
            tick = t0 + k - 1 if same_step else t0
            emit(tick, PH_DELIVER, "Receive", node=slot_id, role="defective",
                 msg=image[member], sender=attribution[member][0], step=step,
                 via="same-step" if same_step else "mapped")
        coin_needed = _mixed_support(sstore, smsg, t)
        if coin_needed:
            emit(t0 + k - 1, PH_COMPUTE, "CoinOutcome", node=slot_id,
                 role="defective", value=smsg.value, round=smsg.round,
                 step=step)
        emit(t0 + k - 1, PH_SEND, "Broadcast", node=slot_id, role="defective",
             msg=image[mid], step=step)
        emit(t0 + k - 1, PH_LEAVE, "Leave", node=slot_id, role="defective",
             step=step)

    events.sort(key=Event.sort_key)
    sm_trace = Trace(
        model="sm+",
        seed=trace.seed,
        env=env,
        events=events,
        store=sstore,
        chains={},
        final_states={},
        meta={
            "strategy": {"name": "interpreted", "params": {}},
            "stopped_at_step": trace.meta.get("stopped_at_step"),
            "decisions": decisions,
            "source_model": trace.model,
        },
    )
    return Interpretation(
        sm_trace=sm_trace, attribution=attribution, image=image, dropped=dropped
    )


def _mixed_support(sstore: MessageStore, smsg, t: int) -> bool:
    """Whether this message's value came off a coin: support at its previous
    round reaches the threshold with more than one top-priority value."""
    if smsg.round <= 1:
        return False
    seen = sstore.closure_union(smsg.coffer)
    prev = [sstore.get(m) for m in seen if sstore.get(m).round == smsg.round - 1]
    top = max(x.priority for x in prev)
    support = {x.value for x in prev if x.priority == top}
    return len(support) != 1


def check_interpretation(trace: Trace, interp: Interpretation) -> List[str]:
    """Replay both sides of the interpretation and compare.

    Good nodes are replayed with the benign step function over the mapped
    receipts (coins injected from the synchronous run); every defective
    instance is replayed as one benign step over its receipts. Timing is
    checked against the benign rules: nothing is received before it is sent,
    and same-step receipt happens only between defective instances with a
    clean coffer.
    """
    problems: List[str] = []
    sm = interp.sm_trace
    k, t = sm.k, sm.t
    env = sm.env

    receipts: Dict[str, Dict[int, List[bytes]]] = {}
    coins: Dict[str, List[str]] = {}
    broadcasts: Dict[str, Dict[int, bytes]] = {}
    decides: Dict[str, List[Tuple[int, str]]] = {}
    defective: Dict[str, Dict[str, object]] = {}
    gen_step: Dict[bytes, int] = {}
    sender_of: Dict[bytes, str] = {}
    for ev in sm.events:
        node = ev.data.get("node")
        step = ev.data.get("step")
        if ev.kind == "Receive":
            if ev.data["role"] == "correct":
                receipts.setdefault(node, {}).setdefault(step, []).append(
                    ev.data["msg"]
                )
            else:
                defective.setdefault(node, {"step": step, "rx": []})
                defective[node]["rx"].append(
                    (ev.data["msg"], ev.data["via"] == "same-step")
                )
        elif ev.kind == "CoinOutcome" and ev.data["role"] == "correct":
            coins.setdefault(node, []).append(ev.data["value"])
        elif ev.kind == "Broadcast":
            mid = ev.data["msg"]
            gen_step[mid] = step
            sender_of[mid] = node
            if ev.data["role"] == "correct":
                broadcasts.setdefault(node, {})[step] = mid
            else:
                defective.setdefault(node, {"step": step, "rx": []})
                defective[node]["msg"] = mid
        elif ev.kind == "Decide" and ev.data["role"] == "correct":
            decides.setdefault(node, []).append((step, ev.data["value"]))

    for spec in env.correct:
        node = spec.node_id
        state = init_sandglass_state(node, spec.value)
        queue = list(coins.get(node, []))

        def coin_next() -> str:
            if not queue:
                problems.append("%s: replay flipped an extra coin" % node)
                return "a"
            return queue.pop(0)

        last = max(broadcasts.get(node, {0: None}))
        replay_decides: List[Tuple[int, str]] = []
        for step in range(spec.join, last + 1):
            delivered = receipts.get(node, {}).get(step, [])
            res = run_step_sandglass(
                state, delivered, store=sm.store, t=t, coin_next=coin_next
            )
            expect = broadcasts.get(node, {}).get(step)
            if expect is not None and res.message_id != expect:
                problems.append(
                    "%s step %d: replay sent a different message" % (node, step)
                )
                break
            if res.decide is not None:
                replay_decides.append((step, res.decide))
        if queue:
            problems.append("%s: replay left coins unused" % node)
        if replay_decides != decides.get(node, []):
            problems.append("%s: replay decided differently" % node)

    for slot_id, info in sorted(defective.items()):
        step = info["step"]
        mid = info.get("msg")
        if mid is None:
            problems.append("%s: defective instance never sent" % slot_id)
            continue
        smsg = sm.store.get(mid)
        delivered = []
        for rx, same_step in info["rx"]:
            src = gen_step.get(rx)
            if src is None:
                problems.append("%s: received an unsent message" % slot_id)
                continue
            if same_step:
                if src != step or sender_of[rx] == slot_id:
                    problems.append(
                        "%s: same-step receipt is not from a same-step peer"
                        % slot_id
                    )
                carried = sm.store.get(rx)
                if any(gen_step.get(m) == step for m in carried.coffer):
                    problems.append(
                        "%s: same-step receipt carries a same-step coffer"
                        % slot_id
                    )
            elif src >= step:
                problems.append("%s: receipt precedes its send" % slot_id)
            delivered.append(rx)
        state = init_sandglass_state(slot_id, smsg.value)
        flips = [0]

        def coin_synth() -> str:
            flips[0] += 1
            return smsg.value

        res = run_step_sandglass(
            state, delivered, store=sm.store, t=t, coin_next=coin_synth
        )
        if res.message_id != mid:
            problems.append(
                "%s: defective replay produced a different message" % slot_id
            )
        if flips[0] > 1:
            problems.append("%s: defective replay over-flipped" % slot_id)

    # the synchronous and benign histories must agree on what correct nodes
    # consumed, modulo the dropped noise
    orig = []
    for ev in trace.events:
        if ev.kind != "Receive" or ev.data.get("role") != "correct":
            continue
        mid = ev.data["msg"]
        if mid in interp.dropped:
            continue
        step = ev.data["step"]
        consumed = step if ev.tick == step * trace.k else step + 1
        orig.append((interp.image[mid], ev.data["node"], consumed))
    mapped = sorted(message_history(sm))
    if sorted(orig) != mapped:
        problems.append("mapped message history diverged")
    return problems
