"""Correct-node step logic for the vdf-gated protocol.

A node runs one atomic step per K ticks: it ingests everything received since
its previous step, advances its round when some round's valid support reaches
the threshold T, spends the step's K ticks computing a fresh vdf over its
coffer, and broadcasts at the step's last tick. Priority grows with the
unanimity counter; a node decides when priority reaches 6T + 4.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .messages import GorillaMessage, MessageStore, coin_value
from .oracle import Oracle, VdfInput


class InactiveNode(Exception):
    """Step driven on a node outside its activity window."""


def decision_threshold(t: int) -> int:
    return 6 * t + 4


@dataclass
class GorillaNodeState:
    node_id: str
    value: str
    round: int = 1
    uc: int = 0
    priority: int = 0
    coffer: Set[bytes] = field(default_factory=set)
    rec_by_round: Dict[int, Set[bytes]] = field(default_factory=dict)
    known: Set[bytes] = field(default_factory=set)
    decided: Optional[str] = None
    pending_input: Optional[VdfInput] = None


@dataclass
class StepResult:
    message_id: bytes
    message: GorillaMessage
    decide: Optional[str]
    coin: Optional[str]
    gets: List[Tuple[int, int, int]]  # (tick, unit index, unit value)
    input_digest: bytes


def init_state(node_id: str, value: str) -> GorillaNodeState:
    return GorillaNodeState(node_id=node_id, value=value)


def _ingest(state: GorillaNodeState, mid: bytes, store: MessageStore) -> None:
    # walk the closure incrementally; a member already ingested has had its
    # own closure ingested too, so the walk cuts off there
    known = state.known
    if mid in known:
        return
    known.add(mid)
    stack = [mid]
    rec = state.rec_by_round
    while stack:
        m = stack.pop()
        msg = store.get(m)
        rec.setdefault(msg.round, set()).add(m)
        for c in msg.coffer:
            if c not in known:
                known.add(c)
                stack.append(c)


def run_step(
    state: GorillaNodeState,
    delivered: List[bytes],
    *,
    store: MessageStore,
    oracle: Oracle,
    t: int,
    k: int,
    step: int,
) -> StepResult:
    """Execute one full step; mutates state and returns the broadcast."""
    for mid in sorted(delivered):
        ok, _reason = store.is_valid(mid, oracle, t)
        if ok:
            _ingest(state, mid, store)

    reachable = [r for r, ids in state.rec_by_round.items() if len(ids) >= t]
    best = max(reachable, default=None)

    decide: Optional[str] = None
    coin: Optional[str] = None

    if best is not None and best >= state.round:
        state.round = best + 1
        coffer = store.closure_union(state.rec_by_round.get(state.round - 1, ()))
        coffer |= state.rec_by_round.get(state.round, set())
        state.coffer = coffer

        nonce = ("%s|%d" % (state.node_id, step)).encode()
        inp = VdfInput(frozenset(state.coffer), nonce)
        vdf, gets = _compute_chain(state.node_id, oracle, inp, k, step)

        prev = [store.get(m) for m in state.coffer if store.get(m).round == state.round - 1]
        top = max(x.priority for x in prev)
        support = {x.value for x in prev if x.priority == top}
        if len(support) == 1:
            state.value = next(iter(support))
        else:
            state.value = coin_value(vdf)
            coin = state.value
        if all(x.value == state.value for x in prev):
            state.uc = 1 + min(x.uc for x in prev)
        else:
            state.uc = 0
        state.priority = max(0, state.uc // t - 5)
        if state.priority >= decision_threshold(t):
            decide = state.value
            if state.decided is None:
                state.decided = state.value
    else:
        state.coffer |= state.rec_by_round.get(state.round, set())
        nonce = ("%s|%d" % (state.node_id, step)).encode()
        inp = VdfInput(frozenset(state.coffer), nonce)
        vdf, gets = _compute_chain(state.node_id, oracle, inp, k, step)

    state.pending_input = None
    msg = GorillaMessage(
        round=state.round,
        value=state.value,
        priority=state.priority,
        uc=state.uc,
        coffer=frozenset(state.coffer),
        nonce=inp.nonce,
        vdf=vdf,
    )
    mid = store.intern(msg)
    return StepResult(
        message_id=mid,
        message=msg,
        decide=decide,
        coin=coin,
        gets=gets,
        input_digest=inp.digest,
    )


def _compute_chain(
    node_id: str, oracle: Oracle, inp: VdfInput, k: int, step: int
) -> Tuple[int, List[Tuple[int, int, int]]]:
    gets: List[Tuple[int, int, int]] = []
    prev: Optional[int] = None
    for j in range(k):
        tick = step * k + j
        prev = oracle.get(node_id, tick, inp, prev)
        gets.append((tick, j + 1, prev))
    assert prev is not None
    return prev, gets
