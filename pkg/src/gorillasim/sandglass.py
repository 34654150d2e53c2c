"""Benign-model node step logic: the vdf-free twin of the Gorilla step.

Control flow is identical (ingest, threshold-gated round advance, coffer
rebuild, unanimity counter, priority, decision) except that every delivered
message is ingested without a validity check, the tie-breaking coin comes
from an injected stream instead of vdf parity, and messages carry an
explicit sender and per-sender send ordinal instead of a nonce and vdf.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set

from .gorilla import decision_threshold
from .messages import MessageStore, SandglassMessage


@dataclass
class SandglassNodeState:
    node_id: str
    value: str
    round: int = 1
    uc: int = 0
    priority: int = 0
    uid: int = 0
    coffer: Set[bytes] = field(default_factory=set)
    rec_by_round: Dict[int, Set[bytes]] = field(default_factory=dict)
    known: Set[bytes] = field(default_factory=set)
    decided: Optional[str] = None


@dataclass
class SandglassStepResult:
    message_id: bytes
    message: SandglassMessage
    decide: Optional[str]
    coin: Optional[str]


def init_sandglass_state(node_id: str, value: str) -> SandglassNodeState:
    return SandglassNodeState(node_id=node_id, value=value)


def _ingest(state: SandglassNodeState, mid: bytes, store: MessageStore) -> None:
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


def run_step_sandglass(
    state: SandglassNodeState,
    delivered: List[bytes],
    *,
    store: MessageStore,
    t: int,
    coin_next: Callable[[], str],
) -> SandglassStepResult:
    """Execute one step; ``coin_next`` supplies the tie-break value and is
    consulted only when the top-priority support is mixed.
    """
    for mid in sorted(delivered):
        _ingest(state, mid, store)

    reachable = [r for r, ids in state.rec_by_round.items() if len(ids) >= t]
    best = max(reachable, default=None)

    decide: Optional[str] = None
    coin: Optional[str] = None

    if best is not None and best >= state.round:
        state.round = best + 1
        state.coffer = store.closure_union(
            state.rec_by_round.get(state.round - 1, ())
        )

        prev = [store.get(m) for m in state.coffer
                if store.get(m).round == state.round - 1]
        top = max(x.priority for x in prev)
        support = {x.value for x in prev if x.priority == top}
        if len(support) == 1:
            state.value = next(iter(support))
        else:
            state.value = coin_next()
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

    state.uid += 1
    state.coffer |= state.rec_by_round.get(state.round, set())
    msg = SandglassMessage(
        sender=state.node_id,
        uid=state.uid,
        round=state.round,
        value=state.value,
        priority=state.priority,
        uc=state.uc,
        coffer=frozenset(state.coffer),
    )
    mid = store.intern(msg)
    return SandglassStepResult(message_id=mid, message=msg, decide=decide, coin=coin)
