"""Message model: values, canonical encodings, the content-addressed store,
message validity, and the Gorilla-to-Sandglass message translation.

Canonical encodings (kept byte-exact so traces are portable):

* Every message is encoded as a one-byte type tag (``G`` or ``S``) followed by
  its fields in declared order, each length-prefixed with a big-endian u32.
* Integers are 8-byte big-endian; values are one byte (0 for ``a``, 1 for
  ``b``); coffers are the member ids sorted ascending and concatenated;
  nonces and sender ids are raw bytes.
* A message id is the SHA-256 of its encoding.
"""

from dataclasses import dataclass
from functools import cached_property
from hashlib import sha256
from typing import Callable, Dict, FrozenSet, List, Optional, Set, Tuple

VALUE_A = "a"
VALUE_B = "b"
VALUES = (VALUE_A, VALUE_B)


def coin_value(vdf: int) -> str:
    """Map a vdf unit to a value: even -> a, odd -> b."""
    return VALUES[vdf & 1]


class DanglingCofferRef(Exception):
    """A message referenced a coffer member the store has never seen."""


class UnknownSender(Exception):
    """A message has no generation evidence, so it cannot be attributed."""


def _u32(n: int) -> bytes:
    return n.to_bytes(4, "big")


def _u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def _field(payload: bytes) -> bytes:
    return _u32(len(payload)) + payload


def _value_byte(value: str) -> bytes:
    if value == VALUE_A:
        return b"\x00"
    if value == VALUE_B:
        return b"\x01"
    raise ValueError("unknown value tag: %r" % (value,))


def encode_coffer(coffer: FrozenSet[bytes]) -> bytes:
    return b"".join(sorted(coffer))


@dataclass(frozen=True)
class GorillaMessage:
    round: int
    value: str
    priority: int
    uc: int
    coffer: FrozenSet[bytes]
    nonce: bytes
    vdf: int

    def encode(self) -> bytes:
        return b"G" + b"".join(
            (
                _field(_u64(self.round)),
                _field(_value_byte(self.value)),
                _field(_u64(self.priority)),
                _field(_u64(self.uc)),
                _field(encode_coffer(self.coffer)),
                _field(self.nonce),
                _field(_u64(self.vdf)),
            )
        )

    @cached_property
    def id(self) -> bytes:
        return sha256(self.encode()).digest()


@dataclass(frozen=True)
class SandglassMessage:
    sender: str
    uid: int
    round: int
    value: str
    priority: int
    uc: int
    coffer: FrozenSet[bytes]

    def encode(self) -> bytes:
        return b"S" + b"".join(
            (
                _field(self.sender.encode()),
                _field(_u64(self.uid)),
                _field(_u64(self.round)),
                _field(_value_byte(self.value)),
                _field(_u64(self.priority)),
                _field(_u64(self.uc)),
                _field(encode_coffer(self.coffer)),
            )
        )

    @cached_property
    def id(self) -> bytes:
        return sha256(self.encode()).digest()


class MessageStore:
    """Content-addressed message store with memoized closure and validity.

    One store holds one kind of message (Gorilla or Sandglass); ids are
    content hashes, so interning is idempotent and coffers are immutable.
    """

    def __init__(self) -> None:
        self.messages: Dict[bytes, object] = {}
        self._order: List[bytes] = []
        self._closure: Dict[bytes, FrozenSet[bytes]] = {}
        self._valid: Dict[bytes, Tuple[bool, Optional[str]]] = {}

    def __contains__(self, mid: bytes) -> bool:
        return mid in self.messages

    def __len__(self) -> int:
        return len(self.messages)

    def get(self, mid: bytes):
        return self.messages[mid]

    def ids_in_order(self) -> List[bytes]:
        return list(self._order)

    def intern(self, msg) -> bytes:
        """Add a message, checking every coffer member is already present."""
        for member in msg.coffer:
            if member not in self.messages:
                raise DanglingCofferRef(member.hex())
        mid = msg.id
        if mid not in self.messages:
            self.messages[mid] = msg
            self._order.append(mid)
        return mid

    def closure(self, mid: bytes) -> FrozenSet[bytes]:
        """The message plus everything transitively reachable via coffers."""
        memo = self._closure
        if mid in memo:
            return memo[mid]
        stack = [mid]
        while stack:
            top = stack[-1]
            if top in memo:
                stack.pop()
                continue
            pending = [m for m in self.messages[top].coffer if m not in memo]
            if pending:
                stack.extend(pending)
                continue
            acc = {top}
            # biggest member first: anything already absorbed is transitively
            # covered, so its whole closure can be skipped
            for m in sorted(self.messages[top].coffer,
                            key=lambda x: len(memo[x]), reverse=True):
                if m not in acc:
                    acc.update(memo[m])
            memo[top] = frozenset(acc)
            stack.pop()
        return memo[mid]

    def closure_union(self, ids) -> Set[bytes]:
        """Union of member closures (same skip rule as construction)."""
        acc: Set[bytes] = set()
        for m in sorted(ids, key=lambda x: len(self.closure(x)), reverse=True):
            if m not in acc:
                acc.update(self._closure[m])
        return acc

    def slice_ids(self, ids, rnd: int) -> List[bytes]:
        return [m for m in ids if self.messages[m].round == rnd]

    def coffer_closure(self, msg: GorillaMessage) -> FrozenSet[bytes]:
        """Everything transitively reachable from the coffer, excluding msg."""
        if msg.id in self.messages:
            return self.closure(msg.id) - {msg.id}
        return frozenset(self.closure_union(msg.coffer))

    def check_structure(self, msg, t: int) -> Optional[str]:
        """Attribute checks that need no coin verification: slices of the
        coffer's transitive closure must justify the claimed round, counter
        and priority. Shared between both message kinds.

        Attributes are recomputed over the closure because a node's received
        set is always closed under coffer membership: whatever the sender
        claims to have seen includes the histories carried inside each
        member. A same-round member with identical (value, uc, priority) is a
        witness that the sender entered the round earlier and re-announces
        sticky attributes, so the counter/value recomputation is skipped.
        """
        members = [self.messages[m] for m in msg.coffer]
        if any(x.round > msg.round for x in members):
            return "coffer member round exceeds message round"
        rec = [self.messages[m] for m in self.coffer_closure(msg)]
        cur = [x for x in rec if x.round == msg.round]
        if msg.round == 1:
            if msg.uc != 0:
                return "nonzero unanimity counter in round 1"
            if msg.priority != 0:
                return "nonzero priority in round 1"
            if len(cur) >= t:
                return "round-1 coffer already holds a full threshold"
            return None
        prev = [x for x in rec if x.round == msg.round - 1]
        if len(prev) < t:
            return "missing round-(r-1) support"
        if len(cur) >= t:
            return "current-round slice reaches the threshold"
        if msg.priority != max(0, msg.uc // t - 5):
            return "priority mismatch"
        if self._has_witness(msg):
            return None
        if all(x.value == msg.value for x in prev):
            expect_uc = 1 + min(x.uc for x in prev)
        else:
            expect_uc = 0
        if msg.uc != expect_uc:
            return "unanimity counter mismatch"
        top = max(x.priority for x in prev)
        support = {x.value for x in prev if x.priority == top}
        if len(support) == 1 and msg.value != next(iter(support)):
            return "value contradicts unanimous top-priority support"
        return None

    def _has_witness(self, msg) -> bool:
        # a node that entered this round in an earlier step re-announces its
        # sticky attributes; its own previous same-round message sits in the
        # coffer and vouches for the carried value and counter even though
        # the round-(r-1) view has grown since
        return any(
            self.messages[m].round == msg.round
            and self.messages[m].value == msg.value
            and self.messages[m].uc == msg.uc
            and self.messages[m].priority == msg.priority
            for m in msg.coffer
        )

    def check_internal_consistency(self, msg: GorillaMessage, t: int) -> Optional[str]:
        """Return None when the attributes could have been produced by a node
        following the protocol over this coffer, else a reason string. On top
        of the structural checks, a fresh round entry whose top-priority
        support is mixed must carry the chain's coin draw as its value.
        """
        problem = self.check_structure(msg, t)
        if problem is not None:
            return problem
        if msg.round == 1 or self._has_witness(msg):
            return None
        prev = [self.messages[m] for m in self.coffer_closure(msg)
                if self.messages[m].round == msg.round - 1]
        top = max(x.priority for x in prev)
        support = {x.value for x in prev if x.priority == top}
        if len(support) != 1 and msg.value != coin_value(msg.vdf):
            return "fresh entry value is neither supported nor the coin draw"
        return None

    def is_valid(self, mid: bytes, oracle, t: int) -> Tuple[bool, Optional[str]]:
        """Full validity: vdf verifies, attributes are consistent, and every
        coffer member is recursively valid. Memoized per id.
        """
        memo = self._valid
        if mid in memo:
            return memo[mid]
        from .oracle import VdfInput

        stack = [mid]
        while stack:
            top = stack[-1]
            if top in memo:
                stack.pop()
                continue
            msg = self.messages[top]
            pending = [m for m in msg.coffer if m not in memo]
            if pending:
                stack.extend(pending)
                continue
            if not oracle.verify(msg.vdf, VdfInput(msg.coffer, msg.nonce)):
                memo[top] = (False, "BadVdf")
            elif self.check_internal_consistency(msg, t) is not None:
                memo[top] = (False, "Inconsistent")
            elif any(not memo[m][0] for m in msg.coffer):
                memo[top] = (False, "InvalidAncestor")
            else:
                memo[top] = (True, None)
            stack.pop()
        return memo[mid]


def mapm(
    gstore: MessageStore,
    sstore: MessageStore,
    mid: bytes,
    attribution: Callable[[bytes], Tuple[str, int]],
    _memo: Optional[Dict[bytes, bytes]] = None,
) -> bytes:
    """Translate a Gorilla message into its Sandglass twin.

    Drops the vdf and nonce, attaches the generating sender and its per-sender
    send ordinal, and recurses over the coffer. ``attribution`` maps a Gorilla
    id to (sender, uid) and raises UnknownSender when there is no evidence.
    """
    memo = _memo if _memo is not None else {}
    stack = [mid]
    while stack:
        top = stack[-1]
        if top in memo:
            stack.pop()
            continue
        gmsg = gstore.get(top)
        pending = [m for m in gmsg.coffer if m not in memo]
        if pending:
            stack.extend(pending)
            continue
        sender, uid = attribution(top)
        smsg = SandglassMessage(
            sender=sender,
            uid=uid,
            round=gmsg.round,
            value=gmsg.value,
            priority=gmsg.priority,
            uc=gmsg.uc,
            coffer=frozenset(memo[m] for m in gmsg.coffer),
        )
        memo[top] = sstore.intern(smsg)
        stack.pop()
    return memo[mid]
