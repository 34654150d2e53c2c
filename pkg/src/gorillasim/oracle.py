"""Sequential-work oracle with a per-(node, tick) Get budget.

Unit values are drawn from a keyed BLAKE2 PRF over (run seed, canonical input
encoding, unit index), so verification is total and pure: the full chain for
any input is derivable on demand without touching the Get bookkeeping. The
ledger tracks Get progress (units issued, their ticks, the completion tick)
separately; verify and peek never advance a chain.

One unit takes one tick, K units make a full computation, and a step spans K
ticks, so a node computing alone finishes exactly one vdf per step.
"""

from dataclasses import dataclass, field
from functools import cached_property
from hashlib import blake2b, sha256
from typing import Dict, List, Optional, Set, Tuple

from .messages import encode_coffer


class OracleError(Exception):
    """Base class for every rule the oracle itself enforces."""


class RateLimitExceeded(OracleError):
    """Second Get by the same node in the same tick."""


class StaleChain(OracleError):
    """Get with a prev unit that does not extend the recorded frontier."""


class PeekInPlainMode(OracleError):
    """Peek against an oracle without the peek extension."""


class PeekWithoutCommitment(OracleError):
    """Peek lacking a completion pledge inside the current step."""


class RecursivePeek(OracleError):
    """Peek on an input whose coffer embeds a peeked, unfinished message."""


@dataclass(frozen=True)
class CommitmentBroken:
    """Audit record: a peek pledge whose Get calls never finished in time."""

    input_digest: bytes
    peek_tick: int
    pledged_step: int
    completed_tick: Optional[int]


@dataclass(frozen=True)
class VdfInput:
    """A computation input: a coffer of message ids plus a nonce."""

    coffer: frozenset
    nonce: bytes

    @cached_property
    def canonical(self) -> bytes:
        ids = encode_coffer(self.coffer)
        return (
            b"V"
            + len(self.coffer).to_bytes(4, "big")
            + ids
            + len(self.nonce).to_bytes(4, "big")
            + self.nonce
        )

    @cached_property
    def digest(self) -> bytes:
        return sha256(self.canonical).digest()


@dataclass
class VdfRecord:
    input: VdfInput
    units: List[int] = field(default_factory=list)
    get_ticks: List[Tuple[str, int]] = field(default_factory=list)
    completed_at_tick: Optional[int] = None


@dataclass(frozen=True)
class PeekEvent:
    node: str
    tick: int
    input_digest: bytes
    commit_tick: int


class Oracle:
    """The ideal sequential-work oracle; ``plus=True`` enables Peek."""

    def __init__(self, seed: int, k: int, plus: bool = False, unit_bits: int = 64) -> None:
        self.seed = seed
        self.k = k
        self.plus = plus
        self.unit_bits = unit_bits
        self.records: Dict[bytes, VdfRecord] = {}
        self.peeks: List[PeekEvent] = []
        self._peeked: Set[bytes] = set()
        self._used: Set[Tuple[str, int]] = set()

    def step_of(self, tick: int) -> int:
        return tick // self.k

    def _unit(self, inp: VdfInput, j: int) -> int:
        h = blake2b(
            inp.canonical + j.to_bytes(4, "big"),
            key=self.seed.to_bytes(8, "big", signed=False),
            digest_size=8,
        ).digest()
        return int.from_bytes(h, "big") & ((1 << self.unit_bits) - 1)

    def value(self, inp: VdfInput) -> int:
        """The final unit of the chain, derived without issuing Gets."""
        return self._unit(inp, self.k)

    def _record(self, inp: VdfInput) -> VdfRecord:
        d = inp.digest
        rec = self.records.get(d)
        if rec is None:
            rec = VdfRecord(input=inp)
            self.records[d] = rec
        return rec

    def get(self, node: str, tick: int, inp: VdfInput, prev: Optional[int]) -> int:
        """Issue the next unit of the chain for ``inp``.

        At most one Get per node per tick across all inputs; ``prev`` must be
        the last unit already issued for this input (None to start).
        """
        if (node, tick) in self._used:
            raise RateLimitExceeded("%s already called Get at tick %d" % (node, tick))
        rec = self._record(inp)
        done = len(rec.units)
        if done >= self.k:
            raise StaleChain("chain already complete for %s" % inp.digest.hex())
        expected = rec.units[-1] if done else None
        if prev != expected:
            raise StaleChain("prev unit does not match the frontier")
        self._used.add((node, tick))
        unit = self._unit(inp, done + 1)
        rec.units.append(unit)
        rec.get_ticks.append((node, tick))
        if len(rec.units) == self.k:
            rec.completed_at_tick = tick
        return unit

    def verify(self, candidate: int, inp: VdfInput) -> bool:
        """True iff candidate is the full-chain value for inp. Unlimited."""
        return candidate == self.value(inp)

    def peek(
        self,
        node: str,
        tick: int,
        inp: VdfInput,
        commit_tick: int,
        member_inputs: Optional[List[VdfInput]] = None,
    ) -> int:
        """Return the chain value immediately against a completion pledge.

        The pledge must name a tick in the current step; the input may not
        embed a message whose own vdf was peeked and whose chain has not
        finished by this tick.
        """
        if not self.plus:
            raise PeekInPlainMode("peek is unavailable in the plain model")
        if commit_tick is None or self.step_of(commit_tick) != self.step_of(tick):
            raise PeekWithoutCommitment(
                "pledge tick %r is not in step %d" % (commit_tick, self.step_of(tick))
            )
        for dep in member_inputs or ():
            if dep.digest not in self._peeked:
                continue
            rec = self.records.get(dep.digest)
            done = rec.completed_at_tick if rec else None
            if done is None or done > tick:
                raise RecursivePeek(
                    "input embeds peeked, unfinished chain %s" % dep.digest.hex()
                )
        self._record(inp)
        self.peeks.append(PeekEvent(node, tick, inp.digest, commit_tick))
        self._peeked.add(inp.digest)
        return self.value(inp)

    def audit_step(self, step: int) -> List[CommitmentBroken]:
        """Check every pledge made during ``step``; violations are data."""
        out = []
        for ev in self.peeks:
            if self.step_of(ev.tick) != step:
                continue
            rec = self.records.get(ev.input_digest)
            done = rec.completed_at_tick if rec else None
            if done is None or self.step_of(done) > step:
                out.append(
                    CommitmentBroken(
                        input_digest=ev.input_digest,
                        peek_tick=ev.tick,
                        pledged_step=step,
                        completed_tick=done,
                    )
                )
        return out

    def chain_completed_at(self, inp: VdfInput) -> Optional[int]:
        rec = self.records.get(inp.digest)
        return rec.completed_at_tick if rec else None

    def peeked_at(self, inp: VdfInput) -> Optional[int]:
        ticks = [ev.tick for ev in self.peeks if ev.input_digest == inp.digest]
        return min(ticks) if ticks else None

    def dump_ledger(self) -> str:
        """Deterministic debug dump: digest, units issued, completion tick."""
        lines = []
        for d in sorted(self.records):
            rec = self.records[d]
            lines.append(
                "%s units=%d completed=%s"
                % (d.hex(), len(rec.units), rec.completed_at_tick)
            )
        return "\n".join(lines)
