"""Message encodings, the content-addressed store, closure, attribute
consistency, full validity, and the cross-protocol message translation."""

from hashlib import sha256

import pytest

from gorillasim.messages import (
    DanglingCofferRef,
    GorillaMessage,
    MessageStore,
    SandglassMessage,
    UnknownSender,
    VALUES,
    coin_value,
    encode_coffer,
    mapm,
)
from gorillasim.oracle import Oracle, VdfInput


def _u32(n):
    return n.to_bytes(4, "big")


def _u64(n):
    return n.to_bytes(8, "big")


def gmsg(round=1, value="a", priority=0, uc=0, coffer=(), nonce=b"n", vdf=0):
    return GorillaMessage(
        round=round, value=value, priority=priority, uc=uc,
        coffer=frozenset(coffer), nonce=nonce, vdf=vdf,
    )


def smsg(sender="p", uid=1, round=1, value="a", priority=0, uc=0, coffer=()):
    return SandglassMessage(
        sender=sender, uid=uid, round=round, value=value,
        priority=priority, uc=uc, coffer=frozenset(coffer),
    )


def chain_vdf(oracle, coffer, nonce):
    return oracle.value(VdfInput(frozenset(coffer), nonce))


def honest(oracle, round, value, uc, coffer, nonce, t=1):
    """A message whose fields follow the attribute formulas."""
    return GorillaMessage(
        round=round, value=value, priority=max(0, uc // t - 5), uc=uc,
        coffer=frozenset(coffer), nonce=nonce,
        vdf=chain_vdf(oracle, coffer, nonce),
    )


def test_coin_value_is_parity():
    assert coin_value(0) == "a"
    assert coin_value(1) == "b"
    assert coin_value(2) == "a"
    assert [coin_value(v) for v in range(4)] == ["a", "b", "a", "b"]
    assert set(VALUES) == {"a", "b"}


def test_gorilla_encoding_is_byte_exact():
    m = gmsg(round=2, value="b", priority=1, uc=12,
             coffer={b"\x02" * 32, b"\x01" * 32}, nonce=b"nn", vdf=77)
    expected = b"G" + b"".join((
        _u32(8) + _u64(2),
        _u32(1) + b"\x01",
        _u32(8) + _u64(1),
        _u32(8) + _u64(12),
        _u32(64) + b"\x01" * 32 + b"\x02" * 32,
        _u32(2) + b"nn",
        _u32(8) + _u64(77),
    ))
    assert m.encode() == expected
    assert m.id == sha256(expected).digest()


def test_sandglass_encoding_is_byte_exact():
    m = smsg(sender="pq", uid=3, round=2, value="a", priority=0, uc=5,
             coffer={b"\x03" * 32})
    expected = b"S" + b"".join((
        _u32(2) + b"pq",
        _u32(8) + _u64(3),
        _u32(8) + _u64(2),
        _u32(1) + b"\x00",
        _u32(8) + _u64(0),
        _u32(8) + _u64(5),
        _u32(32) + b"\x03" * 32,
    ))
    assert m.encode() == expected
    assert m.id == sha256(expected).digest()


def test_coffer_encoding_sorts_members():
    a, b = b"\x05" * 32, b"\x04" * 32
    assert encode_coffer(frozenset({a, b})) == b + a


def test_id_changes_with_any_field():
    base = gmsg()
    assert gmsg(nonce=b"m").id != base.id
    assert gmsg(vdf=1).id != base.id
    assert gmsg(value="b").id != base.id
    assert gmsg(uc=1).id != base.id


def test_store_intern_is_idempotent():
    store = MessageStore()
    m = gmsg()
    assert store.intern(m) == store.intern(m) == m.id
    assert len(store) == 1
    assert store.get(m.id) == m
    assert m.id in store


def test_store_rejects_dangling_coffer():
    store = MessageStore()
    with pytest.raises(DanglingCofferRef):
        store.intern(gmsg(coffer={b"\x00" * 32}))


def test_closure_walks_nested_coffers():
    store = MessageStore()
    a = gmsg(nonce=b"a")
    b = gmsg(nonce=b"b")
    c = gmsg(round=1, nonce=b"c", coffer={a.id, b.id})
    d = gmsg(round=1, nonce=b"d", coffer={c.id, a.id})
    for m in (a, b, c, d):
        store.intern(m)
    assert store.closure(a.id) == {a.id}
    assert store.closure(c.id) == {a.id, b.id, c.id}
    assert store.closure(d.id) == {a.id, b.id, c.id, d.id}
    assert store.closure_union([c.id, d.id]) == {a.id, b.id, c.id, d.id}
    assert store.coffer_closure(d) == {a.id, b.id, c.id}


def test_coffer_closure_for_foreign_message():
    store = MessageStore()
    a = gmsg(nonce=b"a")
    store.intern(a)
    ghost = gmsg(nonce=b"ghost", coffer={a.id})
    assert ghost.id not in store
    assert store.coffer_closure(ghost) == {a.id}


def _round1_block(store, oracle, count, values=("a",), prefix=b"r1"):
    out = []
    for i in range(count):
        m = honest(oracle, 1, values[i % len(values)], 0, (), prefix + bytes([i]))
        store.intern(m)
        out.append(m)
    return out


def test_structure_accepts_fresh_round2():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    block = _round1_block(store, oracle, 2, values=("a", "a"))
    coffer = {m.id for m in block}
    m2 = honest(oracle, 2, "a", 1, coffer, b"m2", t=t)
    store.intern(m2)
    assert store.check_structure(m2, t) is None
    assert store.check_internal_consistency(m2, t) is None


def test_structure_round1_rules():
    store = MessageStore()
    oracle = Oracle(0, 3)
    bad_uc = gmsg(uc=1, vdf=chain_vdf(oracle, (), b"n"))
    store.intern(bad_uc)
    assert "round 1" in store.check_structure(bad_uc, 2)
    bad_pri = gmsg(priority=3, nonce=b"p")
    store.intern(bad_pri)
    assert "round 1" in store.check_structure(bad_pri, 2)
    block = _round1_block(store, oracle, 2)
    full = gmsg(nonce=b"full", coffer={m.id for m in block})
    store.intern(full)
    assert "threshold" in store.check_structure(full, 2)


def test_structure_needs_enough_support():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    (only,) = _round1_block(store, oracle, 1)
    thin = honest(oracle, 2, "a", 1, {only.id}, b"thin", t=t)
    store.intern(thin)
    assert store.check_structure(thin, t) == "missing round-(r-1) support"


def test_structure_rejects_member_from_future_round():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    block = _round1_block(store, oracle, 2, values=("a", "a"))
    m2 = honest(oracle, 2, "a", 1, {m.id for m in block}, b"m2", t=t)
    store.intern(m2)
    late = gmsg(round=1, nonce=b"late", coffer={m2.id})
    store.intern(late)
    assert store.check_structure(late, t) == (
        "coffer member round exceeds message round"
    )


def test_structure_checks_priority_formula():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    block = _round1_block(store, oracle, 2, values=("a", "a"))
    wrong = gmsg(round=2, value="a", priority=4, uc=1,
                 coffer={m.id for m in block}, nonce=b"w",
                 vdf=chain_vdf(oracle, {m.id for m in block}, b"w"))
    store.intern(wrong)
    assert store.check_structure(wrong, t) == "priority mismatch"


def test_structure_checks_unanimity_counter():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    block = _round1_block(store, oracle, 2, values=("a", "a"))
    coffer = {m.id for m in block}
    wrong = gmsg(round=2, value="a", priority=0, uc=2, coffer=coffer,
                 nonce=b"w", vdf=chain_vdf(oracle, coffer, b"w"))
    store.intern(wrong)
    assert store.check_structure(wrong, t) == "unanimity counter mismatch"


def test_structure_evaluates_closure_not_direct_members():
    """Support hidden one level down still counts: a coffer holding one
    round-1 message that itself embeds another yields a full slice."""
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    inner = honest(oracle, 1, "a", 0, (), b"inner")
    store.intern(inner)
    outer = honest(oracle, 1, "a", 0, {inner.id}, b"outer")
    store.intern(outer)
    m2 = honest(oracle, 2, "a", 1, {outer.id}, b"m2", t=t)
    store.intern(m2)
    assert store.check_structure(m2, t) is None


def test_witness_allows_sticky_reannounce():
    """After entering round 2, a node rebroadcasts its attributes unchanged
    even though its round-1 view kept growing; its earlier same-round message
    in the coffer vouches for the stale counter."""
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    block = _round1_block(store, oracle, 2, values=("a", "a"))
    coffer1 = {m.id for m in block}
    first = honest(oracle, 2, "a", 1, coffer1, b"first", t=t)
    store.intern(first)
    extra = _round1_block(store, oracle, 2, values=("b", "b"), prefix=b"x")
    grown = coffer1 | {m.id for m in extra} | {first.id}
    again = GorillaMessage(
        round=2, value="a", priority=0, uc=1, coffer=frozenset(grown),
        nonce=b"again", vdf=chain_vdf(oracle, grown, b"again"),
    )
    store.intern(again)
    # a fresh entry over the grown view would derive uc=0 (mixed values),
    # so only the witness makes this acceptable
    assert store.check_structure(again, t) is None
    without_witness = GorillaMessage(
        round=2, value="a", priority=0, uc=1,
        coffer=frozenset(grown - {first.id}),
        nonce=b"nw", vdf=chain_vdf(oracle, grown - {first.id}, b"nw"),
    )
    store.intern(without_witness)
    assert store.check_structure(without_witness, t) is not None


def test_consistency_mixed_support_must_follow_coin():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    block = _round1_block(store, oracle, 2, values=("a", "b"))
    coffer = {m.id for m in block}
    drawn = coin_value(chain_vdf(oracle, coffer, b"c"))
    other = "b" if drawn == "a" else "a"
    good = gmsg(round=2, value=drawn, uc=0, coffer=coffer, nonce=b"c",
                vdf=chain_vdf(oracle, coffer, b"c"))
    store.intern(good)
    assert store.check_internal_consistency(good, t) is None
    bad = gmsg(round=2, value=other, uc=0, coffer=coffer, nonce=b"c2",
               vdf=chain_vdf(oracle, coffer, b"c2"))
    if coin_value(bad.vdf) == other:
        bad = gmsg(round=2, value=other, uc=0, coffer=coffer, nonce=b"c3",
                   vdf=chain_vdf(oracle, coffer, b"c3"))
    store.intern(bad)
    assert store.check_internal_consistency(bad, t) == (
        "fresh entry value is neither supported nor the coin draw"
    )


def test_consistency_unanimous_support_pins_value():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    block = _round1_block(store, oracle, 2, values=("b", "b"))
    coffer = {m.id for m in block}
    wrong = gmsg(round=2, value="a", uc=0, coffer=coffer, nonce=b"w",
                 vdf=chain_vdf(oracle, coffer, b"w"))
    store.intern(wrong)
    assert store.check_structure(wrong, t) == (
        "value contradicts unanimous top-priority support"
    )


def test_is_valid_verifies_chain_value():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    good = honest(oracle, 1, "a", 0, (), b"g")
    store.intern(good)
    ok, why = store.is_valid(good.id, oracle, t)
    assert ok and why is None
    forged = gmsg(nonce=b"g2", vdf=good.vdf)  # chain value of another input
    store.intern(forged)
    assert store.is_valid(forged.id, oracle, t) == (False, "BadVdf")


def test_is_valid_rejects_invalid_ancestor():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    bad = gmsg(nonce=b"bad", vdf=123456)  # wrong chain value
    store.intern(bad)
    child_coffer = {bad.id}
    child = honest(oracle, 1, "a", 0, child_coffer, b"child")
    store.intern(child)
    ok, why = store.is_valid(child.id, oracle, t)
    assert (ok, why) == (False, "InvalidAncestor")


def test_is_valid_rejects_inconsistent_attributes():
    store = MessageStore()
    oracle = Oracle(0, 3)
    t = 2
    lying = gmsg(round=1, uc=3, nonce=b"lie",
                 vdf=chain_vdf(oracle, (), b"lie"))
    store.intern(lying)
    assert store.is_valid(lying.id, oracle, t) == (False, "Inconsistent")


def test_mapm_translates_and_recurses():
    gstore, sstore = MessageStore(), MessageStore()
    oracle = Oracle(0, 3)
    a = honest(oracle, 1, "a", 0, (), b"a")
    b = honest(oracle, 1, "a", 0, (), b"b")
    gstore.intern(a)
    gstore.intern(b)
    top = honest(oracle, 2, "a", 1, {a.id, b.id}, b"t", t=2)
    gstore.intern(top)
    names = {a.id: ("p", 1), b.id: ("q", 1), top.id: ("p", 2)}
    sid = mapm(gstore, sstore, top.id, names.__getitem__)
    stop = sstore.get(sid)
    assert (stop.sender, stop.uid) == ("p", 2)
    assert (stop.round, stop.value, stop.uc, stop.priority) == (2, "a", 1, 0)
    assert len(stop.coffer) == 2
    senders = {sstore.get(m).sender for m in stop.coffer}
    assert senders == {"p", "q"}
    # same attributes, vdf and nonce gone
    assert not hasattr(stop, "vdf")


def test_mapm_needs_attribution():
    gstore, sstore = MessageStore(), MessageStore()
    oracle = Oracle(0, 3)
    a = honest(oracle, 1, "a", 0, (), b"a")
    gstore.intern(a)

    def no_name(_mid):
        raise UnknownSender("nobody generated this")

    with pytest.raises(UnknownSender):
        mapm(gstore, sstore, a.id, no_name)


def test_mapm_is_stable_per_message():
    gstore, sstore = MessageStore(), MessageStore()
    oracle = Oracle(0, 3)
    a = honest(oracle, 1, "a", 0, (), b"a")
    gstore.intern(a)
    names = {a.id: ("p", 1)}
    assert mapm(gstore, sstore, a.id, names.__getitem__) == mapm(
        gstore, sstore, a.id, names.__getitem__
    )
