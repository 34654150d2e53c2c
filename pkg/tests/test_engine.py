"""Run-loop behavior: tick schedules, delivery latency, join/leave handling,
adversary capacity accounting, peek pledges, and the benign-model scheduler
legality rules."""

import pytest

from gorillasim.adversary import (
    ByzGet,
    ByzPeek,
    ByzSend,
    FuzzScheduler,
    FuzzStrategy,
    SameStepScheduler,
    SchedulerStrategy,
    ScriptedStrategy,
    SMPlan,
)
from gorillasim.engine import (
    CorrectNodeSpec,
    Environment,
    IllegalStrategyAction,
    run,
    run_smplus,
)
from gorillasim.oracle import VdfInput


def solo_env(k=3, max_steps=20):
    return Environment(k=k, n=1, max_steps=max_steps,
                       correct=(CorrectNodeSpec("p", "a"),))


def byz_env(max_steps=6, cap=(1,)):
    return Environment(k=3, n=3, max_steps=max_steps,
                       correct=(CorrectNodeSpec("p", "a"),
                                CorrectNodeSpec("q", "a")),
                       capacity=cap)


def test_correct_node_tick_schedule():
    k = 4
    trace = run(solo_env(k=k), seed=1)
    for step in range(3):
        t0 = step * k
        gets = [ev for ev in trace.events_of_kind("GetCall")
                if ev.data["step"] == step]
        assert [ev.tick for ev in gets] == list(range(t0, t0 + k))
        assert [ev.data["index"] for ev in gets] == list(range(1, k + 1))
        casts = [ev for ev in trace.events_of_kind("Broadcast")
                 if ev.data["step"] == step]
        assert len(casts) == 1 and casts[0].tick == t0 + k - 1
    # a broadcast lands at the start of the next step
    for ev in trace.events_of_kind("Receive"):
        assert ev.tick % k == 0
        assert ev.data["via"] == "broadcast"
    assert trace.events == sorted(trace.events, key=lambda e: e.sort_key())


def test_run_stops_once_everyone_decided():
    trace = run(solo_env(max_steps=400), seed=0)
    assert trace.meta["stopped_at_step"] == 15
    assert trace.meta["decisions"]["p"] == {"step": 15, "round": 16,
                                            "value": "a"}


def test_late_joiner_catches_up():
    env = Environment(k=3, n=2, max_steps=8,
                      correct=(CorrectNodeSpec("p", "a"),
                               CorrectNodeSpec("q", "a", join=3)))
    trace = run(env, seed=0)
    catchup = [ev for ev in trace.events_of_kind("Receive")
               if ev.data["via"] == "catchup"]
    assert catchup and all(ev.data["node"] == "q" for ev in catchup)
    assert all(ev.data["step"] == 3 for ev in catchup)
    # p broadcast one message in each of steps 0..2; the first two arrive by
    # catch-up, the third through the normal boundary delivery
    assert len(catchup) == 2
    boundary = [ev for ev in trace.events_of_kind("Receive")
                if ev.data["node"] == "q" and ev.data["via"] == "broadcast"
                and ev.data["step"] == 3]
    assert len(boundary) == 1
    # with three round-1 messages in hand q advances on its first step
    assert trace.final_states["q"]["round"] >= 2


def test_leaver_goes_quiet():
    env = Environment(k=3, n=2, max_steps=8,
                      correct=(CorrectNodeSpec("p", "a", leave=5),
                               CorrectNodeSpec("q", "a")))
    trace = run(env, seed=0)
    leaves = trace.events_of_kind("Leave")
    assert [(ev.data["node"], ev.data["step"]) for ev in leaves] == [("p", 4)]
    p_casts = [ev.data["step"] for ev in trace.events_of_kind("Broadcast")
               if ev.data["node"] == "p"]
    assert max(p_casts) == 4
    p_rcv = [ev.data["step"] for ev in trace.events_of_kind("Receive")
             if ev.data["node"] == "p"]
    assert max(p_rcv) == 4
    assert "p" in trace.final_states  # history survives the exit


def test_byz_get_send_pipeline():
    inp = VdfInput(frozenset(), b"byz-chain")
    script = {0: [ByzGet(0, "b0", inp), ByzGet(1, "b0", inp),
                  ByzGet(2, "b0", inp),
                  ByzSend(2, "b0", frozenset(), b"byz-chain", ("*",))]}
    trace = run(byz_env(), ScriptedStrategy(script), seed=5)
    byz_casts = [ev for ev in trace.events_of_kind("Broadcast")
                 if ev.data["role"] == "byz"]
    assert len(byz_casts) == 1 and byz_casts[0].tick == 2
    mid = byz_casts[0].data["msg"]
    receipts = [ev for ev in trace.events_of_kind("Receive")
                if ev.data["msg"] == mid]
    assert {ev.data["node"] for ev in receipts} == {"p", "q"}
    assert all(ev.data["step"] == 1 for ev in receipts)
    byz_gets = [ev for ev in trace.events_of_kind("GetCall")
                if ev.data["role"] == "byz"]
    assert [ev.data["index"] for ev in byz_gets] == [1, 2, 3]


def test_send_requires_computed_chain():
    script = {0: [ByzSend(0, "b0", frozenset(), b"never-computed", ("*",))]}
    with pytest.raises(IllegalStrategyAction, match="never computed"):
        run(byz_env(), ScriptedStrategy(script), seed=0)


def test_capacity_is_per_tick_actor_count():
    inp1 = VdfInput(frozenset(), b"c1")
    inp2 = VdfInput(frozenset(), b"c2")
    two_actors = {0: [ByzGet(0, "b0", inp1), ByzGet(0, "b1", inp2)]}
    with pytest.raises(IllegalStrategyAction, match="exceed capacity"):
        run(byz_env(), ScriptedStrategy(two_actors), seed=0)
    # the same slot may act more than once in a tick (send after get), but a
    # second oracle call in the tick is over the rate limit
    get_and_send = {0: [ByzGet(0, "b0", inp1), ByzGet(1, "b0", inp1),
                        ByzGet(2, "b0", inp1),
                        ByzSend(2, "b0", frozenset(), b"c1", ("*",))]}
    run(byz_env(), ScriptedStrategy(get_and_send), seed=0)
    double_get = {0: [ByzGet(0, "b0", inp1), ByzGet(0, "b0", inp2)]}
    with pytest.raises(IllegalStrategyAction, match="already called Get"):
        run(byz_env(), ScriptedStrategy(double_get), seed=0)


def test_action_placement_rules():
    inp = VdfInput(frozenset(), b"x")
    outside = {0: [ByzGet(7, "b0", inp)]}
    with pytest.raises(IllegalStrategyAction, match="outside its step"):
        run(byz_env(), ScriptedStrategy(outside), seed=0)
    shadow = {0: [ByzGet(0, "p", inp)]}
    with pytest.raises(IllegalStrategyAction, match="shadows a correct node"):
        run(byz_env(), ScriptedStrategy(shadow), seed=0)
    junk = {0: ["not an action"]}
    with pytest.raises(IllegalStrategyAction, match="unknown action"):
        run(byz_env(), ScriptedStrategy(junk), seed=0)


def test_fuzz_run_respects_budget_law():
    trace = run(byz_env(max_steps=30), FuzzStrategy(seed=9), seed=9)
    per_step = {}
    per_tick = {}
    for ev in trace.events_of_kind("GetCall"):
        if ev.data["role"] != "byz":
            continue
        per_step[ev.data["step"]] = per_step.get(ev.data["step"], 0) + 1
        per_tick[ev.tick] = per_tick.get(ev.tick, 0) + 1
    assert per_step, "fuzz never exercised the oracle"
    assert all(c <= 3 for c in per_step.values())  # k * capacity
    assert all(c <= 1 for c in per_tick.values())  # capacity slots, one each


def test_same_seed_same_trace_under_fuzz():
    a = run(byz_env(max_steps=12), FuzzStrategy(seed=3), seed=3)
    b = run(byz_env(max_steps=12), FuzzStrategy(seed=3), seed=3)
    assert a.events == b.events
    assert a.store.ids_in_order() == b.store.ids_in_order()
    c = run(byz_env(max_steps=12), FuzzStrategy(seed=4), seed=4)
    assert c.events != a.events


def test_peek_pledge_audited_at_step_end():
    inp = VdfInput(frozenset(), b"pledged")
    kept = {0: [ByzPeek(0, "b0", inp, 2), ByzGet(0, "b0", inp),
                ByzGet(1, "b0", inp), ByzGet(2, "b0", inp)]}
    trace = run(byz_env(), ScriptedStrategy(kept), seed=0, model="gm+")
    assert [ev.kind for ev in trace.events_of_kind("PeekCall")] == ["PeekCall"]
    broken = {0: [ByzPeek(0, "b0", inp, 2)]}
    with pytest.raises(IllegalStrategyAction, match="pledge broken"):
        run(byz_env(), ScriptedStrategy(broken), seed=0, model="gm+")


def test_peek_denied_in_plain_model():
    inp = VdfInput(frozenset(), b"nope")
    script = {0: [ByzPeek(0, "b0", inp, 2)]}
    with pytest.raises(IllegalStrategyAction):
        run(byz_env(), ScriptedStrategy(script), seed=0, model="gm")


class OneShotScheduler(SchedulerStrategy):
    """Applies a fixed plan at one step, the empty plan elsewhere."""

    def __init__(self, at_step, plan, **params):
        super().__init__(**params)
        self.at_step = at_step
        self.plan = plan

    def plan_step(self, view):
        return self.plan if view.step == self.at_step else SMPlan()


class SilentScheduler(SchedulerStrategy):
    """Routes nothing at all, ever."""

    def plan_step(self, view):
        return SMPlan()


def sm_env(cap, correct=None, max_steps=6):
    correct = correct or 1 + cap
    n = correct + cap
    specs = tuple(CorrectNodeSpec("p%d" % i, "ab"[i % 2])
                  for i in range(correct))
    return Environment(k=3, n=n, max_steps=max_steps, correct=specs,
                       capacity=(cap,))


def test_defective_instances_are_one_shot():
    trace = run_smplus(sm_env(cap=1), SilentScheduler(), seed=2)
    for step in range(6):
        slot = "d%d.0" % step
        evs = [ev for ev in trace.events
               if ev.data.get("node") == slot]
        assert [ev.kind for ev in evs] == ["Join", "Broadcast", "Leave"]
        assert all(ev.data["step"] == step for ev in evs)
        assert all(ev.data["role"] == "defective" for ev in evs)
    # with a silent scheduler nothing defective ever reaches a good node
    for ev in trace.events_of_kind("Receive"):
        if ev.data["role"] == "correct":
            assert ev.data["via"] in ("sync", "catchup")


def test_default_scheduler_syncs_defective_traffic():
    """The default routing is the fully synchronous image: defective sends
    reach every good node and every next-step defective inbox."""
    trace = run_smplus(sm_env(cap=1, max_steps=4), seed=2)
    step1 = [ev for ev in trace.events_of_kind("Receive")
             if ev.data["step"] == 1 and ev.data["sender"] == "d0.0"]
    assert {ev.data["node"] for ev in step1} == {"p0", "p1", "d1.0"}


def test_good_sync_is_automatic():
    trace = run_smplus(sm_env(cap=0, correct=2, max_steps=5), seed=0)
    syncs = [ev for ev in trace.events_of_kind("Receive")
             if ev.data["via"] == "sync"]
    # every step after the first, each of the two nodes receives both
    # previous-step broadcasts
    assert len(syncs) == 4 * 2 * 2


def test_scheduled_delivery_of_defective_traffic():
    class Replayer(SchedulerStrategy):
        def plan_step(self, view):
            plan = SMPlan()
            for mid, sender, role, g in view.pool:
                if role == "defective" and g == view.step - 1:
                    plan.to_good.append((mid, view.active_good[0]))
            return plan

    trace = run_smplus(sm_env(cap=1), Replayer(), seed=3)
    scheduled = [ev for ev in trace.events_of_kind("Receive")
                 if ev.data["via"] == "scheduled"]
    assert scheduled
    assert all(ev.data["sender"].startswith("d") for ev in scheduled)
    assert all(ev.data["node"] == "p0" for ev in scheduled)


def test_scheduler_cannot_route_unknown_messages():
    sched = OneShotScheduler(0, SMPlan(to_good=[(b"garbage", "p0")]))
    with pytest.raises(IllegalStrategyAction, match="unknown message"):
        run_smplus(sm_env(cap=1), sched, seed=0)


def test_same_step_feed_chain_rules():
    # one hop is legal: the fed message's coffer holds only past traffic
    one_hop = OneShotScheduler(1, SMPlan(same_step_feeds=[(0, 1)]))
    trace = run_smplus(sm_env(cap=2), one_hop, seed=0)
    fed = [ev for ev in trace.events_of_kind("Receive")
           if ev.data["via"] == "same-step"]
    assert len(fed) == 1
    assert fed[0].data["node"] == "d1.1"
    carried = trace.store.get(fed[0].data["msg"])
    assert carried.sender == "d1.0"
    # the consumer's own broadcast now embeds the same-step message
    d11 = [ev for ev in trace.events_of_kind("Broadcast")
           if ev.data["node"] == "d1.1"]
    assert fed[0].data["msg"] in trace.store.get(d11[0].data["msg"]).coffer

    # a second hop would relay a coffer holding same-step traffic
    two_hops = OneShotScheduler(1, SMPlan(same_step_feeds=[(0, 1), (1, 2)]))
    with pytest.raises(IllegalStrategyAction, match="same-step coffer"):
        run_smplus(sm_env(cap=3), two_hops, seed=0)

    cycle = OneShotScheduler(1, SMPlan(same_step_feeds=[(0, 1), (1, 0)]))
    with pytest.raises(IllegalStrategyAction, match="cycle"):
        run_smplus(sm_env(cap=2), cycle, seed=0)

    out_of_range = OneShotScheduler(1, SMPlan(same_step_feeds=[(0, 5)]))
    with pytest.raises(IllegalStrategyAction, match="beyond capacity"):
        run_smplus(sm_env(cap=2), out_of_range, seed=0)


def test_builtin_schedulers_stay_legal():
    for sched_cls in (SameStepScheduler, FuzzScheduler):
        for seed in range(4):
            trace = run_smplus(sm_env(cap=2, max_steps=10),
                               sched_cls(seed=seed) if sched_cls is FuzzScheduler
                               else sched_cls(), seed=seed)
            assert trace.meta["stopped_at_step"] == 9


def test_smplus_reproducible():
    a = run_smplus(sm_env(cap=2, max_steps=10), FuzzScheduler(seed=1), seed=1)
    b = run_smplus(sm_env(cap=2, max_steps=10), FuzzScheduler(seed=1), seed=1)
    assert a.events == b.events
    assert a.final_states == b.final_states
