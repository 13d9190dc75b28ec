"""Scheduler ordering, signal semantics, and determinism."""

import random

import pytest

from tapflow.errors import ConfigError
from tapflow.events import EventLoop, Signal, Timeout, Wait, WaitAny


def test_timeouts_resume_in_time_order():
    loop = EventLoop()
    trace = []

    def proc(name, delays):
        for d in delays:
            yield Timeout(d)
            trace.append((loop.now, name))

    loop.spawn(proc("a", [3.0, 1.0]), "a")
    loop.spawn(proc("b", [1.0, 1.0]), "b")
    loop.run()
    assert trace == [(1.0, "b"), (2.0, "b"), (3.0, "a"), (4.0, "a")]


def test_equal_times_break_ties_by_schedule_order():
    loop = EventLoop()
    trace = []

    def proc(name):
        yield Timeout(1.0)
        trace.append(name)

    for name in ["first", "second", "third"]:
        loop.spawn(proc(name), name)
    loop.run()
    assert trace == ["first", "second", "third"]


def test_signal_wakes_waiters_in_registration_order():
    loop = EventLoop()
    sig = Signal("go")
    trace = []

    def waiter(name):
        got = yield Wait(sig)
        trace.append((loop.now, name, got))

    def firer():
        yield Timeout(2.0)
        count = sig.fire("payload")
        trace.append((loop.now, "fired", count))

    loop.spawn(waiter("w1"), "w1")
    loop.spawn(waiter("w2"), "w2")
    loop.spawn(firer(), "f")
    loop.run()
    assert trace == [(2.0, "fired", 2), (2.0, "w1", "payload"),
                     (2.0, "w2", "payload")]


def test_fire_with_no_waiters_is_lost():
    loop = EventLoop()
    sig = Signal()

    def late_waiter():
        yield Timeout(1.0)
        yield Wait(sig)

    sig.fire()  # nobody registered yet
    task = loop.spawn(late_waiter(), "late")
    loop.run()
    assert not task.done  # the early fire left no memory
    assert loop.idle
    assert loop.pending_tasks() == [task]


def test_wait_any_first_firing_wins_and_disarms_the_rest():
    loop = EventLoop()
    a, b = Signal("a"), Signal("b")
    results = []

    def chooser():
        got = yield WaitAny((a, b))
        results.append((loop.now, got.name))
        # b fires later; the disarmed registration must not resume us again
        yield Timeout(10.0)
        results.append((loop.now, "alive"))

    def firer():
        yield Timeout(1.0)
        b.fire()
        yield Timeout(1.0)
        a.fire()

    loop.spawn(chooser(), "chooser")
    loop.spawn(firer(), "firer")
    loop.run()
    assert results == [(1.0, "b"), (11.0, "alive")]


def test_wait_any_timeout_returns_none():
    loop = EventLoop()
    sig = Signal()
    results = []

    def waiter():
        got = yield WaitAny((sig,), timeout=5.0)
        results.append((loop.now, got))

    loop.spawn(waiter(), "w")
    loop.run()
    assert results == [(5.0, None)]


def test_wait_any_signal_beats_later_timeout():
    loop = EventLoop()
    sig = Signal()
    results = []

    def waiter():
        got = yield WaitAny((sig,), timeout=5.0)
        results.append((loop.now, got))

    def firer():
        yield Timeout(2.0)
        sig.fire()

    loop.spawn(waiter(), "w")
    loop.spawn(firer(), "f")
    loop.run()
    assert results == [(2.0, sig)]
    assert loop.now == 5.0  # the dead timeout event still drains


def test_task_completion_fires_done_signal():
    loop = EventLoop()
    results = []

    def worker():
        yield Timeout(3.0)
        return 42

    def joiner(task):
        got = yield Wait(task.done_signal)
        results.append((loop.now, got, task.result))

    task = loop.spawn(worker(), "worker")
    loop.spawn(joiner(task), "joiner")
    loop.run()
    assert results == [(3.0, 42, 42)]
    assert task.done


def test_run_until_leaves_future_events_pending():
    loop = EventLoop()
    fired = []

    def proc():
        yield Timeout(10.0)
        fired.append(loop.now)

    loop.spawn(proc(), "p")
    assert loop.run(until=4.0) == 4.0
    assert fired == []
    assert not loop.idle
    assert loop.run() == 10.0
    assert fired == [10.0]


def test_bounded_queue_handoff():
    """Producer blocks on a full slot, consumer on an empty one."""
    loop = EventLoop()
    slot = []
    put_sig, get_sig = Signal("put"), Signal("get")
    trace = []

    def producer():
        for i in range(4):
            while len(slot) >= 1:
                yield Wait(get_sig)
            slot.append(i)
            put_sig.fire()
            trace.append((loop.now, "put", i))
            yield Timeout(1.0)

    def consumer():
        for _ in range(4):
            while not slot:
                yield Wait(put_sig)
            item = slot.pop(0)
            get_sig.fire()
            trace.append((loop.now, "got", item))
            yield Timeout(3.0)

    loop.spawn(producer(), "producer")
    loop.spawn(consumer(), "consumer")
    loop.run()
    got = [(t, item) for t, kind, item in trace if kind == "got"]
    assert got == [(0.0, 0), (3.0, 1), (6.0, 2), (9.0, 3)]


def test_invalid_yield_is_rejected():
    loop = EventLoop()

    def proc():
        yield "not a directive"

    loop.spawn(proc(), "bad")
    with pytest.raises(ConfigError):
        loop.run()


def test_directive_validation():
    with pytest.raises(ConfigError):
        Timeout(-1.0)
    with pytest.raises(ConfigError):
        WaitAny((), timeout=None)
    with pytest.raises(ConfigError):
        WaitAny((Signal(),), timeout=-2.0)


def test_process_exception_surfaces_with_task_marked():
    loop = EventLoop()

    def proc():
        yield Timeout(1.0)
        raise ValueError("boom")

    task = loop.spawn(proc(), "boom")
    with pytest.raises(ValueError):
        loop.run()
    assert task.done
    assert isinstance(task.error, ValueError)


def test_random_workload_is_deterministic():
    def run_once(seed):
        loop = EventLoop()
        rng = random.Random(seed)
        signals = [Signal(f"s{i}") for i in range(4)]
        trace = []

        def proc(name):
            for _ in range(20):
                roll = rng.random()
                if roll < 0.5:
                    yield Timeout(rng.choice([0.0, 0.5, 1.0]))
                    trace.append((loop.now, name, "t"))
                elif roll < 0.8:
                    got = yield WaitAny((rng.choice(signals),), timeout=2.0)
                    trace.append((loop.now, name,
                                  got.name if got else "timeout"))
                else:
                    sig = rng.choice(signals)
                    sig.fire()
                    trace.append((loop.now, name, f"fire:{sig.name}"))
                    yield Timeout(0.25)

        for i in range(3):
            loop.spawn(proc(f"p{i}"), f"p{i}")
        loop.run()
        return trace

    assert run_once(7) == run_once(7)
    assert run_once(7) != run_once(8)
