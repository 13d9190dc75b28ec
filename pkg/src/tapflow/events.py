"""Deterministic discrete-event scheduler for virtual-time simulation.

Processes are plain generators that yield scheduling directives:

    yield Timeout(dt)                  resume dt virtual seconds later
    yield Wait(signal)                 resume when the signal next fires
    yield WaitAny(signals, timeout)    resume on the first firing, or
                                       after the timeout if none fires

``Wait`` resumes with the payload passed to ``Signal.fire``; ``WaitAny``
resumes with the signal that fired, or None on timeout. Events at equal
times run in scheduling order, so runs reproduce bit-for-bit. Signals
have no memory: a fire wakes exactly the waiters registered at that
moment and is otherwise lost. Processes interleave only at yield points,
so a check-then-wait sequence cannot miss a wakeup in between.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .errors import ConfigError


class Signal:
    """Broadcast wakeup channel with no memory."""

    __slots__ = ("name", "_waiters", "fires")

    def __init__(self, name: str = "") -> None:
        self.name = name
        self._waiters: list = []
        self.fires = 0

    def fire(self, payload=None) -> int:
        """Wake all currently-registered waiters; returns how many."""
        self.fires += 1
        waiters, self._waiters = self._waiters, []
        for resume in waiters:
            resume(self, payload)
        return len(waiters)

    def _register(self, resume) -> None:
        self._waiters.append(resume)

    def __repr__(self) -> str:
        return f"Signal({self.name!r}, waiters={len(self._waiters)})"


@dataclass(frozen=True)
class Timeout:
    delay: float

    def __post_init__(self) -> None:
        if self.delay < 0:
            raise ConfigError("timeout delay must be non-negative")


@dataclass(frozen=True)
class Wait:
    signal: Signal


@dataclass(frozen=True)
class WaitAny:
    signals: tuple[Signal, ...]
    timeout: float | None = None

    def __post_init__(self) -> None:
        if not self.signals and self.timeout is None:
            raise ConfigError("WaitAny needs signals or a timeout")
        if self.timeout is not None and self.timeout < 0:
            raise ConfigError("WaitAny timeout must be non-negative")


class Task:
    """One running process; completion is observable via ``done_signal``."""

    __slots__ = ("name", "done", "result", "error", "done_signal", "_gen")

    def __init__(self, gen, name: str) -> None:
        self.name = name
        self.done = False
        self.result = None
        self.error: BaseException | None = None
        self.done_signal = Signal(f"{name}.done")
        self._gen = gen

    def __repr__(self) -> str:
        state = "done" if self.done else "running"
        return f"Task({self.name!r}, {state})"


class EventLoop:
    """Virtual-time scheduler; the only mutator of ``now``."""

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, object]] = []
        self._seq = 0
        self.tasks: list[Task] = []
        self.events_run = 0

    # -- scheduling ----------------------------------------------------------

    def call_at(self, time: float, fn) -> None:
        if time < self.now:
            raise ConfigError("cannot schedule into the past")
        heapq.heappush(self._heap, (time, self._seq, fn))
        self._seq += 1

    def call_later(self, delay: float, fn) -> None:
        self.call_at(self.now + delay, fn)

    def spawn(self, gen, name: str = "proc") -> Task:
        task = Task(gen, name)
        self.tasks.append(task)
        self.call_later(0.0, lambda: self._step(task, None))
        return task

    # -- process stepping ----------------------------------------------------

    def _step(self, task: Task, value) -> None:
        if task.done:
            return
        try:
            directive = task._gen.send(value)
        except StopIteration as stop:
            task.done = True
            task.result = stop.value
            task.done_signal.fire(stop.value)
            return
        except BaseException as exc:
            task.done = True
            task.error = exc
            raise
        self._dispatch(task, directive)

    def _dispatch(self, task: Task, directive) -> None:
        if isinstance(directive, Timeout):
            self.call_later(directive.delay, lambda: self._step(task, None))
        elif isinstance(directive, Wait):
            directive.signal._register(
                lambda sig, payload: self._resume_soon(task, payload))
        elif isinstance(directive, WaitAny):
            self._arm_wait_any(task, directive)
        else:
            raise ConfigError(
                f"process {task.name!r} yielded {directive!r}; expected "
                "Timeout, Wait, or WaitAny")

    def _resume_soon(self, task: Task, value) -> None:
        # Wakeups run as fresh events so a fire never nests process frames.
        self.call_later(0.0, lambda: self._step(task, value))

    def _arm_wait_any(self, task: Task, directive: WaitAny) -> None:
        state = {"armed": True}

        def resume_with(value):
            if not state["armed"]:
                return
            state["armed"] = False
            self._resume_soon(task, value)

        for signal in directive.signals:
            signal._register(lambda sig, payload: resume_with(sig))
        if directive.timeout is not None:
            self.call_later(directive.timeout, lambda: resume_with(None))

    # -- running -------------------------------------------------------------

    def run(self, until: float | None = None) -> float:
        """Drain events (up to ``until``); returns the final virtual time."""
        while self._heap:
            time, _, fn = self._heap[0]
            if until is not None and time > until:
                break
            heapq.heappop(self._heap)
            self.now = time
            self.events_run += 1
            fn()
        if until is not None and until > self.now:
            self.now = until
        return self.now

    @property
    def idle(self) -> bool:
        return not self._heap

    def pending_tasks(self) -> list[Task]:
        return [t for t in self.tasks if not t.done]
