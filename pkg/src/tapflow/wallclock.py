"""Wall-clock smoke runner: the ring protocol under real threads.

The virtual-time simulator proves timing behaviour; this module exercises
the same data-structure contracts with genuine concurrency. One producer
thread captures per the schedule while drain, staging, and sink threads
pump the export pipeline. A single coarse lock plus condition variable
guards the ring, FIFO, and staging pool; bounded queues hand batches
between stages. Transfers complete immediately (no simulated waits), so a
run takes milliseconds and the result can be checked against the oracle.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

from .errors import ConfigError, MetaMismatch, MetaRingFull, PayloadRingFull
from .exporter import STAGE_QUEUE_SLOTS, DrainConfig, ExportPipeline
from .hooks import DeviceCopyEngine, TensorView, capture, install_hooks
from .policy import prepare_step
from .records import CaptureRecord, TensorMetaFIFO
from .rings import RingConfig, RingPair
from .simulator import DEFAULT_RING
from .sinks import NullSink
from .workload import WorkloadSpec, batch_payload, build_requests, \
    build_schedule

_JOIN_TIMEOUT = 30.0


@dataclass
class ThreadedRunResult:
    records: list[CaptureRecord] = field(default_factory=list)
    keep_log: dict[int, tuple[int, ...]] = field(default_factory=dict)
    drops: int = 0
    errors: list[BaseException] = field(default_factory=list)


class _Collecting:
    def __init__(self, inner) -> None:
        self.inner = inner
        self.records: list[CaptureRecord] = []

    def write(self, records) -> None:
        self.inner.write(records)
        self.records.extend(records)


def run_threaded(workload: WorkloadSpec, hook_specs, policy, *,
                 seed: int = 0,
                 drain: DrainConfig | None = None,
                 engine: DeviceCopyEngine | None = None,
                 ring: RingConfig | None = None,
                 sink=None) -> ThreadedRunResult:
    """Run one capture schedule with real producer/exporter threads."""
    drain = drain or DrainConfig()
    engine = engine or DeviceCopyEngine()
    ring_pair = RingPair(ring or DEFAULT_RING)
    registry = install_hooks(workload.model, hook_specs)
    registry.commit_filter()
    schedule = build_schedule(workload, build_requests(workload, seed))
    fifo = TensorMetaFIFO()
    pipe = ExportPipeline(ring_pair, drain, engine, fifo,
                          hook_name_of=lambda h: registry.hook(h).name)
    collect = _Collecting(sink or NullSink())
    result = ThreadedRunResult()

    lock = threading.Lock()
    cond = threading.Condition(lock)
    stage_q: queue.Queue = queue.Queue(maxsize=STAGE_QUEUE_SLOTS)
    sink_q: queue.Queue = queue.Queue(maxsize=STAGE_QUEUE_SLOTS)
    state = {"producer_done": False, "flush_wanted": False}
    t0 = time.monotonic()

    def clock() -> float:
        return time.monotonic() - t0

    def guard(fn):
        """Record the first error and unblock every thread."""
        def wrapped():
            try:
                fn()
            except BaseException as exc:  # noqa: BLE001 - smoke harness
                with cond:
                    result.errors.append(exc)
                    state["producer_done"] = True
                    cond.notify_all()
                stage_q.put(None)
                sink_q.put(None)
        return wrapped

    def produce() -> None:
        for step in schedule:
            with cond:
                plan = prepare_step(policy, step.batch, ring_pair, registry,
                                    step_seq=step.step_seq)
                result.keep_log[step.step_seq] = plan.kept_ids
                result.drops += len(plan.dropped_ids)
                if plan.flush_before:
                    state["flush_wanted"] = True
                    cond.notify_all()
                    while ring_pair.occupancy > 0 and not result.errors:
                        cond.wait(0.005)
                    state["flush_wanted"] = False
                fifo.extend(plan.fifo_entries)
            if not plan.kept_ids:
                continue
            for hook_id in registry.enabled_ids():
                hook = registry.hook(hook_id)
                buf = batch_payload(seed, hook, step.batch, step.step_seq,
                                    step.tokens, registry.hidden_extent)
                view = TensorView(
                    data=buf,
                    shape=(len(step.batch), *hook.resolve_shape(
                        step.tokens, registry.hidden_extent)),
                    dtype=hook.dtype)
                while True:
                    with cond:
                        if result.errors:
                            return
                        try:
                            capture(registry, ring_pair, hook_id, view,
                                    plan.keep, engine,
                                    step_seq=step.step_seq)
                            pipe.note_publish(clock())
                            cond.notify_all()
                            break
                        except (PayloadRingFull, MetaRingFull):
                            cond.wait(0.005)
        with cond:
            state["producer_done"] = True
            cond.notify_all()

    def drain_loop() -> None:
        while True:
            with cond:
                while True:
                    if result.errors:
                        batch = None
                        break
                    ready = ring_pair.ready_entries()
                    if state["producer_done"] and ready == 0:
                        batch = None
                        break
                    force = state["producer_done"] or state["flush_wanted"]
                    if ready > 0 and (force or pipe.thresholds_met(clock())):
                        if pipe.pool.available == 0:
                            cond.wait(0.005)
                            continue
                        batch = pipe.drain_once(clock(), flush=force)
                        pipe.complete_transfer(batch)
                        cond.notify_all()
                        break
                    cond.wait(0.002)
            if batch is None or batch.empty:
                if batch is None:
                    stage_q.put(None)
                    return
                continue
            stage_q.put(batch)

    def stage_loop() -> None:
        while True:
            batch = stage_q.get()
            if batch is None:
                sink_q.put(None)
                return
            with cond:
                paged = pipe.stage_to_pageable(batch, clock())
                cond.notify_all()
            sink_q.put(paged)

    def sink_loop() -> None:
        while True:
            paged = sink_q.get()
            if paged is None:
                return
            with cond:
                pipe.sink_batch(paged, collect, clock())

    threads = [threading.Thread(target=guard(fn), name=name, daemon=True)
               for name, fn in (("producer", produce),
                                ("drain", drain_loop),
                                ("stage", stage_loop),
                                ("sink", sink_loop))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(_JOIN_TIMEOUT)
        if t.is_alive():
            raise ConfigError(f"thread {t.name} did not finish within "
                              f"{_JOIN_TIMEOUT}s")

    if result.errors:
        raise result.errors[0]
    if ring_pair.occupancy or len(fifo):
        raise MetaMismatch(
            f"run left {ring_pair.occupancy} bytes and {len(fifo)} FIFO "
            "entries behind")
    result.records = collect.records
    return result
