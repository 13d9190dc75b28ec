"""Virtual-time execution of capture-enabled inference runs.

Four modes share one schedule and one content keying, so their outputs
and timings are directly comparable:

* no-capture: compute only; the baseline every overhead figure is
  measured against.
* synchronous-offload: each hook firing blocks the step for a full
  device-to-host transfer of its bytes.
* callback-style: synchronous-offload plus a fixed host overhead per
  firing, modeling a host-callback observer.
* ring2: captures land in the ring as device-side copies and the export
  pipeline drains them concurrently, driven by the same virtual clock.

The ring2 run wires the library pieces together as event processes: an
inference process (plan, compute, capture), a drain worker, a staging
worker, and a sink worker, with bounded queues and signal-based
backpressure between them. Run time is counted at inference completion;
the trailing flush that empties the pipeline afterwards is reported
separately as export_done_time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError, MetaRingFull, PayloadRingFull
from .events import EventLoop, Signal, Timeout, Wait, WaitAny
from .exporter import STAGE_QUEUE_SLOTS, DrainConfig, ExportPipeline
from .hooks import (DeviceCopyEngine, HookRegistry, TensorView, capture,
                    install_hooks)
from .oracle import firing_records
from .policy import PolicyConfig, estimate_step_bytes, prepare_step
from .records import CaptureRecord, TensorMetaFIFO
from .rings import RingConfig, RingPair, round_up_to_copy_unit
from .workload import (RankTopology, WorkloadSpec, batch_payload,
                       build_requests, build_schedule)

NO_CAPTURE = "no-capture"
SYNC_OFFLOAD = "synchronous-offload"
CALLBACK = "callback-style"
RING2 = "ring2"
MODES = (NO_CAPTURE, SYNC_OFFLOAD, CALLBACK, RING2)

CALLBACK_HOOK_OVERHEAD = 50e-6

DEFAULT_RING = RingConfig(payload_capacity=32 << 20, meta_slots=1024)


@dataclass(frozen=True)
class MetricsReport:
    """Timing and volume accounting for one run."""

    mode: str
    seed: int
    step_wall_times: tuple[float, ...]
    step_stall_times: tuple[float, ...]
    step_dropped: tuple[int, ...]
    step_export_bytes: tuple[int, ...]   # bytes each step handed to export
    run_time: float                 # inference completion
    export_done_time: float         # pipeline fully drained and sunk
    baseline_time: float            # compute-only time, same schedule
    overhead_pct: float
    stall_time: float
    stall_events: int
    first_stall_step: int | None
    dropped_request_steps: int
    exported_bytes: int             # bytes that actually reached the sink
    record_count: int
    sink_failures: int = 0


@dataclass
class RunResult:
    metrics: MetricsReport
    records: list[CaptureRecord]
    keep_log: dict[int, tuple[int, ...]]
    drain_events: list = field(default_factory=list)


class _CollectingSink:
    """Tees successfully-sunk records into memory for verification."""

    def __init__(self, inner=None) -> None:
        self.inner = inner
        self.records: list[CaptureRecord] = []

    def write(self, records: list[CaptureRecord]) -> None:
        if self.inner is not None:
            self.inner.write(records)   # a failure here skips the collect
        self.records.extend(records)


@dataclass
class _RunState:
    stall_time: float = 0.0
    stall_events: int = 0
    first_stall_step: int | None = None
    dropped: int = 0
    flushing: bool = False
    stopping: bool = False

    def account_stall(self, dt: float, step_seq: int) -> None:
        if dt <= 0:
            return
        self.stall_time += dt
        self.stall_events += 1
        if self.first_stall_step is None:
            self.first_stall_step = step_seq


def total_capture_bytes(schedule, registry: HookRegistry) -> int:
    """Exact bytes all enabled hooks generate over the whole schedule."""
    return sum(sum(estimate_step_bytes(registry, step.batch))
               for step in schedule)


def generation_ratio(schedule, registry: HookRegistry,
                     engine: DeviceCopyEngine) -> float:
    """Capture generation rate over export bandwidth; >1 is overload."""
    compute = sum(s.compute_time for s in schedule)
    return total_capture_bytes(schedule, registry) / (
        compute * engine.d2h_bandwidth)


def engine_for_ratio(ratio: float, schedule, registry: HookRegistry,
                     base: DeviceCopyEngine | None = None) -> DeviceCopyEngine:
    """An engine whose d2h bandwidth puts the run at the given ratio."""
    if ratio <= 0:
        raise ConfigError("generation/bandwidth ratio must be positive")
    base = base if base is not None else DeviceCopyEngine()
    compute = sum(s.compute_time for s in schedule)
    nbytes = total_capture_bytes(schedule, registry)
    if nbytes == 0:
        return base
    return replace(base, d2h_bandwidth=nbytes / (compute * ratio))


def run_offline(workload: WorkloadSpec, hook_specs, policy: PolicyConfig,
                *, mode: str = RING2, seed: int = 0,
                drain: DrainConfig | None = None,
                engine: DeviceCopyEngine | None = None,
                ring: RingConfig | None = None,
                sink=None, hook_filter=None) -> RunResult:
    """Single-rank run of one workload under one mode."""
    registry = install_hooks(workload.model, hook_specs)
    if hook_filter is not None:
        registry.set_hook_filter(hook_filter)
        registry.commit_filter()
    schedule = build_schedule(workload, build_requests(workload, seed))
    return _run_rank(schedule, registry, policy,
                     drain or DrainConfig(),
                     engine or DeviceCopyEngine(),
                     ring or DEFAULT_RING,
                     mode, seed, sink, rank_coords=(0, 0), tp_degree=1)


def run_multirank(workload: WorkloadSpec, topology: RankTopology,
                  hook_specs, policy: PolicyConfig, *,
                  mode: str = RING2, seed: int = 0,
                  drain: DrainConfig | None = None,
                  engine: DeviceCopyEngine | None = None,
                  ring: RingConfig | None = None,
                  sinks: dict | None = None,
                  ) -> dict[tuple[int, int], RunResult]:
    """One independent ring/exporter/policy instance per rank.

    Ranks share the schedule and seed; no observation traffic crosses
    ranks. Per-layer hooks live on their owning pipeline stage and
    whole-model hooks on the last stage; tensor-parallel ranks capture
    their shard of the hidden axis.
    """
    topology.validate_model(workload.model)
    schedule = build_schedule(workload, build_requests(workload, seed))
    last_stage = topology.pp_stages - 1
    results: dict[tuple[int, int], RunResult] = {}
    for coords in topology.coords:
        tp_rank, pp_stage = coords
        registry = install_hooks(
            workload.model, hook_specs,
            layers=topology.stage_layers(workload.model, pp_stage),
            hidden_extent=topology.shard_width(workload.model),
            include_globals=pp_stage == last_stage)
        sink = sinks.get(coords) if sinks else None
        results[coords] = _run_rank(
            schedule, registry, policy,
            drain or DrainConfig(),
            engine or DeviceCopyEngine(),
            ring or DEFAULT_RING,
            mode, seed, sink, rank_coords=coords,
            tp_degree=topology.tp_degree)
    return results


def _run_rank(schedule, registry, policy, drain, engine, ring_config,
              mode, seed, sink, rank_coords, tp_degree) -> RunResult:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    baseline = sum(s.compute_time for s in schedule)
    if mode == NO_CAPTURE:
        walls = tuple(s.compute_time for s in schedule)
        zeros = (0,) * len(schedule)
        metrics = MetricsReport(
            mode=mode, seed=seed, step_wall_times=walls,
            step_stall_times=(0.0,) * len(schedule),
            step_dropped=zeros, step_export_bytes=zeros,
            run_time=baseline, export_done_time=baseline,
            baseline_time=baseline, overhead_pct=0.0,
            stall_time=0.0, stall_events=0, first_stall_step=None,
            dropped_request_steps=0, exported_bytes=0, record_count=0)
        return RunResult(metrics, [], {s.step_seq: tuple(
            r.request_id for r in s.batch) for s in schedule})
    if mode in (SYNC_OFFLOAD, CALLBACK):
        return _run_blocking(schedule, registry, engine, mode, seed, sink,
                             rank_coords, tp_degree, baseline)
    return _run_ring2(schedule, registry, policy, drain, engine,
                      ring_config, seed, sink, rank_coords, tp_degree,
                      baseline)


def _run_blocking(schedule, registry, engine, mode, seed, sink,
                  rank_coords, tp_degree, baseline) -> RunResult:
    """Sequential reference modes: every transfer blocks the step."""
    collect = _CollectingSink(sink)
    now = 0.0
    walls = []
    step_bytes = []
    exported = 0
    failures = 0
    keep_log = {}
    for step in schedule:
        start = now
        now += step.compute_time
        mine = 0
        for hook_id in registry.enabled_ids():
            nbytes = registry.slice_bytes(hook_id, step.tokens) \
                * len(step.batch)
            now += engine.d2h_time(nbytes)
            if mode == CALLBACK:
                now += CALLBACK_HOOK_OVERHEAD
            records = firing_records(seed, registry, hook_id, step.batch,
                                     step.step_seq, step.tokens,
                                     rank_coords, tp_degree)
            try:
                collect.write(records)
            except Exception:
                failures += 1
            else:
                exported += nbytes
                mine += nbytes
        walls.append(now - start)
        step_bytes.append(mine)
        keep_log[step.step_seq] = tuple(r.request_id for r in step.batch)
    metrics = MetricsReport(
        mode=mode, seed=seed, step_wall_times=tuple(walls),
        step_stall_times=tuple(w - s.compute_time
                               for w, s in zip(walls, schedule)),
        step_dropped=(0,) * len(schedule),
        step_export_bytes=tuple(step_bytes),
        run_time=now, export_done_time=now, baseline_time=baseline,
        overhead_pct=(now - baseline) / baseline * 100.0,
        stall_time=now - baseline, stall_events=0, first_stall_step=None,
        dropped_request_steps=0, exported_bytes=exported,
        record_count=len(collect.records), sink_failures=failures)
    return RunResult(metrics, collect.records, keep_log)


def _run_ring2(schedule, registry, policy, drain, engine, ring_config,
               seed, sink, rank_coords, tp_degree, baseline) -> RunResult:
    loop = EventLoop()
    ring = RingPair(ring_config)
    fifo = TensorMetaFIFO()
    pipe = ExportPipeline(ring, drain, engine, fifo,
                          hook_name_of=lambda h: registry.hook(h).name)
    collect = _CollectingSink(sink)
    tp_rank = rank_coords[0]
    hidden_full = registry.hidden_extent * tp_degree

    published = Signal("published")
    space_freed = Signal("space-freed")
    staging_freed = Signal("staging-freed")
    stage_enq, stage_deq = Signal("stage-enq"), Signal("stage-deq")
    sink_enq, sink_deq = Signal("sink-enq"), Signal("sink-deq")
    progress = Signal("progress")
    kick = Signal("kick")

    stage_queue: list = []
    sink_queue: list = []
    state = _RunState()
    keep_log: dict[int, tuple[int, ...]] = {}
    walls: list[float] = []
    step_stalls: list[float] = []
    step_drops: list[int] = []
    step_bytes: list[int] = []
    times = {"run": 0.0, "export_done": 0.0}

    def pipeline_empty() -> bool:
        return (ring.occupancy == 0 and ring.ready_entries() == 0
                and pipe.batches_drained == pipe.batches_sunk
                and len(fifo) == 0)

    def drain_worker():
        while True:
            want = (pipe.thresholds_met(loop.now) is not None
                    or (state.flushing and ring.ready_entries() > 0))
            if want:
                if pipe.pool.available == 0:
                    yield Wait(staging_freed)
                    continue
                batch = pipe.drain_once(loop.now, flush=state.flushing)
                if batch.empty:
                    continue
                yield Timeout(batch.transfer_time)
                pipe.complete_transfer(batch)
                space_freed.fire()
                progress.fire()
                while len(stage_queue) >= STAGE_QUEUE_SLOTS:
                    yield Wait(stage_deq)
                stage_queue.append(batch)
                stage_enq.fire()
                continue
            if state.stopping:
                return
            age = pipe.oldest_pending_age(loop.now)
            if ring.ready_entries() > 0 and age is not None:
                yield WaitAny((published, kick),
                              timeout=max(drain.max_wait - age, 0.0))
            else:
                yield WaitAny((published, kick))

    def stage_worker():
        while True:
            while not stage_queue:
                if state.stopping:
                    return
                yield WaitAny((stage_enq, kick))
            batch = stage_queue.pop(0)
            yield Timeout(engine.host_time(batch.bytes_total))
            paged = pipe.stage_to_pageable(batch, loop.now)
            staging_freed.fire()
            stage_deq.fire()
            while len(sink_queue) >= STAGE_QUEUE_SLOTS:
                yield Wait(sink_deq)
            sink_queue.append(paged)
            sink_enq.fire()

    def sink_worker():
        while True:
            while not sink_queue:
                if state.stopping:
                    return
                yield WaitAny((sink_enq, kick))
            paged = sink_queue.pop(0)
            nbytes = sum(len(p) for _, p in paged.items)
            yield Timeout(engine.host_time(nbytes))
            pipe.sink_batch(paged, collect, loop.now)
            sink_deq.fire()
            progress.fire()

    def stall_until_ring_empty(step_seq):
        start = loop.now
        state.flushing = True
        kick.fire()
        while ring.occupancy > 0:
            yield Wait(progress)
        state.flushing = False
        state.account_stall(loop.now - start, step_seq)

    def capture_one(hook_id, step, plan):
        hook = registry.hook(hook_id)
        slice_bytes = registry.slice_bytes(hook_id, step.tokens)
        needed = round_up_to_copy_unit(slice_bytes * len(plan.kept_ids))
        if needed > ring.capacity:
            raise ConfigError(
                f"hook {hook.name!r} needs {needed} bytes in one capture, "
                f"ring holds {ring.capacity}")
        buf = batch_payload(seed, hook, step.batch, step.step_seq,
                            step.tokens, hidden_full, tp_rank, tp_degree)
        view = TensorView(
            data=buf,
            shape=(len(step.batch),
                   *hook.resolve_shape(step.tokens, registry.hidden_extent)),
            dtype=hook.dtype)
        while True:
            try:
                outcome, desc = capture(
                    registry, ring, hook_id, view, plan.keep, engine,
                    step_seq=step.step_seq, defer_publish=True)
                break
            except (PayloadRingFull, MetaRingFull):
                start = loop.now
                yield Wait(space_freed)
                state.account_stall(loop.now - start, step.step_seq)
        yield Timeout(outcome.copy_time)
        if desc is not None:
            ring.publish(desc)
            pipe.note_publish(loop.now)
            published.fire()

    def inference():
        for step in schedule:
            start = loop.now
            stall_before = state.stall_time
            registry.commit_filter()
            plan = prepare_step(policy, step.batch, ring, registry,
                                step_seq=step.step_seq,
                                rank_coords=rank_coords)
            keep_log[step.step_seq] = plan.kept_ids
            state.dropped += len(plan.dropped_ids)
            step_drops.append(len(plan.dropped_ids))
            step_bytes.append(sum(m.expected_payload_len
                                  for m in plan.fifo_entries))
            if plan.flush_before:
                yield from stall_until_ring_empty(step.step_seq)
            fifo.extend(plan.fifo_entries)
            yield Timeout(step.compute_time)
            if plan.kept_ids:
                for hook_id in registry.enabled_ids():
                    yield from capture_one(hook_id, step, plan)
            walls.append(loop.now - start)
            step_stalls.append(state.stall_time - stall_before)
        times["run"] = loop.now
        state.flushing = True
        kick.fire()
        while not pipeline_empty():
            yield Wait(progress)
        times["export_done"] = loop.now
        state.stopping = True
        kick.fire()

    main = loop.spawn(inference(), "inference")
    loop.spawn(drain_worker(), "drain")
    loop.spawn(stage_worker(), "stage")
    loop.spawn(sink_worker(), "sink")
    loop.run()
    if not main.done:
        raise ConfigError(
            f"run deadlocked at t={loop.now}: ring occupancy "
            f"{ring.occupancy}, ready {ring.ready_entries()}, "
            f"staging free {pipe.pool.available}")

    metrics = MetricsReport(
        mode=RING2, seed=seed, step_wall_times=tuple(walls),
        step_stall_times=tuple(step_stalls),
        step_dropped=tuple(step_drops),
        step_export_bytes=tuple(step_bytes),
        run_time=times["run"], export_done_time=times["export_done"],
        baseline_time=baseline,
        overhead_pct=(times["run"] - baseline) / baseline * 100.0,
        stall_time=state.stall_time, stall_events=state.stall_events,
        first_stall_step=state.first_stall_step,
        dropped_request_steps=state.dropped,
        exported_bytes=pipe.bytes_out, record_count=pipe.records_out,
        sink_failures=pipe.sink_failures)
    return RunResult(metrics, collect.records, keep_log, pipe.events)
