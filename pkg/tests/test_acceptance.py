"""Acceptance gate: one test per shipped guarantee, with pinned tolerances.

Each test wraps its assertions in `criterion(...)`, which prints a single
PASS/FAIL line (run with ``pytest -s`` to see them live) and enforces the
wall-clock budget the guarantee is specified with.
"""

import contextlib
import csv
import hashlib
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from reference_models import ReferenceRing, reference_gather
from tapflow.cli import main as cli_main
from tapflow.errors import MetaRingFull, PayloadRingFull
from tapflow.exporter import DrainConfig, ExportPipeline
from tapflow.hooks import (DType, DeviceCopyEngine, HookSpec, ModelSpec,
                           TensorView, capture, install_hooks)
from tapflow.joins import join_records
from tapflow.oracle import compare_datasets, reference_records
from tapflow.policy import (BEST_EFFORT, COMPLETENESS, DROP_RECENT,
                            KEEP_BY_PATTERN, PolicyConfig, Predicate,
                            StepRequest, estimate_step_bytes, prepare_step)
from tapflow.records import TensorMeta, TensorMetaFIFO
from tapflow.rings import (Descriptor, RingConfig, RingPair, allocate_rings,
                           round_up_to_copy_unit)
from tapflow.simulator import (NO_CAPTURE, RING2, SYNC_OFFLOAD,
                               engine_for_ratio, run_multirank, run_offline)
from tapflow.sinks import NullSink
from tapflow.workload import (RankTopology, WorkloadSpec, build_requests,
                              build_schedule)

BF16 = DType.of("bf16")
F32 = DType.of("f32")
COMP = PolicyConfig(mode=COMPLETENESS)
BEST = PolicyConfig(mode=BEST_EFFORT, strategy=DROP_RECENT)


@contextlib.contextmanager
def criterion(tag: str, budget_s: float):
    start = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, (
            f"{tag}: {elapsed:.1f}s exceeds the {budget_s:.0f}s budget")
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        print(f"{'PASS' if ok else 'FAIL'} {tag} ({elapsed:.1f}s)")


def base_workload(**over) -> WorkloadSpec:
    base = dict(layers=4, hidden=64, batch=4, prefill_tokens=8,
                decode_steps=6, prefill_compute_time=2e-3,
                decode_compute_time=1e-3)
    base.update(over)
    return WorkloadSpec(**base)


def base_hooks() -> list[HookSpec]:
    return [
        HookSpec("resid", ("tokens", "hidden"), BF16, per_layer=True),
        HookSpec("final_ln", ("tokens", "hidden"), BF16),
        HookSpec("logits", ("tokens", 128), F32),
    ]


def ratio_engine(workload, specs, ratio, seed=0):
    registry = install_hooks(workload.model, specs)
    schedule = build_schedule(workload, build_requests(workload, seed))
    return engine_for_ratio(ratio, schedule, registry)


def reference_for(workload, specs, seed, keep_log=None):
    registry = install_hooks(workload.model, specs)
    schedule = build_schedule(workload, build_requests(workload, seed))
    return reference_records(seed, schedule, registry, keep_log=keep_log)


# -- 1: losslessness ---------------------------------------------------------

def test_criterion_01_losslessness_over_randomized_workloads():
    with criterion("1 losslessness on 200 randomized workloads", 60.0):
        rng = np.random.default_rng(20260815)
        menu = [
            lambda: HookSpec("resid", ("tokens", "hidden"), BF16,
                             per_layer=True),
            lambda: HookSpec("attn_out", ("tokens", "hidden"),
                             DType.of("f16"), per_layer=True),
            lambda: HookSpec("final_ln", ("tokens", "hidden"), F32),
            lambda: HookSpec("logits",
                             ("tokens", int(rng.choice([32, 64, 256]))), F32),
            lambda: HookSpec("router", ("tokens", 8), DType.of("u8")),
        ]
        for case in range(200):
            wl = WorkloadSpec(
                layers=int(rng.integers(1, 7)),
                hidden=int(rng.choice([32, 64, 128])),
                batch=int(rng.integers(1, 9)),
                prefill_tokens=int(rng.integers(1, 17)),
                decode_steps=int(rng.integers(1, 16)),
                prefill_compute_time=2e-3, decode_compute_time=1e-3)
            picks = rng.choice(len(menu), size=int(rng.integers(1, 4)),
                               replace=False)
            specs = [menu[i]() for i in sorted(picks)]
            largest = max(
                wl.prefill_tokens * 256 * 4,
                wl.prefill_tokens * wl.hidden * 4)
            assert largest <= 64 << 10  # stays within the stated slice bound
            ratio = float(rng.choice([0.5, 1.0, 2.0]))
            engine = ratio_engine(wl, specs, ratio, seed=case)
            result = run_offline(wl, specs, COMP, mode=RING2, seed=case,
                                 engine=engine)
            diff = compare_datasets(reference_for(wl, specs, case),
                                    result.records)
            assert diff.identical, f"case {case}: {diff.summary()}"
            assert result.metrics.dropped_request_steps == 0


# -- 2: ring protocol --------------------------------------------------------

def test_criterion_02_ring_protocol_against_reference_model():
    with criterion("2 ring protocol, 1e5 randomized operations", 30.0):
        rng = random.Random(42)
        capacity, meta_slots = 1024, 32
        ring = allocate_rings(RingConfig(capacity, meta_slots))
        ref = ReferenceRing(capacity, meta_slots)
        unpublished = []   # (offset, length) reserved, awaiting publish
        unreleased = []    # (offset, length) polled, awaiting release
        expected_occupancy = 0
        published = polled = 0
        ops = 0
        while ops < 100_000:
            op = rng.choice(("reserve", "reserve", "publish", "poll",
                             "release", "release"))
            if op == "reserve":
                length = 16 * rng.randint(1, 16)
                try:
                    offset = ring.reserve_payload(length)
                    got = (offset, ring.occupancy - expected_occupancy
                           - length)
                except PayloadRingFull:
                    got = None
                want = ref.reserve(length)
                if got is None:
                    assert want is None, (length, want)
                else:
                    assert want == got, (length, want, got)
                    unpublished.append((offset, length))
                    expected_occupancy += length + got[1]
            elif op == "publish" and unpublished \
                    and ring.free_meta_slots() > 0:
                offset, length = unpublished.pop(0)
                desc = Descriptor(payload_offset=offset, payload_len=length,
                                  hook_id=rng.randint(0, 2**31),
                                  step_seq=rng.randint(0, 2**31))
                seq = ring.publish(desc)
                assert seq == published
                assert ref.publish({"payload_offset": offset,
                                    "payload_len": length,
                                    "hook_id": desc.hook_id,
                                    "step_seq": desc.step_seq}) == seq
                published += 1
            elif op == "poll":
                k = rng.randint(1, 4)
                got = ring.poll_ready(k)
                want = ref.consume(k)
                assert len(got) == len(want)
                for g, w in zip(got, want):
                    # 64-byte descriptor round-trip is field-exact
                    assert (g.payload_offset, g.payload_len, g.hook_id,
                            g.step_seq, g.ready_seq) == (
                        w["payload_offset"], w["payload_len"], w["hook_id"],
                        w["step_seq"], w["ready_seq"])
                    assert g.ready_seq == polled  # strict publish order
                    polled += 1
                    unreleased.append((g.payload_offset, g.payload_len))
            elif op == "release" and unreleased:
                offset, length = unreleased.pop(0)
                freed = ring.occupancy
                ring.release_payload(offset, length)
                assert ref.release(offset, length)
                expected_occupancy -= freed - ring.occupancy
            else:
                continue
            ops += 1
            assert ring.occupancy == expected_occupancy  # conservation
            assert 0 <= ring.occupancy <= capacity
            assert ring.free_meta_slots() == \
                meta_slots - ref.in_flight_meta
            if ops % 997 == 0:
                assert ref.occupancy == ring.occupancy  # no byte overlap
        # sentinel discipline: a consumed slot is reusable, a full meta
        # ring rejects publication on both sides
        for offset, length in unreleased:
            ring.release_payload(offset, length)
            ref.release(offset, length)
        while ring.free_meta_slots() > 0:
            off = ring.reserve_payload(16)
            ref.reserve(16)
            ring.publish(Descriptor(off, 16, 0, 0))
            ref.publish({"payload_offset": off, "payload_len": 16,
                         "hook_id": 0, "step_seq": 0})
        extra = ring.reserve_payload(16)
        with pytest.raises(MetaRingFull):
            ring.publish(Descriptor(extra, 16, 0, 0))
        assert not ref.can_publish()
        (first,) = ring.poll_ready(1)
        ref.consume(1)
        ring.release_payload(first.payload_offset, first.payload_len)
        ref.release(first.payload_offset, first.payload_len)
        ring.publish(Descriptor(extra, 16, 0, 0))  # freed slot is reusable


# -- 3: gather-compact -------------------------------------------------------

def test_criterion_03_gather_compact_equals_brute_force():
    with criterion("3 gather-compact, 1e4 randomized cases", 30.0):
        rng = random.Random(7)
        widths = {1: "u8", 2: "bf16", 4: "f32", 8: "f64"}
        tail_cases = 0
        for case in range(10_000):
            batch = rng.randint(1, 8)
            tokens = rng.randint(1, 9)
            feat = rng.randint(1, 33)
            dtype = DType.of(widths[rng.choice((1, 2, 4, 8))])
            slice_size = tokens * feat * dtype.width
            tail_cases += slice_size % 16 != 0
            data = rng.randbytes(batch * slice_size)
            keep = [rng.randint(0, 1) for _ in range(batch)]
            view = TensorView(data, (batch, tokens, feat), dtype)
            spec = HookSpec(f"case{case}", (tokens, feat), dtype)
            registry = install_hooks(ModelSpec(1, 16), [spec])
            ring = allocate_rings(RingConfig(32 << 10, 8))
            outcome = capture(registry, ring, registry.enabled_ids()[0],
                              view, keep)
            slices = [data[i * slice_size:(i + 1) * slice_size]
                      for i in range(batch)]
            expected = reference_gather(slices, keep)
            assert outcome.bytes_written == len(expected)
            if expected:
                (desc,) = ring.poll_ready(1)
                got = bytes(ring.payload_view(desc.payload_offset,
                                              desc.payload_len))
                assert got == expected, f"case {case}"
            else:
                assert ring.occupancy == 0
        assert tail_cases > 2000  # non-16-multiple tails are well covered


# -- 4: overload-onset shape -------------------------------------------------

def test_criterion_04_overload_onset_shape():
    with criterion("4 overload onset: low-ratio cost, convergence, ordering",
                   120.0):
        wl, specs = base_workload(), base_hooks()
        low = run_offline(wl, specs, COMP, mode=RING2, seed=0,
                          engine=ratio_engine(wl, specs, 0.5)).metrics
        assert low.overhead_pct <= 10.0, low.overhead_pct

        conv_wl = base_workload(batch=4, prefill_tokens=4, decode_steps=24)
        conv_engine = ratio_engine(conv_wl, specs, 2.0)
        ring2 = run_offline(conv_wl, specs, COMP, mode=RING2, seed=0,
                            engine=conv_engine,
                            ring=RingConfig(8 << 10, 512)).metrics
        sync = run_offline(conv_wl, specs, COMP, mode=SYNC_OFFLOAD, seed=0,
                           engine=conv_engine).metrics
        gap = sync.run_time / ring2.run_time
        assert 1.0 - 0.15 <= gap <= 1.0 + 0.15, gap

        for ratio in (0.25, 0.5, 1.0, 2.0, 4.0):
            engine = ratio_engine(wl, specs, ratio)
            times = {
                mode: run_offline(wl, specs, COMP, mode=mode, seed=0,
                                  engine=engine).metrics.run_time
                for mode in (NO_CAPTURE, RING2, SYNC_OFFLOAD)
            }
            assert times[NO_CAPTURE] <= times[RING2] + 1e-12, ratio
            assert times[RING2] <= times[SYNC_OFFLOAD] + 1e-12, ratio


# -- 5: ring size delays the onset -------------------------------------------

def test_criterion_05_ring_size_delays_stall_onset():
    with criterion("5 first stall is monotone in ring capacity; "
                   "sub-capacity burst never stalls", 60.0):
        wl = base_workload(batch=8, prefill_tokens=16, decode_steps=12)
        specs = base_hooks()
        engine = ratio_engine(wl, specs, 4.0)
        onsets = []
        for capacity in (64 << 10, 128 << 10, 256 << 10, 1 << 20):
            m = run_offline(wl, specs, COMP, mode=RING2, seed=0,
                            engine=engine,
                            ring=RingConfig(capacity, 512)).metrics
            onsets.append(m.first_stall_step)
        ranked = [o if o is not None else math.inf for o in onsets]
        assert ranked == sorted(ranked), onsets
        assert ranked[0] < ranked[-1], onsets

        burst = base_workload(batch=8, prefill_tokens=16, decode_steps=1)
        registry = install_hooks(burst.model, specs)
        schedule = build_schedule(burst, build_requests(burst, 0))
        need = sum(estimate_step_bytes(registry, schedule[0].batch))
        ring = RingConfig(round_up_to_copy_unit(int(need / 0.9)) + 4096, 256)
        assert need <= 0.9 * ring.payload_capacity
        quiet = PolicyConfig(mode=COMPLETENESS, pressure_watermark=1.0)
        m = run_offline(burst, specs, quiet, mode=RING2, seed=0,
                        engine=ratio_engine(burst, specs, 4.0),
                        ring=ring).metrics
        assert m.stall_events == 0 and m.first_stall_step is None


# -- 6: best-effort under saturation -----------------------------------------

def test_criterion_06_best_effort_tames_saturation():
    with criterion("6 best-effort: no stalls, 5x cheaper, suffix drops",
                   120.0):
        wl = base_workload(batch=8, prefill_tokens=16, decode_steps=12)
        specs = base_hooks()
        ring = RingConfig(96 << 10, 512)
        engine = ratio_engine(wl, specs, 4.0)
        comp = run_offline(wl, specs, COMP, mode=RING2, seed=0,
                           engine=engine, ring=ring).metrics
        best = run_offline(wl, specs, BEST, mode=RING2, seed=0,
                           engine=engine, ring=ring)
        assert best.metrics.stall_events == 0
        assert best.metrics.stall_time == 0.0
        assert best.metrics.dropped_request_steps > 0
        assert comp.overhead_pct >= 5.0 * max(best.metrics.overhead_pct,
                                              1e-9)
        schedule = build_schedule(wl, build_requests(wl, 0))
        for step in schedule:
            kept = best.keep_log[step.step_seq]
            by_arrival = sorted(step.batch, key=lambda r: r.arrival_index)
            assert kept == tuple(r.request_id
                                 for r in by_arrival[:len(kept)]), \
                step.step_seq


# -- 7: keep-by-pattern ------------------------------------------------------

def test_criterion_07_keep_by_pattern_coverage():
    with criterion("7 flagged coverage whenever flagged demand fits, "
                   "50 schedules", 60.0):
        rng = random.Random(11)
        registry = install_hooks(ModelSpec(2, 64), [
            HookSpec("resid", ("tokens", "hidden"), BF16, per_layer=True),
            HookSpec("logits", ("tokens", 32), F32),
        ])
        covered = starved = dropped_unflagged = 0
        for schedule_idx in range(50):
            for step_seq in range(6):
                n = rng.randint(2, 8)
                tokens = rng.randint(1, 8)
                arrivals = list(range(n))
                rng.shuffle(arrivals)
                batch = [StepRequest(request_id=100 + i,
                                     arrival_index=arrivals[i],
                                     prompt=f"p{i}", tokens=tokens,
                                     token_start=0)
                         for i in range(n)]
                flagged = frozenset(r.request_id for r in batch
                                    if rng.random() < 0.3)
                policy = PolicyConfig(
                    mode=BEST_EFFORT, strategy=KEEP_BY_PATTERN,
                    predicate=Predicate(request_ids=flagged))
                ring = allocate_rings(RingConfig(16 << 10, 64))
                for _ in range(rng.randint(0, 12)):
                    try:
                        ring.reserve_payload(16 * rng.randint(1, 128))
                    except PayloadRingFull:
                        break
                flagged_reqs = [r for r in batch
                                if r.request_id in flagged]
                sizes = []
                for h in registry.enabled_ids():
                    total = sum(registry.slice_bytes(h, r.tokens)
                                for r in flagged_reqs)
                    if total:
                        sizes.append(round_up_to_copy_unit(total))
                fits = ring.would_fit(sizes, meta_entries=len(sizes))
                plan = prepare_step(policy, batch, ring, registry,
                                    step_seq=step_seq)
                kept = set(plan.kept_ids)
                dropped = set(plan.dropped_ids)
                if fits:
                    assert flagged <= kept          # 100% flagged coverage
                    assert not dropped & flagged    # unflagged absorb drops
                    covered += len(flagged)
                    dropped_unflagged += len(dropped)
                else:
                    starved += 1
                if flagged - kept:
                    assert kept <= flagged          # dominance either way
        assert covered > 100 and dropped_unflagged > 50 and starved > 0


# -- 8: drain thresholds -----------------------------------------------------

def _pipeline(**drain_kwargs):
    ring = RingPair(RingConfig(1 << 20, 128))
    names: dict[int, str] = {}
    pipe = ExportPipeline(ring, DrainConfig(**drain_kwargs),
                          DeviceCopyEngine(), TensorMetaFIFO(),
                          hook_name_of=names.__getitem__)
    return pipe, names


def _publish(pipe, names, hook_id, slice_bytes, now=0.0):
    names[hook_id] = f"h{hook_id}"
    offset = pipe.ring.reserve_payload(round_up_to_copy_unit(slice_bytes))
    pipe.ring.publish(Descriptor(payload_offset=offset,
                                 payload_len=slice_bytes,
                                 hook_id=hook_id, step_seq=0))
    pipe.fifo.push(TensorMeta(
        hook_name=names[hook_id], layer_index=0, step_seq=0,
        request_ids=(1,), token_ranges=((0, 1),),
        shape=(1, slice_bytes // 2), dtype=BF16))
    pipe.note_publish(now)


def test_criterion_08_each_drain_threshold_triggers_alone():
    with criterion("8 entry, byte, and timeout thresholds each drain",
                   10.0):
        pipe, names = _pipeline(min_ready_entries=4,
                                min_ready_bytes=1 << 30, max_wait=1e9)
        for i in range(3):
            _publish(pipe, names, i, 1024)
            assert pipe.thresholds_met(0.0) is None
        _publish(pipe, names, 3, 1024)
        assert pipe.thresholds_met(0.0) == "entries"
        batch = pipe.drain_once(0.0)
        pipe.complete_transfer(batch)
        pipe.sink_batch(pipe.stage_to_pageable(batch), NullSink())
        assert [(e.kind, e.reason) for e in pipe.events] == [
            ("drained", "entries"), ("staged", "entries"),
            ("sunk", "entries")]

        pipe, names = _pipeline(min_ready_entries=100,
                                min_ready_bytes=64 << 10, max_wait=1e9)
        _publish(pipe, names, 0, 64 << 10)
        assert pipe.thresholds_met(0.0) == "bytes"
        batch = pipe.drain_once(0.0)
        assert (batch.reason, len(batch.entries)) == ("bytes", 1)
        assert pipe.events[-1].kind == "drained"
        assert pipe.events[-1].bytes == 64 << 10

        pipe, names = _pipeline(min_ready_entries=100,
                                min_ready_bytes=1 << 30, max_wait=2e-3)
        _publish(pipe, names, 0, 256, now=0.0)
        assert pipe.thresholds_met(1e-3) is None
        assert pipe.thresholds_met(2e-3) == "timeout"
        batch = pipe.drain_once(2e-3)
        assert batch.reason == "timeout"
        assert pipe.events[-1].reason == "timeout"


# -- 9: distributed capture joins --------------------------------------------

def test_criterion_09_distributed_joins_match_single_rank():
    with criterion("9 tp shards rejoin byte-exact; pp stages own their "
                   "layers", 60.0):
        wl, specs = base_workload(decode_steps=4), base_hooks()
        single = run_offline(wl, specs, COMP, mode=RING2, seed=0).records
        for tp in (2, 4):
            topology = RankTopology(tp_degree=tp)
            results = run_multirank(wl, topology, specs, COMP, mode=RING2,
                                    seed=0)
            joined = join_records(
                {c: list(r.records) for c, r in results.items()},
                topology, specs)
            assert joined.complete
            diff = compare_datasets(list(single), list(joined.records))
            assert diff.identical, f"tp={tp}: {diff.summary()}"

        topology = RankTopology(tp_degree=2, pp_stages=2)
        results = run_multirank(wl, topology, specs, COMP, mode=RING2,
                                seed=0)
        for (tp_rank, pp_stage), result in results.items():
            assert result.records
            for r in result.records:
                if r.layer_index is not None:
                    assert topology.stage_of_layer(wl.model, r.layer_index) \
                        == pp_stage
                else:
                    assert pp_stage == topology.pp_stages - 1
        joined = join_records(
            {c: list(r.records) for c, r in results.items()},
            topology, specs)
        assert joined.complete
        assert compare_datasets(list(single), list(joined.records)).identical


# -- 10: command-line determinism --------------------------------------------

CLI_CONFIG = """\
workload:
  layers: 4
  hidden: 64
  batch: 4
  prefill_tokens: 8
  decode_steps: 6
  prefill_compute_time: 2.0e-3
  decode_compute_time: 1.0e-3
hooks:
  - {name: resid, dims: [tokens, hidden], dtype: bf16, per_layer: true}
  - {name: logits, dims: [tokens, 128], dtype: f32}
policy:
  mode: completeness
ring:
  payload_capacity: 1048576
  meta_slots: 512
run:
  seed: 3
  out: unused
  modes: [no-capture, ring2, synchronous-offload]
  sweep: [0.5, 2.0]
"""


def _tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(
        p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_runs_are_deterministic(tmp_path):
    with criterion("10 same-seed runs byte-for-byte identical", 60.0):
        config = tmp_path / "exp.yaml"
        config.write_text(CLI_CONFIG)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli_main(["--config", str(config), "--out",
                         str(out_a)]) == 0
        assert cli_main(["--config", str(config), "--out",
                         str(out_b)]) == 0
        digests_a, digests_b = _tree_digest(out_a), _tree_digest(out_b)
        assert digests_a == digests_b
        assert "metrics.csv" in digests_a
        with open(out_a / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert sum(r["step"] == "summary" for r in rows) == 6
