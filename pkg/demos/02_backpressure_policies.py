"""Three backpressure policies under the same saturated workload.

A ratio-4 run (captures are generated 4x faster than the link drains them)
through a 24 KiB ring. Completeness stalls the model and keeps everything;
best-effort drop-recent never stalls and sheds the newest arrivals;
keep-by-pattern never stalls and shields the flagged requests first. The
drain batches single entries here so partial keeps surface instead of
all-or-nothing lumps. Run it: `python demos/02_backpressure_policies.py`.
"""

from tapflow.exporter import DrainConfig
from tapflow.hooks import DType, HookSpec, install_hooks
from tapflow.oracle import compare_datasets, reference_records
from tapflow.policy import (BEST_EFFORT, COMPLETENESS, DROP_RECENT,
                            KEEP_BY_PATTERN, PolicyConfig, Predicate)
from tapflow.rings import RingConfig
from tapflow.simulator import RING2, engine_for_ratio, run_offline
from tapflow.workload import WorkloadSpec, build_requests, build_schedule

workload = WorkloadSpec(layers=4, hidden=64, batch=8, prefill_tokens=2,
                        decode_steps=12, prefill_compute_time=2e-3,
                        decode_compute_time=1e-3)
hooks = [
    HookSpec("resid", ("tokens", "hidden"), DType.of("bf16"), per_layer=True),
    HookSpec("final_ln", ("tokens", "hidden"), DType.of("bf16")),
    HookSpec("logits", ("tokens", 128), DType.of("f32")),
]
ring = RingConfig(payload_capacity=24 << 10, meta_slots=512)
drain = DrainConfig(min_ready_entries=1)
registry = install_hooks(workload.model, hooks)
schedule = build_schedule(workload, build_requests(workload, 0))
engine = engine_for_ratio(4.0, schedule, registry)

FLAGGED = frozenset({0, 2})
policies = {
    "completeness": PolicyConfig(mode=COMPLETENESS),
    "drop-recent": PolicyConfig(mode=BEST_EFFORT, strategy=DROP_RECENT),
    "keep {0,2}": PolicyConfig(mode=BEST_EFFORT, strategy=KEEP_BY_PATTERN,
                               predicate=Predicate(request_ids=FLAGGED)),
}

print(f"{'policy':<14} {'overhead':>9} {'stalls':>7} {'dropped':>8} "
      f"{'records':>8}")
results = {}
for name, policy in policies.items():
    result = run_offline(workload, hooks, policy, mode=RING2, seed=0,
                         engine=engine, ring=ring, drain=drain)
    results[name] = result
    m = result.metrics
    print(f"{name:<14} {m.overhead_pct:>8.1f}% {m.stall_events:>7} "
          f"{m.dropped_request_steps:>8} {m.record_count:>8}")

print("\nCompleteness is lossless: the dataset equals the synchronous")
print("reference byte for byte.")
expected = reference_records(0, schedule, registry)
diff = compare_datasets(expected, results["completeness"].records)
print(f"  comparison: {diff.summary()}")

print("\nKept request ids by step. Drop-recent keeps arrival-order")
print("prefixes; keep-by-pattern spends the same budget on the flagged")
print("requests first (watch the steps where only two requests fit).")
print(f"  {'step':>4}  {'drop-recent':<26} keep {{0,2}}")
for step in schedule:
    dr = list(results["drop-recent"].keep_log[step.step_seq])
    kp = list(results["keep {0,2}"].keep_log[step.step_seq])
    marker = "  <-" if set(kp) & FLAGGED and dr != kp else ""
    print(f"  {step.step_seq:>4}  {str(dr):<26} {kp}{marker}")

for name in ("drop-recent", "keep {0,2}"):
    kept = flagged_present = covered = unflagged_kept = unflagged_present = 0
    for step in schedule:
        kept_ids = set(results[name].keep_log[step.step_seq])
        present = {r.request_id for r in step.batch}
        flagged_present += len(FLAGGED & present)
        covered += len(FLAGGED & kept_ids)
        unflagged_present += len(present - FLAGGED)
        unflagged_kept += len(kept_ids - FLAGGED)
    print(f"\n{name}: flagged coverage {covered}/{flagged_present}, "
          f"unflagged {unflagged_kept}/{unflagged_present}")
