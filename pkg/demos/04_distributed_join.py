"""Capturing across tensor/pipeline ranks and joining the shards back.

Each rank runs its own ring and exporter and records only what it
computes: hidden-sharded tensors carry a 1/tp slice of the hidden axis,
replicated tensors a full copy, and pipeline stages only their layers.
The join reassembles full-model records and must be byte-identical to a
single-rank run of the same seed; when a rank's dataset is lost, the
join reports the hole instead of inventing bytes.
Run it: `python demos/04_distributed_join.py`.
"""

from tapflow.hooks import DType, HookSpec
from tapflow.joins import join_records
from tapflow.oracle import compare_datasets
from tapflow.policy import COMPLETENESS, PolicyConfig
from tapflow.simulator import RING2, run_multirank, run_offline
from tapflow.workload import RankTopology, WorkloadSpec

workload = WorkloadSpec(layers=4, hidden=64, batch=4, prefill_tokens=8,
                        decode_steps=4, prefill_compute_time=2e-3,
                        decode_compute_time=1e-3)
hooks = [
    HookSpec("resid", ("tokens", "hidden"), DType.of("bf16"), per_layer=True),
    HookSpec("final_ln", ("tokens", "hidden"), DType.of("bf16")),
    HookSpec("logits", ("tokens", 128), DType.of("f32")),
]
policy = PolicyConfig(mode=COMPLETENESS)

reference = list(run_offline(workload, hooks, policy, mode=RING2,
                             seed=0).records)
print(f"Single-rank reference: {len(reference)} records.")

topology = RankTopology(tp_degree=2)
datasets = {coords: list(res.records)
            for coords, res in run_multirank(workload, topology, hooks,
                                             policy, mode=RING2,
                                             seed=0).items()}
print(f"\ntp=2 run produced {sum(map(len, datasets.values()))} records "
      f"across {len(datasets)} ranks.")

pick = reference[0]
print(f"\nOne tensor, three views of '{pick.hook_name}' "
      f"(step {pick.step_seq}, request {pick.request_id}):")
print(f"  full model   shape {pick.shape}  {len(pick.payload)} bytes")
for coords in sorted(datasets):
    shard = next(r for r in datasets[coords]
                 if (r.hook_name, r.step_seq, r.request_id)
                 == (pick.hook_name, pick.step_seq, pick.request_id))
    print(f"  rank {coords}    shape {shard.shape}  "
          f"{len(shard.payload)} bytes")

joined = join_records(datasets, topology, hooks)
diff = compare_datasets(reference, list(joined.records))
print(f"\nJoin complete: {joined.complete}.  Against the single-rank "
      f"reference: {'byte-identical' if diff.identical else diff.summary()}")

topology22 = RankTopology(tp_degree=2, pp_stages=2)
datasets22 = {coords: list(res.records)
              for coords, res in run_multirank(workload, topology22, hooks,
                                               policy, mode=RING2,
                                               seed=0).items()}
print("\ntp=2 x pp=2: each stage records only the layers it owns.")
for coords in sorted(datasets22):
    layers = sorted({r.layer_index for r in datasets22[coords]
                     if r.layer_index is not None})
    globals_ = sorted({r.hook_name for r in datasets22[coords]
                       if r.layer_index is None})
    print(f"  rank {coords}: layers {layers}, whole-model hooks {globals_}")
joined22 = join_records(datasets22, topology22, hooks)
diff22 = compare_datasets(reference, list(joined22.records))
print(f"  join vs single rank: "
      f"{'byte-identical' if diff22.identical else diff22.summary()}")

lost = datasets.pop((1, 0))
partial = join_records(datasets, topology, hooks)
print(f"\nDrop rank (1, 0) from the tp=2 run ({len(lost)} records lost):")
print(f"  complete={partial.complete}, "
      f"{len(partial.missing)} groups unjoinable, "
      f"{len(partial.records)} records still recovered")
entry = partial.missing[0]
request_id, hook_name, _, step_seq = entry.key
print(f"  e.g. {hook_name} step {step_seq} request {request_id}: "
      f"tp ranks present {entry.present} of {entry.needed} needed")
survivors = sorted({r.hook_name for r in partial.records})
print(f"  recovered hooks are the replicated ones: {survivors}")
