"""Reassembly of per-rank capture datasets into full-model records.

Tensor-parallel ranks capture disjoint hidden-dimension shards of the same
firing; pipeline stages capture disjoint layers. Joining concatenates the
shards of each (request, hook, layer, step) group along the hook's hidden
axis, in tp-rank order, and normalizes rank coordinates so the result is
comparable byte-for-byte with a single-rank run of the full model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetaMismatch
from .hooks import HookSpec
from .records import CaptureRecord
from .workload import RankTopology

# (request_id, hook_name, layer_index, step_seq)
JoinKey = tuple[int, str, int | None, int]


@dataclass(frozen=True)
class MissingShards:
    """A group that cannot be joined because tp ranks are absent."""

    key: JoinKey
    present: tuple[int, ...]        # tp ranks that did arrive
    needed: int                     # tp_degree


@dataclass(frozen=True)
class JoinResult:
    records: tuple[CaptureRecord, ...]
    missing: tuple[MissingShards, ...]

    @property
    def complete(self) -> bool:
        return not self.missing


def _group_key(record: CaptureRecord) -> JoinKey:
    return (record.request_id, record.hook_name, record.layer_index,
            record.step_seq)


def _spec_for(hook_name: str, by_name: dict[str, HookSpec]) -> HookSpec:
    """Resolve a concrete hook name, including per-layer ``name[L]`` forms."""
    spec = by_name.get(hook_name)
    if spec is None and hook_name.endswith("]") and "[" in hook_name:
        base = by_name.get(hook_name[:hook_name.rindex("[")])
        if base is not None and base.per_layer:
            spec = base
    if spec is None:
        raise MetaMismatch(f"records reference unknown hook {hook_name!r}")
    return spec


def _check_agreement(key: JoinKey, shards: list[CaptureRecord]) -> None:
    first = shards[0]
    for other in shards[1:]:
        if (other.token_range != first.token_range
                or other.shape != first.shape
                or other.dtype != first.dtype):
            raise MetaMismatch(
                f"shards of {key} disagree: {other.token_range}/"
                f"{other.shape}/{other.dtype.name} vs {first.token_range}/"
                f"{first.shape}/{first.dtype.name}")


def _concat_shards(key: JoinKey, spec: HookSpec,
                   shards: list[CaptureRecord]) -> CaptureRecord:
    _check_agreement(key, shards)
    first = shards[0]
    axis = spec.hidden_axis
    parts = [np.frombuffer(r.payload, dtype=np.uint8)
             .reshape(*r.shape, r.dtype.width) for r in shards]
    merged = np.concatenate(parts, axis=axis)
    shape = list(first.shape)
    shape[axis] = shape[axis] * len(shards)
    return CaptureRecord(
        request_id=first.request_id, hook_name=first.hook_name,
        layer_index=first.layer_index, step_seq=first.step_seq,
        token_range=first.token_range, shape=tuple(shape),
        dtype=first.dtype, rank_coords=(0, 0), payload=merged.tobytes())


def _dedupe_replicated(key: JoinKey,
                       shards: list[CaptureRecord]) -> CaptureRecord:
    _check_agreement(key, shards)
    first = shards[0]
    for other in shards[1:]:
        if other.payload != first.payload:
            raise MetaMismatch(
                f"replicated hook copies of {key} differ between tp ranks")
    if first.rank_coords == (0, 0):
        return first
    return CaptureRecord(
        request_id=first.request_id, hook_name=first.hook_name,
        layer_index=first.layer_index, step_seq=first.step_seq,
        token_range=first.token_range, shape=first.shape,
        dtype=first.dtype, rank_coords=(0, 0), payload=first.payload)


def join_records(
    datasets: dict[tuple[int, int], list[CaptureRecord]],
    topology: RankTopology,
    hook_specs,
) -> JoinResult:
    """Merge per-rank record lists into one full-model dataset.

    ``datasets`` maps (tp_rank, pp_stage) to that rank's records in any
    order. Sharded hooks require every tp rank of the owning stage; groups
    with absent ranks are reported in ``missing`` and skipped. Replicated
    hooks keep a single copy after checking the ranks agree byte-for-byte.
    """
    by_name = {spec.name: spec for spec in hook_specs}
    groups: dict[JoinKey, dict[int, list[CaptureRecord]]] = {}
    order: list[JoinKey] = []
    for coords, records in sorted(datasets.items()):
        tp_rank, _ = coords
        for record in records:
            key = _group_key(record)
            if key not in groups:
                groups[key] = {}
                order.append(key)
            groups[key].setdefault(tp_rank, []).append(record)

    joined: list[CaptureRecord] = []
    missing: list[MissingShards] = []
    for key in order:
        by_rank = groups[key]
        spec = _spec_for(key[1], by_name)
        for rank, copies in by_rank.items():
            if len(copies) > 1:
                raise MetaMismatch(
                    f"tp rank {rank} produced {len(copies)} records for "
                    f"{key}; expected one")
        if spec.sharded:
            want = range(topology.tp_degree)
            absent = [r for r in want if r not in by_rank]
            if absent:
                missing.append(MissingShards(
                    key=key, present=tuple(sorted(by_rank)),
                    needed=topology.tp_degree))
                continue
            shards = [by_rank[r][0] for r in want]
            joined.append(_concat_shards(key, spec, shards))
        else:
            copies = [by_rank[r][0] for r in sorted(by_rank)]
            joined.append(_dedupe_replicated(key, copies))

    joined.sort(key=lambda r: (r.step_seq, r.hook_name,
                               -1 if r.layer_index is None else r.layer_index,
                               r.request_id))
    return JoinResult(records=tuple(joined), missing=tuple(missing))
