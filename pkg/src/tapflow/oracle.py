"""Synchronous reference capture and byte-exact dataset comparison.

The reference path regenerates every record a run should have produced,
straight from the schedule and the shared content keying, touching none
of the ring, exporter, or policy machinery. Verifying a dataset is then a
multiset comparison of records. A best-effort run is verified against the
same reference narrowed by its keep log, which makes "dropped exactly
what it said it dropped, kept everything else intact" checkable after
the fact.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .hooks import HookRegistry
from .records import CaptureRecord
from .workload import request_payload


def firing_records(seed: int, registry: HookRegistry, hook_id: int, batch,
                   step_seq: int, tokens: int,
                   rank_coords: tuple[int, int] = (0, 0),
                   tp_degree: int = 1) -> list[CaptureRecord]:
    """The records one hook firing owes for a kept batch, batch order."""
    hook = registry.hook(hook_id)
    shape = hook.resolve_shape(tokens, registry.hidden_extent)
    hidden_full = registry.hidden_extent * tp_degree
    return [
        CaptureRecord(
            request_id=req.request_id,
            hook_name=hook.name,
            layer_index=hook.layer_index,
            step_seq=step_seq,
            token_range=req.token_range,
            shape=shape,
            dtype=hook.dtype,
            rank_coords=rank_coords,
            payload=request_payload(
                seed, hook, req.request_id, step_seq, tokens,
                hidden_full, rank_coords[0], tp_degree),
        )
        for req in batch
    ]


def reference_records(seed: int, schedule, registry: HookRegistry, *,
                      rank_coords: tuple[int, int] = (0, 0),
                      tp_degree: int = 1,
                      keep_log: dict[int, tuple[int, ...]] | None = None,
                      ) -> list[CaptureRecord]:
    """Every record the run should emit, in schedule-then-firing order.

    ``keep_log`` maps step_seq to the request ids whose observation the
    run kept; None means keep everything (the lossless contract).
    """
    out: list[CaptureRecord] = []
    for step in schedule:
        if keep_log is None:
            batch = step.batch
        else:
            kept = set(keep_log.get(step.step_seq, ()))
            batch = tuple(r for r in step.batch if r.request_id in kept)
        if not batch:
            continue
        for hook_id in registry.enabled_ids():
            out.extend(firing_records(seed, registry, hook_id, batch,
                                      step.step_seq, step.tokens,
                                      rank_coords, tp_degree))
    return out


@dataclass(frozen=True)
class DatasetDiff:
    """Multiset difference between an expected and an actual dataset."""

    missing: tuple          # keys owed but absent
    unexpected: tuple       # keys present but not owed
    corrupt: tuple          # keys present on both sides with different bytes

    @property
    def identical(self) -> bool:
        return not (self.missing or self.unexpected or self.corrupt)

    def per_hook_counts(self) -> dict[str, int]:
        counts: Counter[str] = Counter()
        for key in (*self.missing, *self.unexpected, *self.corrupt):
            counts[key[1]] += 1
        return dict(counts)

    def summary(self) -> str:
        if self.identical:
            return "datasets identical"
        parts = [f"{len(self.missing)} missing",
                 f"{len(self.unexpected)} unexpected",
                 f"{len(self.corrupt)} corrupt"]
        hooks = ", ".join(f"{name}: {n}"
                          for name, n in sorted(self.per_hook_counts().items()))
        return f"datasets differ ({', '.join(parts)}) by hook: {hooks}"


def compare_datasets(expected: list[CaptureRecord],
                     actual: list[CaptureRecord]) -> DatasetDiff:
    """Exact multiset comparison; records must match byte for byte."""
    surplus_expected = Counter(expected) - Counter(actual)
    surplus_actual = Counter(actual) - Counter(expected)
    missing_keys = Counter(r.key() for r in surplus_expected.elements())
    unexpected_keys = Counter(r.key() for r in surplus_actual.elements())
    corrupt = missing_keys & unexpected_keys
    return DatasetDiff(
        missing=tuple(sorted((missing_keys - corrupt).elements())),
        unexpected=tuple(sorted((unexpected_keys - corrupt).elements())),
        corrupt=tuple(sorted(corrupt.elements())),
    )
