"""Per-step backpressure decisions: what to keep, whether to flush first.

Two modes:

* Completeness keeps every request and, when ring occupancy crosses the
  pressure watermark at a step boundary, demands a blocking flush before the
  step runs. Captures may still stall mid-step; nothing is ever dropped.
* BestEffort never stalls and never flushes. It budgets one full step ahead
  using exact per-request byte estimates and keeps the largest set its
  strategy allows that provably fits the ring right now, assuming zero drain
  progress during the step. Fit is decided by replaying the reservation
  sequence (16-byte padding, wraparound dead-skip, free descriptor slots
  included), which is what makes the no-stall guarantee exact.

Strategies order the candidates: DropRecent keeps an arrival-order prefix,
so the dropped set is always the most recently admitted suffix.
KeepByPattern puts predicate-flagged requests first (each group in arrival
order), so flagged requests only ever drop after every unflagged request
already has.

Dropped requests still run compute and generate tokens; only their
observation is suppressed, and the decision is re-evaluated from scratch
each step, so a request dropped once can be captured again later.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .hooks import HookRegistry
from .records import TensorMeta
from .rings import RingPair, round_up_to_copy_unit

COMPLETENESS = "completeness"
BEST_EFFORT = "best-effort"
DROP_RECENT = "drop-recent"
KEEP_BY_PATTERN = "keep-by-pattern"


@dataclass(frozen=True)
class Predicate:
    """Flags requests either by explicit id or by prompt prefix."""

    request_ids: frozenset[int] | None = None
    prompt_prefix: str | None = None

    def __post_init__(self) -> None:
        if (self.request_ids is None) == (self.prompt_prefix is None):
            raise ConfigError(
                "predicate needs exactly one of request_ids/prompt_prefix")

    def matches(self, request: "StepRequest") -> bool:
        if self.request_ids is not None:
            return request.request_id in self.request_ids
        return request.prompt.startswith(self.prompt_prefix)


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = COMPLETENESS
    strategy: str | None = None
    predicate: Predicate | None = None
    pressure_watermark: float = 0.8

    def __post_init__(self) -> None:
        if self.mode not in (COMPLETENESS, BEST_EFFORT):
            raise ConfigError(f"unknown policy mode {self.mode!r}")
        if not 0.0 < self.pressure_watermark <= 1.0:
            raise ConfigError("pressure_watermark must be in (0, 1]")
        if self.mode == COMPLETENESS:
            if self.strategy is not None:
                raise ConfigError("completeness takes no drop strategy")
        else:
            if self.strategy not in (DROP_RECENT, KEEP_BY_PATTERN):
                raise ConfigError(f"unknown strategy {self.strategy!r}")
            if (self.strategy == KEEP_BY_PATTERN) != (self.predicate is not None):
                raise ConfigError(
                    "keep-by-pattern requires a predicate; drop-recent none")


@dataclass(frozen=True)
class StepRequest:
    """One batch element as the policy sees it for a single step."""

    request_id: int
    arrival_index: int
    prompt: str
    tokens: int            # tokens this request processes this step
    token_start: int       # position of the first of them in its sequence

    @property
    def token_range(self) -> tuple[int, int]:
        return (self.token_start, self.token_start + self.tokens)


@dataclass(frozen=True)
class StepPlan:
    """Immutable decision for one step."""

    keep: tuple[int, ...]               # 0/1 per batch element
    flush_before: bool
    fifo_entries: tuple[TensorMeta, ...]
    kept_ids: tuple[int, ...]
    dropped_ids: tuple[int, ...]
    flagged_ids: tuple[int, ...] = ()
    free_bytes_at_plan: int = 0

    @property
    def dropped_count(self) -> int:
        return len(self.dropped_ids)


def estimate_step_bytes(registry: HookRegistry,
                        batch: list[StepRequest]) -> list[int]:
    """Exact per-request capture bytes for this step's enabled hooks."""
    enabled = registry.enabled_ids()
    return [
        sum(registry.slice_bytes(h, r.tokens) for h in enabled)
        for r in batch
    ]


def _reservation_sizes(registry: HookRegistry,
                       kept: list[StepRequest]) -> list[int]:
    """Padded per-hook reservation lengths for a candidate kept set."""
    sizes: list[int] = []
    for h in registry.enabled_ids():
        total = sum(registry.slice_bytes(h, r.tokens) for r in kept)
        if total:
            sizes.append(round_up_to_copy_unit(total))
    return sizes


def _largest_fitting_prefix(priority: list[StepRequest],
                            registry: HookRegistry,
                            ring: RingPair) -> list[StepRequest]:
    for m in range(len(priority), 0, -1):
        kept = priority[:m]
        sizes = _reservation_sizes(registry, kept)
        if not sizes:
            return kept
        if ring.would_fit(sizes, meta_entries=len(sizes)):
            return kept
    return []


def _uniform_tokens(batch: list[StepRequest]) -> int:
    tokens = {r.tokens for r in batch}
    if len(tokens) != 1:
        raise ConfigError(
            "per-request token counts must be uniform within a step")
    return tokens.pop()


def prepare_step(
    policy: PolicyConfig,
    batch: list[StepRequest],
    ring: RingPair,
    registry: HookRegistry,
    *,
    step_seq: int,
    rank_coords: tuple[int, int] = (0, 0),
) -> StepPlan:
    """Decide keeps, flush demand, and the FIFO entries for one step.

    Pure with respect to its inputs: identical batch, ring state, and
    enabled set always produce the identical plan.
    """
    state = ring.state()
    if not batch:
        return StepPlan(keep=(), flush_before=False, fifo_entries=(),
                        kept_ids=(), dropped_ids=(),
                        free_bytes_at_plan=state.free_bytes)
    flagged: list[int] = []
    if policy.mode == COMPLETENESS:
        kept = list(batch)
        flush_before = state.pressure >= policy.pressure_watermark
    else:
        flush_before = False
        if policy.strategy == DROP_RECENT:
            priority = sorted(batch, key=lambda r: r.arrival_index)
        else:
            hits = [r for r in batch if policy.predicate.matches(r)]
            misses = [r for r in batch if not policy.predicate.matches(r)]
            flagged = [r.request_id for r in hits]
            priority = (sorted(hits, key=lambda r: r.arrival_index)
                        + sorted(misses, key=lambda r: r.arrival_index))
        kept = _largest_fitting_prefix(priority, registry, ring)
    kept_ids = {r.request_id for r in kept}
    keep = tuple(1 if r.request_id in kept_ids else 0 for r in batch)
    kept_in_batch = [r for r in batch if r.request_id in kept_ids]
    fifo_entries: list[TensorMeta] = []
    if kept_in_batch:
        tokens = _uniform_tokens(kept_in_batch)
        for hook_id in registry.enabled_ids():
            hook = registry.hook(hook_id)
            fifo_entries.append(TensorMeta(
                hook_name=hook.name,
                layer_index=hook.layer_index,
                step_seq=step_seq,
                request_ids=tuple(r.request_id for r in kept_in_batch),
                token_ranges=tuple(r.token_range for r in kept_in_batch),
                shape=hook.resolve_shape(tokens, registry.hidden_extent),
                dtype=hook.dtype,
                rank_coords=rank_coords,
            ))
    return StepPlan(
        keep=keep,
        flush_before=flush_before,
        fifo_entries=tuple(fifo_entries),
        kept_ids=tuple(r.request_id for r in kept_in_batch),
        dropped_ids=tuple(r.request_id for r in batch
                          if r.request_id not in kept_ids),
        flagged_ids=tuple(flagged),
        free_bytes_at_plan=state.free_bytes,
    )
