"""Synthetic inference workload: schedules, topologies, tensor contents.

A run is a sequence of steps. Each step is either a prefill step, which
admits one cohort of new requests at ``prefill_tokens`` tokens apiece, or
a decode step, which advances every active request by exactly one token.
Steps are uniform on purpose: every request in a step contributes the
same token count, so capture slices within one hook firing share a size.

Tensor contents are seeded pseudo-random bytes keyed by
(run seed, hook, layer, request, step), so any two components that agree
on those coordinates generate identical bytes without sharing state. A
tensor-parallel rank generates the full tensor and keeps only its shard
of the hidden axis, which makes cross-rank joins byte-exact by
construction rather than by luck.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .hooks import HookSpec, ModelSpec
from .policy import StepRequest

PREFILL = "prefill"
DECODE = "decode"

PROMPT_GROUPS = ("alpha", "beta")


@dataclass(frozen=True)
class WorkloadSpec:
    """Model shape plus the request schedule driving it."""

    layers: int
    hidden: int
    batch: int
    prefill_tokens: int
    decode_steps: int
    prefill_compute_time: float
    decode_compute_time: float
    arrival: tuple[int, ...] | None = None  # admissions per step; None = all at once

    def __post_init__(self) -> None:
        counts = (self.layers, self.hidden, self.batch,
                  self.prefill_tokens, self.decode_steps)
        if min(counts) <= 0:
            raise ConfigError("workload counts must be positive")
        if min(self.prefill_compute_time, self.decode_compute_time) <= 0:
            raise ConfigError("compute times must be positive")
        if self.arrival is not None:
            if any(n < 0 for n in self.arrival):
                raise ConfigError("arrival admissions must be non-negative")
            if sum(self.arrival) != self.batch:
                raise ConfigError(
                    f"arrival admits {sum(self.arrival)} requests, "
                    f"batch is {self.batch}")

    @property
    def model(self) -> ModelSpec:
        return ModelSpec(layers=self.layers, hidden=self.hidden)

    @property
    def cohorts(self) -> tuple[int, ...]:
        return self.arrival if self.arrival is not None else (self.batch,)


@dataclass(frozen=True)
class Request:
    request_id: int
    arrival_index: int
    prompt: str


def build_requests(spec: WorkloadSpec, seed: int) -> tuple[Request, ...]:
    """Requests with seeded prompt-group labels for predicate selection."""
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([seed, 0x70726F6D])))  # namespace: prompts
    out = []
    for i in range(spec.batch):
        group = PROMPT_GROUPS[int(rng.integers(len(PROMPT_GROUPS)))]
        out.append(Request(request_id=i, arrival_index=i,
                           prompt=f"{group} prompt {i}"))
    return tuple(out)


@dataclass(frozen=True)
class ScheduledStep:
    step_seq: int
    kind: str                       # PREFILL or DECODE
    batch: tuple[StepRequest, ...]
    compute_time: float

    @property
    def tokens(self) -> int:
        return self.batch[0].tokens  # uniform within a step by construction


def build_schedule(spec: WorkloadSpec,
                   requests: tuple[Request, ...]) -> tuple[ScheduledStep, ...]:
    """Expand the workload into per-step batches with token ranges.

    Admission entry k > 0 makes step k a prefill step for that cohort;
    entry 0 (and every step past the schedule) decodes all active
    requests. Requests retire after ``decode_steps`` decode steps. Active
    requests idle during another cohort's prefill step.
    """
    if len(requests) != spec.batch:
        raise ConfigError("requests do not match the workload batch size")
    admissions = list(spec.cohorts)
    waiting = list(requests)
    active: list[tuple[Request, int]] = []  # (request, decodes done)
    steps: list[ScheduledStep] = []
    step_seq = 0
    while waiting or active or admissions:
        admit = admissions.pop(0) if admissions else 0
        if admit > 0:
            cohort, waiting = waiting[:admit], waiting[admit:]
            batch = tuple(StepRequest(
                request_id=r.request_id, arrival_index=r.arrival_index,
                prompt=r.prompt, tokens=spec.prefill_tokens, token_start=0)
                for r in cohort)
            steps.append(ScheduledStep(step_seq, PREFILL, batch,
                                       spec.prefill_compute_time))
            active.extend((r, 0) for r in cohort)
        elif active:
            batch = tuple(StepRequest(
                request_id=r.request_id, arrival_index=r.arrival_index,
                prompt=r.prompt, tokens=1,
                token_start=spec.prefill_tokens + done)
                for r, done in active)
            steps.append(ScheduledStep(step_seq, DECODE, batch,
                                       spec.decode_compute_time))
            active = [(r, done + 1) for r, done in active
                      if done + 1 < spec.decode_steps]
        else:
            continue  # empty admission slot before anything is active
        step_seq += 1
    return tuple(steps)


@dataclass(frozen=True)
class RankTopology:
    """Tensor-parallel shards times pipeline stages."""

    tp_degree: int = 1
    pp_stages: int = 1

    def __post_init__(self) -> None:
        if self.tp_degree <= 0 or self.pp_stages <= 0:
            raise ConfigError("topology degrees must be positive")

    @property
    def rank_count(self) -> int:
        return self.tp_degree * self.pp_stages

    @property
    def coords(self) -> tuple[tuple[int, int], ...]:
        return tuple((tp, pp) for pp in range(self.pp_stages)
                     for tp in range(self.tp_degree))

    def validate_model(self, model: ModelSpec) -> None:
        if model.hidden % self.tp_degree != 0:
            raise ConfigError(
                f"hidden dim {model.hidden} does not shard across "
                f"{self.tp_degree} tensor-parallel ranks")
        if model.layers % self.pp_stages != 0:
            raise ConfigError(
                f"{model.layers} layers do not partition across "
                f"{self.pp_stages} pipeline stages")

    def shard_width(self, model: ModelSpec) -> int:
        return model.hidden // self.tp_degree

    def shard_bounds(self, model: ModelSpec, tp_rank: int) -> tuple[int, int]:
        width = self.shard_width(model)
        return tp_rank * width, (tp_rank + 1) * width

    def stage_layers(self, model: ModelSpec, pp_stage: int) -> range:
        per_stage = model.layers // self.pp_stages
        return range(pp_stage * per_stage, (pp_stage + 1) * per_stage)

    def stage_of_layer(self, model: ModelSpec, layer: int) -> int:
        return layer // (model.layers // self.pp_stages)


# -- tensor contents ----------------------------------------------------------

def _content_key(seed: int, hook: HookSpec, request_id: int,
                 step_seq: int) -> list[int]:
    layer = 0 if hook.layer_index is None else hook.layer_index + 1
    return [seed, (zlib.crc32(hook.name.encode()) << 32) | layer,
            request_id, step_seq]


def full_tensor(seed: int, hook: HookSpec, request_id: int, step_seq: int,
                tokens: int, hidden: int) -> np.ndarray:
    """Unsharded content bytes, shape ``(*hook shape, dtype width)``."""
    shape = hook.resolve_shape(tokens, hidden)
    nbytes = math.prod(shape) * hook.dtype.width
    gen = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(_content_key(seed, hook, request_id,
                                            step_seq))))
    flat = np.frombuffer(gen.bytes(nbytes), dtype=np.uint8)
    return flat.reshape(*shape, hook.dtype.width)


def shard_tensor(tensor: np.ndarray, hook: HookSpec, tp_rank: int,
                 tp_degree: int) -> np.ndarray:
    """This rank's slab of a full tensor; replicated hooks pass through."""
    if not hook.sharded or tp_degree == 1:
        return tensor
    axis = hook.hidden_axis
    extent = tensor.shape[axis]
    if extent % tp_degree != 0:
        raise ConfigError(f"hidden extent {extent} does not shard "
                          f"{tp_degree} ways")
    width = extent // tp_degree
    index = [slice(None)] * tensor.ndim
    index[axis] = slice(tp_rank * width, (tp_rank + 1) * width)
    return tensor[tuple(index)]


def request_payload(seed: int, hook: HookSpec, request_id: int,
                    step_seq: int, tokens: int, hidden: int,
                    tp_rank: int = 0, tp_degree: int = 1) -> bytes:
    """One request's capture bytes for one hook firing on one rank."""
    tensor = full_tensor(seed, hook, request_id, step_seq, tokens, hidden)
    return shard_tensor(tensor, hook, tp_rank, tp_degree).tobytes()


def batch_payload(seed: int, hook: HookSpec, batch, step_seq: int,
                  tokens: int, hidden: int, tp_rank: int = 0,
                  tp_degree: int = 1) -> bytearray:
    """The device-side source buffer for one hook firing: batch-major."""
    out = bytearray()
    for req in batch:
        out += request_payload(seed, hook, req.request_id, step_seq,
                               tokens, hidden, tp_rank, tp_degree)
    return out
