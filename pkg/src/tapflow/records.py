"""Semantic metadata for captures and the per-request records they become.

Descriptors in the meta ring carry only transport facts (offset, length,
hook id, step). Everything needed to slice a payload back into per-request
tensors rides in a host-side FIFO of TensorMeta entries enqueued in firing
order, one per capture. Matching a drained descriptor against the FIFO head
is strict: a disagreement is fatal, never skipped.
"""

from __future__ import annotations

import math
import zlib
from collections import deque
from dataclasses import dataclass

from .errors import ConfigError, MetaMismatch
from .hooks import DType
from .rings import Descriptor


@dataclass(frozen=True)
class TensorMeta:
    """Metadata for one capture: the kept batch, this step, one hook."""

    hook_name: str
    layer_index: int | None
    step_seq: int
    request_ids: tuple[int, ...]
    token_ranges: tuple[tuple[int, int], ...]
    shape: tuple[int, ...]          # per-request dims
    dtype: DType
    rank_coords: tuple[int, int] = (0, 0)   # (tp_rank, pp_stage)

    def __post_init__(self) -> None:
        if not self.request_ids:
            raise ConfigError("a capture covers at least one request")
        if len(set(self.request_ids)) != len(self.request_ids):
            raise ConfigError("duplicate request ids in one capture")
        if len(self.token_ranges) != len(self.request_ids):
            raise ConfigError("token_ranges must align with request_ids")
        for start, end in self.token_ranges:
            if not 0 <= start < end:
                raise ConfigError("token ranges must be non-empty")
        if any(d <= 0 for d in self.shape):
            raise ConfigError("shape dims must be positive")

    @property
    def slice_bytes(self) -> int:
        return math.prod(self.shape) * self.dtype.width

    @property
    def expected_payload_len(self) -> int:
        return len(self.request_ids) * self.slice_bytes


class TensorMetaFIFO:
    """Host-side queue, enqueued at step planning, consumed in drain order."""

    def __init__(self) -> None:
        self._entries: deque[TensorMeta] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, meta: TensorMeta) -> None:
        self._entries.append(meta)

    def extend(self, metas) -> None:
        self._entries.extend(metas)

    def peek(self) -> TensorMeta | None:
        return self._entries[0] if self._entries else None

    def match(self, desc: Descriptor, hook_name: str) -> TensorMeta:
        """Pop the head if it agrees with the descriptor, else fail fatally."""
        if not self._entries:
            raise MetaMismatch(
                f"descriptor for hook {hook_name!r} step {desc.step_seq} "
                "arrived with an empty metadata FIFO"
            )
        head = self._entries[0]
        if head.step_seq != desc.step_seq or head.hook_name != hook_name:
            raise MetaMismatch(
                f"descriptor (hook={hook_name!r}, step={desc.step_seq}) does "
                f"not match FIFO head (hook={head.hook_name!r}, "
                f"step={head.step_seq})"
            )
        if head.expected_payload_len != desc.payload_len:
            raise MetaMismatch(
                f"payload length {desc.payload_len} != expected "
                f"{head.expected_payload_len} for hook {hook_name!r} "
                f"step {desc.step_seq}"
            )
        return self._entries.popleft()


@dataclass(frozen=True)
class CaptureRecord:
    """One request's tensor from one capture, ready for a sink."""

    request_id: int
    hook_name: str
    layer_index: int | None
    step_seq: int
    token_range: tuple[int, int]
    shape: tuple[int, ...]
    dtype: DType
    rank_coords: tuple[int, int]
    payload: bytes

    def __post_init__(self) -> None:
        expected = math.prod(self.shape) * self.dtype.width
        if len(self.payload) != expected:
            raise ConfigError(
                f"record payload {len(self.payload)} bytes != shape "
                f"{self.shape} x {self.dtype.name} = {expected}"
            )

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.payload)

    def key(self) -> tuple:
        """Identity used for multiset comparison and joining."""
        return (self.request_id, self.hook_name, self.layer_index,
                self.step_seq, self.rank_coords)
