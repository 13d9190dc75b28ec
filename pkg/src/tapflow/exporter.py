"""Bounded export pipeline: drain to staging, page out, reconstruct, sink.

Three single-worker stages move captures off the device:

1. drain: once any ready threshold fires (entry count, byte count, or the
   age of the oldest pending descriptor), all currently-ready descriptors
   that fit one staging buffer move device-to-host in a single batched
   transfer whose simulated duration is latency + bytes/bandwidth. Payload
   regions are released as soon as that staging copy completes.
2. stage_to_pageable: copies the pinned staging buffer out to pageable
   memory and returns the buffer to the pool before anything downstream
   runs, so the pool bound is what limits transient pinned memory.
3. reconstruct + sink: matches each descriptor against the metadata FIFO
   head, splits the payload into per-request records, and writes them out.
   Sink failures are counted and skipped, never propagated.

Thresholds, pool sizes, and queue depths are all finite, so memory between
the ring and the sink is bounded by configuration alone. The workers here
are plain methods; a scheduler (virtual-time or threads) decides when they
run and how long transfers take.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, MetaMismatch, ProtocolError, StagingExhausted
from .hooks import DeviceCopyEngine
from .records import CaptureRecord, TensorMeta, TensorMetaFIFO
from .rings import Descriptor, RingPair

STAGE_QUEUE_SLOTS = 16  # pageable batches parked ahead of reconstruction


@dataclass(frozen=True)
class DrainConfig:
    """Ready thresholds (any one fires a drain) and staging pool sizing."""

    min_ready_entries: int = 8
    min_ready_bytes: int = 1 << 20
    max_wait: float = 2e-3
    staging_buffer_size: int = 8 << 20
    staging_buffer_count: int = 4

    def __post_init__(self) -> None:
        if min(self.min_ready_entries, self.min_ready_bytes) <= 0:
            raise ConfigError("ready thresholds must be positive")
        if self.max_wait <= 0:
            raise ConfigError("max_wait must be positive")
        if self.staging_buffer_size <= 0 or self.staging_buffer_count <= 0:
            raise ConfigError("staging pool sizing must be positive")


class StagingBuffer:
    """One pinned slab plus the descriptors batched into it."""

    __slots__ = ("index", "data", "used", "entries")

    def __init__(self, index: int, size: int) -> None:
        self.index = index
        self.data = bytearray(size)
        self.used = 0
        self.entries: list[tuple[Descriptor, int]] = []  # (desc, start)

    def reset(self) -> None:
        self.used = 0
        self.entries = []


class StagingPool:
    """Fixed set of pinned staging buffers, checked out one drain at a time."""

    def __init__(self, count: int, size: int) -> None:
        self.buffer_size = size
        self._free: list[StagingBuffer] = [
            StagingBuffer(i, size) for i in range(count)]
        self.total = count
        self.checkouts = 0
        self.max_in_use = 0

    @property
    def available(self) -> int:
        return len(self._free)

    def checkout(self) -> StagingBuffer:
        if not self._free:
            raise StagingExhausted("all staging buffers are in flight")
        buf = self._free.pop()
        self.checkouts += 1
        self.max_in_use = max(self.max_in_use, self.total - len(self._free))
        return buf

    def checkin(self, buf: StagingBuffer) -> None:
        buf.reset()
        self._free.append(buf)


@dataclass(frozen=True)
class DrainBatch:
    """Result of one drain: a staged batch and its transfer duration."""

    buffer: StagingBuffer | None
    entries: tuple[tuple[Descriptor, int], ...]  # (descriptor, staging start)
    bytes_total: int
    transfer_time: float
    reason: str

    @property
    def empty(self) -> bool:
        return not self.entries


@dataclass(frozen=True)
class DrainEvent:
    """Event-log row for threshold and ordering assertions."""

    time: float
    kind: str           # drained | staged | sunk | sink-error
    reason: str = ""
    entries: int = 0
    bytes: int = 0


@dataclass
class PageableBatch:
    """Descriptors plus their payload copies in pageable host memory."""

    items: list[tuple[Descriptor, bytes]] = field(default_factory=list)
    reason: str = ""


class ExportPipeline:
    """State and single-worker operations for one ring's export path."""

    def __init__(self, ring: RingPair, config: DrainConfig,
                 engine: DeviceCopyEngine, fifo: TensorMetaFIFO,
                 hook_name_of=None) -> None:
        self.ring = ring
        self.config = config
        self.engine = engine
        self.fifo = fifo
        self.pool = StagingPool(config.staging_buffer_count,
                                config.staging_buffer_size)
        self._hook_name_of = hook_name_of or (lambda hook_id: str(hook_id))
        self.events: list[DrainEvent] = []
        self._pending_publish_times: list[float] = []
        # accounting for the boundedness invariant
        self.pageable_bytes_in_flight = 0
        self.max_transient_bytes = 0
        self.batches_drained = 0
        self.batches_sunk = 0
        self.records_out = 0
        self.bytes_out = 0
        self.sink_failures = 0

    # -- threshold bookkeeping (driven by whoever schedules the workers) ----

    def note_publish(self, now: float) -> None:
        self._pending_publish_times.append(now)

    def oldest_pending_age(self, now: float) -> float | None:
        if not self._pending_publish_times:
            return None
        return now - self._pending_publish_times[0]

    def thresholds_met(self, now: float) -> str | None:
        """Name of the threshold that currently fires, or None."""
        entries = self.ring.ready_entries()
        if entries == 0:
            return None
        if entries >= self.config.min_ready_entries:
            return "entries"
        if self.ring.ready_bytes() >= self.config.min_ready_bytes:
            return "bytes"
        age = self.oldest_pending_age(now)
        if age is not None and age >= self.config.max_wait - 1e-12:
            return "timeout"
        return None

    # -- stage 1: drain ------------------------------------------------------

    def drain_once(self, now: float = 0.0, flush: bool = False) -> DrainBatch:
        """Move all ready descriptors that fit one staging buffer.

        Requires a satisfied threshold or an explicit flush; otherwise the
        result is empty and nothing happens. May raise StagingExhausted.
        """
        reason = "flush" if flush else self.thresholds_met(now)
        if reason is None or self.ring.ready_entries() == 0:
            return DrainBatch(buffer=None, entries=(), bytes_total=0,
                              transfer_time=0.0, reason=reason or "none")
        buf = self.pool.checkout()
        try:
            taken: list[tuple[Descriptor, int]] = []
            used = 0
            for desc in self.ring.peek_ready(self.ring.ready_entries()):
                if used + desc.payload_len > self.pool.buffer_size:
                    if not taken:  # a single capture larger than a buffer
                        raise ConfigError(
                            f"capture of {desc.payload_len} bytes exceeds "
                            f"the staging buffer "
                            f"({self.pool.buffer_size} bytes)")
                    break
                taken.append((desc, used))
                used += desc.payload_len
            consumed = self.ring.poll_ready(len(taken))
            for (desc, start), polled in zip(taken, consumed):
                assert polled == desc
                src = self.ring.payload_view(desc.payload_offset,
                                             desc.payload_len)
                buf.data[start:start + desc.payload_len] = src
                buf.entries.append((desc, start))
            buf.used = used
        except Exception:
            self.pool.checkin(buf)
            raise
        del self._pending_publish_times[:len(taken)]
        self.batches_drained += 1
        batch = DrainBatch(
            buffer=buf,
            entries=tuple(taken),
            bytes_total=used,
            transfer_time=self.engine.d2h_time(used),
            reason=reason,
        )
        self.events.append(DrainEvent(now, "drained", reason,
                                      len(taken), used))
        return batch

    def complete_transfer(self, batch: DrainBatch) -> None:
        """Release payload regions once the staging copy has finished."""
        for desc, _ in batch.entries:
            self.ring.release_payload(desc.payload_offset, desc.reserved_len)

    # -- stage 2: pinned staging to pageable --------------------------------

    def stage_to_pageable(self, batch: DrainBatch,
                          now: float = 0.0) -> PageableBatch:
        """Copy out to pageable memory; the buffer returns to the pool first."""
        out = PageableBatch(reason=batch.reason)
        for desc, start in batch.entries:
            out.items.append(
                (desc, bytes(batch.buffer.data[start:start + desc.payload_len])))
        self.pool.checkin(batch.buffer)
        self.pageable_bytes_in_flight += batch.bytes_total
        self._note_transient()
        self.events.append(DrainEvent(now, "staged", batch.reason,
                                      len(batch.entries), batch.bytes_total))
        return out

    def _note_transient(self) -> None:
        pinned = (self.pool.total - self.pool.available) * self.pool.buffer_size
        transient = pinned + self.pageable_bytes_in_flight
        self.max_transient_bytes = max(self.max_transient_bytes, transient)

    # -- stage 3: reconstruct and sink ---------------------------------------

    def reconstruct(self, desc: Descriptor, payload: bytes) -> list[CaptureRecord]:
        """Split one capture payload into per-request records via the FIFO."""
        meta = self.fifo.match(desc, self._hook_name_of(desc.hook_id))
        return split_payload(meta, payload)

    def sink_batch(self, batch: PageableBatch, sink, now: float = 0.0) -> None:
        for desc, payload in batch.items:
            records = self.reconstruct(desc, payload)
            try:
                sink.write(records)
            except Exception as exc:  # sink faults are isolated, not fatal
                self.sink_failures += 1
                self.events.append(DrainEvent(now, "sink-error", str(exc),
                                              len(records), len(payload)))
            else:
                self.records_out += len(records)
                self.bytes_out += len(payload)
            self.pageable_bytes_in_flight -= len(payload)
        self.batches_sunk += 1
        self.events.append(DrainEvent(now, "sunk", batch.reason,
                                      len(batch.items),
                                      sum(len(p) for _, p in batch.items)))

    # -- flush ---------------------------------------------------------------

    def flush_sync(self, sink, now: float = 0.0) -> float:
        """Drain everything immediately; returns total simulated duration.

        Runs the whole pipeline inline until ring occupancy reaches zero.
        The scheduler-driven equivalent lives in the simulator; this form
        serves direct library use and tests.
        """
        total = 0.0
        while self.ring.ready_entries() > 0:
            batch = self.drain_once(now, flush=True)
            if batch.empty:
                break
            total += batch.transfer_time
            self.complete_transfer(batch)
            paged = self.stage_to_pageable(batch, now)
            self.sink_batch(paged, sink, now)
        if self.ring.occupancy != 0 and self.ring.ready_entries() == 0:
            # Reserved-but-unpublished bytes cannot be flushed; that is a
            # producer-side protocol violation at a flush point.
            raise ProtocolError("flush with unpublished reservations in flight")
        return total


def split_payload(meta: TensorMeta, payload: bytes) -> list[CaptureRecord]:
    """Per-request records from one capture payload, batch order preserved."""
    if len(payload) != meta.expected_payload_len:
        raise MetaMismatch(
            f"payload {len(payload)} bytes != expected "
            f"{meta.expected_payload_len}")
    size = meta.slice_bytes
    out = []
    for i, (request_id, token_range) in enumerate(
            zip(meta.request_ids, meta.token_ranges)):
        out.append(CaptureRecord(
            request_id=request_id,
            hook_name=meta.hook_name,
            layer_index=meta.layer_index,
            step_seq=meta.step_seq,
            token_range=token_range,
            shape=meta.shape,
            dtype=meta.dtype,
            rank_coords=meta.rank_coords,
            payload=payload[i * size:(i + 1) * size],
        ))
    return out
