"""Dual ring buffers for staging captured tensors on a simulated device.

Two cooperating rings back each capture stream:

* a payload ring holding raw tensor bytes in a device-resident arena, and
* a meta ring of fixed 64-byte descriptors in a host-visible arena.

A single producer (the capture path) reserves a contiguous payload region,
copies bytes into it, then publishes a descriptor; a single consumer (the
drain worker) polls descriptors in publication order, copies the payload out,
and releases regions in reservation order.

Descriptor wire layout (little-endian, 64 bytes)::

    offset  size  field
    ------  ----  --------------------------------------------
    0       8     payload_offset   byte offset into payload ring
    8       8     payload_len      payload bytes (pre-padding)
    16      4     hook_id          capture point identity
    20      4     step_seq         inference step sequence
    24      8     ready_seq        publication sequence; sentinel = free
    32      32    reserved

Publication follows release/acquire discipline: all other fields are stored
first, ``ready_seq`` is written last. A slot is free if and only if its
``ready_seq`` holds the all-ones sentinel; the consumer resets the slot to
the sentinel when it consumes the descriptor.

Payload reservations are contiguous. When the tail end of the buffer cannot
hold a request, the head skips to offset 0 and the skipped bytes are recorded
as a dead region that is reclaimed when the consumer's releases sweep past it.
Capacities are multiples of the 16-byte copy unit.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

from .errors import (
    AllocationError,
    ConfigError,
    MetaRingFull,
    OutOfOrderRelease,
    PayloadRingFull,
    ProtocolError,
)

COPY_UNIT = 16
DESCRIPTOR_SIZE = 64
READY_SENTINEL = 0xFFFF_FFFF_FFFF_FFFF

# offset(u64) len(u64) hook_id(u32) step_seq(u32) ready_seq(u64); 32 pad bytes.
_DESC = struct.Struct("<QQIIQ")
_READY = struct.Struct("<Q")
_READY_OFF = 24

_DEAD = 0  # region kinds in the reservation FIFO
_LIVE = 1


def round_up_to_copy_unit(n: int) -> int:
    return (n + COPY_UNIT - 1) // COPY_UNIT * COPY_UNIT


@dataclass(frozen=True)
class RingConfig:
    """Sizing for one payload/meta ring pair."""

    payload_capacity: int
    meta_slots: int
    high_watermark: float = 0.8

    def __post_init__(self) -> None:
        if self.payload_capacity <= 0:
            raise ConfigError("payload_capacity must be positive")
        if self.payload_capacity % COPY_UNIT:
            raise ConfigError(
                f"payload_capacity must be a multiple of {COPY_UNIT} bytes"
            )
        if self.meta_slots <= 0:
            raise ConfigError("meta_slots must be positive")
        if not 0.0 < self.high_watermark <= 1.0:
            raise ConfigError("high_watermark must be in (0, 1]")


@dataclass(frozen=True)
class Descriptor:
    """Decoded view of one 64-byte meta-ring slot."""

    payload_offset: int
    payload_len: int
    hook_id: int
    step_seq: int
    ready_seq: int = 0

    def pack(self) -> bytes:
        body = _DESC.pack(
            self.payload_offset,
            self.payload_len,
            self.hook_id,
            self.step_seq,
            self.ready_seq,
        )
        return body + b"\x00" * (DESCRIPTOR_SIZE - _DESC.size)

    @classmethod
    def unpack(cls, raw: bytes | memoryview) -> "Descriptor":
        if len(raw) != DESCRIPTOR_SIZE:
            raise ValueError(f"descriptor must be {DESCRIPTOR_SIZE} bytes")
        off, length, hook_id, step_seq, ready = _DESC.unpack_from(raw, 0)
        return cls(off, length, hook_id, step_seq, ready)

    @property
    def reserved_len(self) -> int:
        """Bytes actually held in the payload ring (padded to the copy unit)."""
        return round_up_to_copy_unit(self.payload_len)


@dataclass(frozen=True)
class RingState:
    """Read-only snapshot used by planners and tests."""

    payload_head: int
    payload_tail: int
    occupancy: int
    payload_capacity: int
    meta_head: int
    meta_tail: int
    meta_slots: int
    high_watermark: float

    @property
    def free_bytes(self) -> int:
        return self.payload_capacity - self.occupancy

    @property
    def free_meta_slots(self) -> int:
        return self.meta_slots - (self.meta_head - self.meta_tail)

    @property
    def pressure(self) -> float:
        return self.occupancy / self.payload_capacity


class Arena:
    """Bump allocator modeling a finite memory arena."""

    def __init__(self, capacity: int | None = None, name: str = "device") -> None:
        self.capacity = capacity
        self.name = name
        self.allocated = 0

    def allocate(self, nbytes: int) -> int:
        if self.capacity is not None and self.allocated + nbytes > self.capacity:
            raise AllocationError(
                f"{self.name} arena cannot satisfy {nbytes} bytes "
                f"({self.allocated}/{self.capacity} in use)"
            )
        base = self.allocated
        self.allocated += nbytes
        return base


def _plan_reservation(
    head: int, tail: int, used: int, capacity: int, length: int
) -> tuple[int, int] | None:
    """Where would a reservation land? Returns (offset, dead_bytes) or None.

    Pure function shared by the real reservation path and by planners that
    replay a whole step's reservation sequence. The chosen offset never
    depends on ``tail`` (only success does), so replaying with a frozen tail
    while the consumer keeps releasing is always conservative.
    """
    if used + length > capacity:
        return None
    if used == 0:
        # Empty ring: no outstanding regions, so both indexes reset to zero
        # and the whole capacity is one contiguous run (bip-buffer style).
        return 0, 0
    if head <= tail and not (head == tail and used == capacity):
        # Wrapped: only the gap [head, tail) is writable and it is contiguous.
        if length <= tail - head:
            return head, 0
        return None
    end_space = capacity - head
    if length <= end_space:
        return head, 0
    # Skip the tail end; the skipped bytes block space until released past.
    if used + end_space + length <= capacity and length <= tail:
        return 0, end_space
    return None


class RingPair:
    """One payload ring plus one meta ring, single producer/single consumer.

    The handle may move between execution contexts, but the producer role
    (reserve/publish) and the consumer role (poll/release) must each stay on
    one context at a time.
    """

    def __init__(self, config: RingConfig, device_arena: Arena | None = None,
                 host_arena: Arena | None = None) -> None:
        self.config = config
        arena = device_arena if device_arena is not None else Arena()
        self.device_base = arena.allocate(config.payload_capacity)
        harena = host_arena if host_arena is not None else Arena(name="host")
        self.host_base = harena.allocate(config.meta_slots * DESCRIPTOR_SIZE)
        self._payload = bytearray(config.payload_capacity)
        self._meta = bytearray(config.meta_slots * DESCRIPTOR_SIZE)
        for slot in range(config.meta_slots):
            _READY.pack_into(self._meta, slot * DESCRIPTOR_SIZE + _READY_OFF,
                             READY_SENTINEL)
        self._head = 0          # next payload write offset
        self._tail = 0          # oldest un-released payload offset
        self._used = 0          # live + dead bytes between tail and head
        self._regions: deque[tuple[int, int, int]] = deque()  # (kind, off, len)
        self._meta_head = 0     # monotonic publish counter
        self._meta_tail = 0     # monotonic consume counter
        self._next_ready_seq = 0
        # Conservation counters.
        self.bytes_reserved = 0
        self.bytes_released = 0
        self.dead_created = 0
        self.dead_reclaimed = 0
        self.descriptors_published = 0
        self.descriptors_consumed = 0

    # -- shared ------------------------------------------------------------

    @property
    def capacity(self) -> int:
        return self.config.payload_capacity

    @property
    def occupancy(self) -> int:
        return self._used

    def state(self) -> RingState:
        return RingState(
            payload_head=self._head,
            payload_tail=self._tail,
            occupancy=self._used,
            payload_capacity=self.config.payload_capacity,
            meta_head=self._meta_head,
            meta_tail=self._meta_tail,
            meta_slots=self.config.meta_slots,
            high_watermark=self.config.high_watermark,
        )

    def free_meta_slots(self) -> int:
        return self.config.meta_slots - (self._meta_head - self._meta_tail)

    def would_fit(self, lengths: list[int], meta_entries: int | None = None) -> bool:
        """Could this reservation sequence succeed with no releases at all?

        Replays the allocator against the current geometry with a frozen
        tail. ``meta_entries`` defaults to one descriptor per reservation.
        """
        head, tail, used = self._head, self._tail, self._used
        cap = self.config.payload_capacity
        for length in lengths:
            if length <= 0 or length % COPY_UNIT:
                raise ValueError("lengths must be positive copy-unit multiples")
            plan = _plan_reservation(head, tail, used, cap, length)
            if plan is None:
                return False
            offset, dead = plan
            if used == 0:
                tail = 0  # reserving into an empty ring resets both indexes
            used += dead + length
            head = (offset + length) % cap
        entries = len(lengths) if meta_entries is None else meta_entries
        return entries <= self.free_meta_slots()

    def payload_view(self, offset: int, length: int) -> memoryview:
        """Writable window into the payload arena (no wrap within a region)."""
        if offset < 0 or offset + length > self.config.payload_capacity:
            raise ValueError("payload window out of range")
        return memoryview(self._payload)[offset:offset + length]

    # -- producer role -----------------------------------------------------

    def reserve_payload(self, length: int) -> int:
        """Reserve ``length`` contiguous bytes; returns the region offset.

        ``length`` must already be rounded up to the copy unit. Raises
        PayloadRingFull without mutating anything when the region does not
        fit, counting any dead-skip bytes the attempt would need.
        """
        if length <= 0:
            raise ValueError("reservation length must be positive")
        if length % COPY_UNIT:
            raise ValueError("reservation length must be a copy-unit multiple")
        if length > self.config.payload_capacity:
            raise ValueError("reservation exceeds payload capacity")
        plan = _plan_reservation(
            self._head, self._tail, self._used, self.config.payload_capacity,
            length,
        )
        if plan is None:
            raise PayloadRingFull(
                f"need {length} bytes, occupancy {self._used}"
                f"/{self.config.payload_capacity}"
            )
        offset, dead = plan
        if self._used == 0:
            self._tail = 0  # empty ring: placement restarted at offset zero
        if dead:
            self._regions.append((_DEAD, self._head, dead))
            self._used += dead
            self.dead_created += dead
        self._regions.append((_LIVE, offset, length))
        self._used += length
        self._head = (offset + length) % self.config.payload_capacity
        self.bytes_reserved += length
        return offset

    def publish(self, desc: Descriptor) -> int:
        """Publish a descriptor; returns its ready sequence number.

        The slot body is stored first and ``ready_seq`` last, matching the
        release-ordering discipline of the hardware protocol this models.
        """
        if self._meta_head - self._meta_tail >= self.config.meta_slots:
            raise MetaRingFull(
                f"all {self.config.meta_slots} descriptor slots are in flight"
            )
        slot = self._meta_head % self.config.meta_slots
        base = slot * DESCRIPTOR_SIZE
        current, = _READY.unpack_from(self._meta, base + _READY_OFF)
        if current != READY_SENTINEL:
            raise ProtocolError("descriptor slot reused before consumption")
        seq = self._next_ready_seq
        self._store_descriptor_body(slot, desc)
        self._store_ready_seq(slot, seq)
        self._meta_head += 1
        self._next_ready_seq += 1
        self.descriptors_published += 1
        return seq

    def _store_descriptor_body(self, slot: int, desc: Descriptor) -> None:
        base = slot * DESCRIPTOR_SIZE
        packed = desc.pack()
        self._meta[base:base + _READY_OFF] = packed[:_READY_OFF]
        self._meta[base + _READY_OFF + 8:base + DESCRIPTOR_SIZE] = (
            packed[_READY_OFF + 8:]
        )

    def _store_ready_seq(self, slot: int, seq: int) -> None:
        _READY.pack_into(self._meta, slot * DESCRIPTOR_SIZE + _READY_OFF, seq)

    # -- consumer role -----------------------------------------------------

    def ready_entries(self) -> int:
        return self._meta_head - self._meta_tail

    def ready_bytes(self) -> int:
        total = 0
        for desc in self._iter_ready(self.ready_entries()):
            total += desc.payload_len
        return total

    def peek_ready(self, max_entries: int) -> list[Descriptor]:
        """Descriptors that poll_ready would return, without consuming."""
        return list(self._iter_ready(max_entries))

    def _iter_ready(self, max_entries: int):
        count = min(max_entries, self._meta_head - self._meta_tail)
        for i in range(count):
            slot = (self._meta_tail + i) % self.config.meta_slots
            base = slot * DESCRIPTOR_SIZE
            ready, = _READY.unpack_from(self._meta, base + _READY_OFF)
            if ready == READY_SENTINEL:  # pragma: no cover - SPSC guards this
                raise ProtocolError("unpublished slot inside the ready window")
            yield Descriptor.unpack(self._meta[base:base + DESCRIPTOR_SIZE])

    def poll_ready(self, max_entries: int) -> list[Descriptor]:
        """Consume up to ``max_entries`` published descriptors, in order.

        Acquire discipline: ``ready_seq`` is examined first; only a
        non-sentinel value makes the remaining fields visible. Consumed slots
        are reset to the sentinel so the producer can reuse them.
        """
        if max_entries <= 0:
            return []
        out: list[Descriptor] = []
        while len(out) < max_entries and self._meta_tail < self._meta_head:
            slot = self._meta_tail % self.config.meta_slots
            base = slot * DESCRIPTOR_SIZE
            ready, = _READY.unpack_from(self._meta, base + _READY_OFF)
            if ready == READY_SENTINEL:
                break
            desc = Descriptor.unpack(self._meta[base:base + DESCRIPTOR_SIZE])
            if desc.ready_seq != self.descriptors_consumed:
                raise ProtocolError(
                    f"descriptor sequence {desc.ready_seq} out of order, "
                    f"expected {self.descriptors_consumed}"
                )
            self._store_ready_seq(slot, READY_SENTINEL)
            self._meta_tail += 1
            self.descriptors_consumed += 1
            out.append(desc)
        return out

    def release_payload(self, through_offset: int, length: int) -> None:
        """Release the oldest live region; must match reservation order.

        Any dead-skip region recorded ahead of it is reclaimed first. The
        (offset, length) pair must be exactly the oldest outstanding
        reservation, with ``length`` the padded (reserved) size.
        """
        while self._regions and self._regions[0][0] == _DEAD:
            _, off, dead_len = self._regions.popleft()
            self._tail = (off + dead_len) % self.config.payload_capacity
            self._used -= dead_len
            self.dead_reclaimed += dead_len
        if not self._regions:
            raise OutOfOrderRelease("no outstanding reservation to release")
        kind, off, res_len = self._regions[0]
        if off != through_offset or res_len != length:
            raise OutOfOrderRelease(
                f"release ({through_offset}, {length}) does not match the "
                f"oldest reservation ({off}, {res_len})"
            )
        self._regions.popleft()
        self._tail = (off + res_len) % self.config.payload_capacity
        self._used -= res_len
        self.bytes_released += res_len


def allocate_rings(config: RingConfig, device_arena: Arena | None = None,
                   host_arena: Arena | None = None) -> RingPair:
    """Allocate one ring pair from the given arenas (unbounded by default)."""
    return RingPair(config, device_arena=device_arena, host_arena=host_arena)
