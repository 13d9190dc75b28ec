"""Exception hierarchy shared across the staging, export, and policy layers."""

from __future__ import annotations


class TapflowError(Exception):
    """Base class for all library errors."""


class ConfigError(TapflowError):
    """Invalid or inconsistent configuration."""


class AllocationError(TapflowError):
    """The backing arena cannot satisfy an allocation request."""


class RingFull(TapflowError):
    """Backpressure: a reservation or publication cannot proceed right now.

    Both payload-ring and meta-ring exhaustion surface through this base so
    callers can treat them identically.
    """


class PayloadRingFull(RingFull):
    """Not enough contiguous payload bytes, accounting for the dead-skip."""


class MetaRingFull(RingFull):
    """No free descriptor slot (consumer has not recycled one yet)."""


class OutOfOrderRelease(TapflowError):
    """A payload region was released out of reservation order."""


class ProtocolError(TapflowError):
    """Single-producer/single-consumer discipline was violated."""


class MetaMismatch(TapflowError):
    """A drained descriptor does not line up with the metadata FIFO head.

    Fatal: indicates producer/consumer ordering corruption, never skipped.
    """


class PolicyUnderestimate(TapflowError):
    """A best-effort plan admitted more bytes than the ring could take."""


class StagingExhausted(TapflowError):
    """No staging buffer is currently available for a drain."""


class HookDisabled(TapflowError):
    """A capture was attempted on a disabled hook."""


class MissingShard(TapflowError):
    """A distributed join key lacks one or more tensor-parallel shards."""
