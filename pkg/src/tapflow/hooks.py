"""Capture points: hook declarations, tensor views, and the staging copy.

A hook models one observation point in the model graph. Installing hooks
against a model expands per-layer declarations into one concrete hook per
layer (layer by layer, declaration order within a layer) followed by the
global hooks, which models end-of-graph tensors such as the final norm and
logits. Declaration order is firing order within a step.

The capture operation gather-compacts the kept batch slices of a tensor view
into one contiguous reserved payload region: whole 16-byte chunks first, the
residual tail bytes separately, mirroring the 128-bit copy path of the
device kernel this simulates. Disabled hooks are true identities: no bytes
move, no time is charged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, HookDisabled, MetaRingFull
from .rings import COPY_UNIT, Descriptor, RingPair, round_up_to_copy_unit

DTYPE_WIDTHS = {
    "u8": 1, "i8": 1, "f16": 2, "bf16": 2, "f32": 4, "i32": 4,
    "f64": 8, "i64": 8,
}

# Fixed cost of launching one capture kernel, seconds.
D2D_LAUNCH_OVERHEAD = 2e-6


@dataclass(frozen=True)
class DType:
    name: str
    width: int

    @classmethod
    def of(cls, name: str) -> "DType":
        try:
            return cls(name, DTYPE_WIDTHS[name])
        except KeyError:
            raise ConfigError(f"unknown dtype {name!r}") from None


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    hidden: int

    def __post_init__(self) -> None:
        if self.layers <= 0 or self.hidden <= 0:
            raise ConfigError("layers and hidden must be positive")


TOKENS_AXIS = "tokens"
HIDDEN_AXIS = "hidden"


@dataclass(frozen=True)
class HookSpec:
    """One capture point, or a per-layer template before installation.

    ``dims`` gives the per-request shape as literal extents and/or the named
    axes ``tokens`` (this step's token count) and ``hidden`` (the model or
    shard width). The byte size of one request slice is the dim product times
    the dtype width, so it is always a positive dtype-width multiple.
    """

    name: str
    dims: tuple[int | str, ...]
    dtype: DType
    layer_index: int | None = None
    per_layer: bool = False

    def __post_init__(self) -> None:
        if not self.dims:
            raise ConfigError(f"hook {self.name!r} needs at least one dim")
        for d in self.dims:
            if isinstance(d, str):
                if d not in (TOKENS_AXIS, HIDDEN_AXIS):
                    raise ConfigError(f"unknown axis {d!r} in hook {self.name!r}")
            elif d <= 0:
                raise ConfigError(f"non-positive dim in hook {self.name!r}")
        if self.per_layer and self.layer_index is not None:
            raise ConfigError("per_layer templates cannot carry a layer index")

    @property
    def sharded(self) -> bool:
        """Does the tensor split across tensor-parallel ranks?"""
        return HIDDEN_AXIS in self.dims

    @property
    def hidden_axis(self) -> int:
        return self.dims.index(HIDDEN_AXIS)

    def resolve_shape(self, tokens: int, hidden: int) -> tuple[int, ...]:
        out = []
        for d in self.dims:
            if d == TOKENS_AXIS:
                out.append(tokens)
            elif d == HIDDEN_AXIS:
                out.append(hidden)
            else:
                out.append(d)
        return tuple(out)

    def slice_bytes(self, tokens: int, hidden: int) -> int:
        return math.prod(self.resolve_shape(tokens, hidden)) * self.dtype.width


class HookRegistry:
    """Concrete hooks in firing order, with step-boundary enable filtering.

    ``set_hook_filter`` stages a new enabled set; it takes effect when
    ``commit_filter`` runs at the next step boundary.
    """

    def __init__(self, model: ModelSpec, hooks: list[HookSpec],
                 hidden_extent: int | None = None) -> None:
        self.model = model
        self.hooks = list(hooks)
        self.hidden_extent = model.hidden if hidden_extent is None else hidden_extent
        names = [h.name for h in self.hooks]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate concrete hook names")
        self._id_of = {h.name: i for i, h in enumerate(self.hooks)}
        self._enabled = set(range(len(self.hooks)))
        self._pending: set[int] | None = None

    def __len__(self) -> int:
        return len(self.hooks)

    def hook(self, hook_id: int) -> HookSpec:
        return self.hooks[hook_id]

    def id_of(self, name: str) -> int:
        try:
            return self._id_of[name]
        except KeyError:
            raise ConfigError(f"unknown hook {name!r}") from None

    def is_enabled(self, hook_id: int) -> bool:
        return hook_id in self._enabled

    def enabled_ids(self) -> list[int]:
        return [i for i in range(len(self.hooks)) if i in self._enabled]

    def set_hook_filter(self, enabled_names: list[str] | None) -> None:
        """Stage an enabled set (None = everything); applies at the boundary."""
        if enabled_names is None:
            self._pending = set(range(len(self.hooks)))
        else:
            self._pending = {self.id_of(n) for n in enabled_names}

    def commit_filter(self) -> None:
        if self._pending is not None:
            self._enabled = self._pending
            self._pending = None

    def slice_bytes(self, hook_id: int, tokens: int) -> int:
        return self.hooks[hook_id].slice_bytes(tokens, self.hidden_extent)


def install_hooks(model: ModelSpec, specs: list[HookSpec],
                  layers: list[int] | None = None,
                  hidden_extent: int | None = None,
                  include_globals: bool = True) -> HookRegistry:
    """Expand declarations into a registry of concrete hooks.

    Per-layer templates produce one hook per layer named ``name[L]``, ordered
    layer by layer; global declarations follow in declaration order.
    ``layers`` restricts expansion to a subset and ``include_globals`` places
    the end-of-graph hooks (pipeline stage ownership); ``hidden_extent``
    overrides the hidden width (tensor-parallel shard).
    """
    layer_ids = list(range(model.layers)) if layers is None else list(layers)
    concrete: list[HookSpec] = []
    for layer in layer_ids:
        for spec in specs:
            if spec.per_layer:
                concrete.append(HookSpec(
                    name=f"{spec.name}[{layer}]",
                    dims=spec.dims,
                    dtype=spec.dtype,
                    layer_index=layer,
                ))
    for spec in specs:
        if not spec.per_layer:
            if spec.layer_index is not None:
                if spec.layer_index in layer_ids:
                    concrete.append(spec)
            elif include_globals:
                concrete.append(spec)
    return HookRegistry(model, concrete, hidden_extent=hidden_extent)


@dataclass
class TensorView:
    """A contiguous batch-major tensor surface handed to a capture.

    ``shape`` is (batch, *per_request_dims); per-request slices are uniform.
    """

    data: bytes | bytearray | memoryview
    shape: tuple[int, ...]
    dtype: DType

    def __post_init__(self) -> None:
        if len(self.shape) < 1 or any(d <= 0 for d in self.shape):
            raise ConfigError("view shape must be non-empty and positive")
        if len(self.data) != math.prod(self.shape) * self.dtype.width:
            raise ConfigError(
                f"view of shape {self.shape} x {self.dtype.name} needs "
                f"{math.prod(self.shape) * self.dtype.width} bytes, "
                f"got {len(self.data)}"
            )

    @property
    def batch(self) -> int:
        return self.shape[0]

    @property
    def slice_size(self) -> int:
        return math.prod(self.shape[1:]) * self.dtype.width

    def slice(self, index: int) -> memoryview:
        size = self.slice_size
        return memoryview(self.data)[index * size:(index + 1) * size]


@dataclass(frozen=True)
class DeviceCopyEngine:
    """Bandwidth/latency model for device copies and host transfers."""

    d2d_bandwidth: float = math.inf
    d2h_bandwidth: float = 8e9
    d2h_latency: float = 10e-6
    d2d_launch_overhead: float = D2D_LAUNCH_OVERHEAD
    host_bandwidth: float = 64e9        # pageable memcpy rate

    def __post_init__(self) -> None:
        if min(self.d2d_bandwidth, self.d2h_bandwidth,
               self.host_bandwidth) <= 0:
            raise ConfigError("bandwidths must be positive")
        if self.d2h_latency < 0 or self.d2d_launch_overhead < 0:
            raise ConfigError("latencies cannot be negative")

    def d2d_time(self, nbytes: int) -> float:
        return self.d2d_launch_overhead + nbytes / self.d2d_bandwidth

    def d2h_time(self, nbytes: int) -> float:
        return self.d2h_latency + nbytes / self.d2h_bandwidth

    def host_time(self, nbytes: int) -> float:
        return nbytes / self.host_bandwidth


@dataclass(frozen=True)
class CaptureOutcome:
    bytes_written: int
    copy_time: float
    stalled: float = 0.0


def _gather_compact(dst: memoryview, view: TensorView, kept: list[int]) -> None:
    # Whole copy-unit chunks move first, the residual tail separately; both
    # paths are exercised whenever the slice size is not a 16-multiple.
    size = view.slice_size
    body = size - size % COPY_UNIT
    pos = 0
    for index in kept:
        src = view.slice(index)
        if body:
            dst[pos:pos + body] = src[:body]
        if body != size:
            dst[pos + body:pos + size] = src[body:]
        pos += size


def capture(
    registry: HookRegistry,
    ring: RingPair,
    hook_id: int,
    view: TensorView,
    keep: tuple[int, ...] | list[int],
    engine: DeviceCopyEngine | None = None,
    *,
    step_seq: int = 0,
    defer_publish: bool = False,
) -> CaptureOutcome | tuple[CaptureOutcome, Descriptor]:
    """Gather-compact the kept slices into the ring and publish a descriptor.

    Raises PayloadRingFull/MetaRingFull as backpressure without reserving
    anything (meta availability is checked before the payload reservation, so
    a successful reservation always publishes).

    With ``defer_publish`` the descriptor is returned unpublished so a
    simulator can charge the copy time before making it visible.
    """
    hook = registry.hook(hook_id)
    if not registry.is_enabled(hook_id):
        raise HookDisabled(f"hook {hook.name!r} is disabled")
    if len(keep) != view.batch:
        raise ConfigError(
            f"keep vector length {len(keep)} != batch {view.batch}")
    engine = engine if engine is not None else DeviceCopyEngine()
    kept = [i for i, flag in enumerate(keep) if flag]
    if not kept:
        outcome = CaptureOutcome(bytes_written=0, copy_time=0.0)
        return (outcome, None) if defer_publish else outcome
    total = len(kept) * view.slice_size
    if ring.free_meta_slots() == 0:
        raise MetaRingFull("no descriptor slot for this capture")
    offset = ring.reserve_payload(round_up_to_copy_unit(total))
    _gather_compact(ring.payload_view(offset, total), view, kept)
    desc = Descriptor(payload_offset=offset, payload_len=total,
                      hook_id=hook_id, step_seq=step_seq)
    outcome = CaptureOutcome(bytes_written=total,
                             copy_time=engine.d2d_time(total))
    if defer_publish:
        return outcome, desc
    ring.publish(desc)
    return outcome
