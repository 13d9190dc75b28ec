"""Asynchronous activation-capture substrate with a virtual-time simulator.

The library models the full observability path of an inference server:
capture hooks gather per-request tensor slices into a dual ring buffer
(payload bytes plus fixed-size descriptors), a bounded three-stage exporter
drains, stages, and sinks them, and per-step backpressure policies decide
what to keep when generation outruns export bandwidth. A discrete-event
simulator drives the whole substrate against synthetic workloads under
configurable bandwidth models; a wall-clock runner exercises the same
contracts under real threads.
"""

from .config import AppConfig, OverloadGrid, RunManifest, load_config
from .errors import (
    AllocationError,
    ConfigError,
    HookDisabled,
    MetaMismatch,
    MetaRingFull,
    MissingShard,
    OutOfOrderRelease,
    PayloadRingFull,
    PolicyUnderestimate,
    ProtocolError,
    RingFull,
    StagingExhausted,
    TapflowError,
)
from .events import EventLoop, Signal, Task, Timeout, Wait, WaitAny
from .exporter import (
    STAGE_QUEUE_SLOTS,
    DrainBatch,
    DrainConfig,
    DrainEvent,
    ExportPipeline,
    PageableBatch,
    StagingPool,
    split_payload,
)
from .hooks import (
    DType,
    DeviceCopyEngine,
    HookRegistry,
    HookSpec,
    ModelSpec,
    TensorView,
    capture,
    install_hooks,
)
from .joins import JoinResult, MissingShards, join_records
from .oracle import (
    DatasetDiff,
    compare_datasets,
    firing_records,
    reference_records,
)
from .policy import (
    BEST_EFFORT,
    COMPLETENESS,
    DROP_RECENT,
    KEEP_BY_PATTERN,
    PolicyConfig,
    Predicate,
    StepPlan,
    StepRequest,
    estimate_step_bytes,
    prepare_step,
)
from .records import CaptureRecord, TensorMeta, TensorMetaFIFO
from .rings import (
    COPY_UNIT,
    DESCRIPTOR_SIZE,
    READY_SENTINEL,
    Arena,
    Descriptor,
    RingConfig,
    RingPair,
    allocate_rings,
    round_up_to_copy_unit,
)
from .simulator import (
    CALLBACK,
    DEFAULT_RING,
    MODES,
    NO_CAPTURE,
    RING2,
    SYNC_OFFLOAD,
    MetricsReport,
    RunResult,
    engine_for_ratio,
    generation_ratio,
    run_multirank,
    run_offline,
    total_capture_bytes,
)
from .sinks import (
    FileSink,
    NullSink,
    StreamSink,
    read_dataset,
    read_stream,
    scan_dataset,
)
from .wallclock import ThreadedRunResult, run_threaded
from .workload import (
    RankTopology,
    Request,
    ScheduledStep,
    WorkloadSpec,
    build_requests,
    build_schedule,
    full_tensor,
    request_payload,
)

__version__ = "0.1.0"
