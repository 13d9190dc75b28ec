"""Declarative run configuration: YAML in, validated objects out.

One file describes a complete experiment: the synthetic workload, the rank
topology, the hook set, the backpressure policy, drain thresholds, the copy
engine, ring sizing, and what the command-line front end should execute.
Every section is optional except ``workload`` and ``hooks``; omitted keys
fall back to library defaults. Unknown keys are rejected rather than
ignored so a typo cannot silently change an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError
from .exporter import DrainConfig
from .hooks import DeviceCopyEngine, DType, HookSpec
from .policy import Predicate, PolicyConfig
from .rings import RingConfig
from .simulator import CALLBACK, DEFAULT_RING, MODES, RING2, SYNC_OFFLOAD
from .workload import RankTopology, WorkloadSpec

_MODE_ALIASES = {
    "synchronous": SYNC_OFFLOAD,
    "sync": SYNC_OFFLOAD,
    "callback": CALLBACK,
}


@dataclass(frozen=True)
class RunManifest:
    """What the front end executes: modes and sweep points for one config."""

    config_path: str
    seed: int
    out_dir: str
    modes: tuple[str, ...]
    sweep: tuple[float, ...] | None

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(
                    f"unknown mode {mode!r}; expected one of {MODES}")
        if self.sweep is not None:
            if not self.sweep:
                raise ConfigError("sweep needs at least one ratio")
            if any(r <= 0 for r in self.sweep):
                raise ConfigError("sweep ratios must be positive")


@dataclass(frozen=True)
class OverloadGrid:
    """Axes for the overload-onset sweep; empty hook_counts means 1..all."""

    hook_counts: tuple[int, ...] = ()
    ring_capacities: tuple[int, ...] = (256 << 10, 1 << 20, 4 << 20)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)

    def __post_init__(self) -> None:
        if any(n <= 0 for n in self.hook_counts):
            raise ConfigError("hook counts must be positive")
        if not self.ring_capacities or any(c <= 0
                                           for c in self.ring_capacities):
            raise ConfigError("ring capacities must be positive")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ConfigError("sweep ratios must be positive")


@dataclass(frozen=True)
class AppConfig:
    """Everything a run needs, already validated and cross-checked."""

    workload: WorkloadSpec
    hooks: tuple[HookSpec, ...]
    topology: RankTopology = RankTopology()
    hook_filter: tuple[str, ...] | None = None
    policy: PolicyConfig = PolicyConfig()
    drain: DrainConfig = DrainConfig()
    engine: DeviceCopyEngine = DeviceCopyEngine()
    ring: RingConfig = DEFAULT_RING
    seed: int = 0
    out_dir: str = "tapflow-out"
    modes: tuple[str, ...] = (RING2,)
    sweep: tuple[float, ...] | None = None
    overload: OverloadGrid = OverloadGrid()


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    sub = raw.get(name)
    if sub is None:
        return {}
    if not isinstance(sub, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = sorted(set(sub) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    return sub


def _build(cls, section: dict, caster=None):
    try:
        return cls(**(caster(section) if caster else section))
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} settings: {exc}") from None


def normalize_mode(token: str) -> str:
    mode = _MODE_ALIASES.get(token, token)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {token!r}; expected one of {MODES}")
    return mode


def _parse_hooks(raw) -> tuple[HookSpec, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("'hooks' must be a non-empty list")
    specs = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ConfigError(f"hook #{i} must be a mapping")
        unknown = sorted(set(entry) - {"name", "dims", "dtype", "per_layer",
                                       "layer_index"})
        if unknown:
            raise ConfigError(f"unknown keys in hook #{i}: {unknown}")
        try:
            specs.append(HookSpec(
                name=entry["name"],
                dims=tuple(entry["dims"]),
                dtype=DType.of(entry["dtype"]),
                layer_index=entry.get("layer_index"),
                per_layer=bool(entry.get("per_layer", False)),
            ))
        except KeyError as exc:
            raise ConfigError(f"hook #{i} is missing {exc}") from None
    return tuple(specs)


def _parse_policy(section: dict) -> PolicyConfig:
    kwargs = dict(section)
    pred = kwargs.pop("predicate", None)
    if pred is not None:
        unknown = sorted(set(pred) - {"request_ids", "prompt_prefix"})
        if unknown:
            raise ConfigError(f"unknown keys in predicate: {unknown}")
        ids = pred.get("request_ids")
        kwargs["predicate"] = Predicate(
            request_ids=None if ids is None else frozenset(ids),
            prompt_prefix=pred.get("prompt_prefix"),
        )
    return _build(PolicyConfig, kwargs)


def load_config(path: str | Path) -> AppConfig:
    """Parse and validate one YAML experiment description."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    unknown = sorted(set(raw) - {"workload", "topology", "hooks",
                                 "hook_filter", "policy", "drain", "engine",
                                 "ring", "run", "sweep_overload"})
    if unknown:
        raise ConfigError(f"unknown top-level sections: {unknown}")

    workload = _build(WorkloadSpec, _section(raw, "workload", {
        "layers", "hidden", "batch", "prefill_tokens", "decode_steps",
        "prefill_compute_time", "decode_compute_time", "arrival"}),
        caster=lambda s: {**s, "arrival": tuple(s["arrival"])}
        if s.get("arrival") is not None else s)
    if "hooks" not in raw:
        raise ConfigError("config needs a 'hooks' section")
    hooks = _parse_hooks(raw["hooks"])

    topology = _build(RankTopology, _section(raw, "topology",
                                             {"tp_degree", "pp_stages"}))
    topology.validate_model(workload.model)

    hook_filter = raw.get("hook_filter")
    if hook_filter is not None:
        if (not isinstance(hook_filter, list)
                or not all(isinstance(n, str) for n in hook_filter)):
            raise ConfigError("'hook_filter' must be a list of hook names")
        hook_filter = tuple(hook_filter)

    policy = _parse_policy(_section(raw, "policy", {
        "mode", "strategy", "predicate", "pressure_watermark"}))
    drain = _build(DrainConfig, _section(raw, "drain", {
        "min_ready_entries", "min_ready_bytes", "max_wait",
        "staging_buffer_size", "staging_buffer_count"}))
    engine = _build(DeviceCopyEngine, _section(raw, "engine", {
        "d2d_bandwidth", "d2h_bandwidth", "d2h_latency",
        "d2d_launch_overhead", "host_bandwidth"}))
    ring_section = _section(raw, "ring", {"payload_capacity", "meta_slots"})
    ring = _build(RingConfig, ring_section) if ring_section else DEFAULT_RING

    run = _section(raw, "run", {"seed", "out", "modes", "sweep"})
    modes = tuple(normalize_mode(m) for m in run.get("modes", [RING2]))
    sweep = run.get("sweep")
    if sweep is not None:
        sweep = tuple(float(r) for r in sweep)

    grid = _build(OverloadGrid, _section(raw, "sweep_overload", {
        "hook_counts", "ring_capacities", "ratios"}),
        caster=lambda s: {k: tuple(v) for k, v in s.items()})

    return AppConfig(
        workload=workload, hooks=hooks, topology=topology,
        hook_filter=hook_filter, policy=policy, drain=drain, engine=engine,
        ring=ring, seed=int(run.get("seed", 0)), out_dir=run.get(
            "out", "tapflow-out"),
        modes=modes, sweep=sweep, overload=grid)
