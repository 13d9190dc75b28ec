"""Command-line front end: run experiments, verify datasets, sweep overload.

Everything here is deterministic plumbing around the library: a YAML config
plus a seed fully determines every output byte (virtual-time modes only).
Results land in an output directory as plot-ready CSV plus one dataset
directory per (mode, ratio) point; no plots are rendered.

Exit codes: 0 ok, 1 verification mismatch or fatal protocol error,
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from pathlib import Path

from .config import AppConfig, RunManifest, load_config, normalize_mode
from .errors import ConfigError, TapflowError
from .hooks import install_hooks
from .oracle import compare_datasets, reference_records
from .rings import RingConfig
from .simulator import RING2, engine_for_ratio, generation_ratio, run_offline
from .sinks import NDJSON_NAME, SIDECAR_NAME, FileSink, record_from_header, \
    scan_dataset
from .workload import build_requests, build_schedule

CSV_COLUMNS = ("step", "mode", "ratio", "hooks_enabled", "ring_bytes",
               "wall_time", "stall_time", "drops", "exported_bytes",
               "overhead_pct")
SWEEP_COLUMNS = ("hooks_enabled", "ring_bytes", "ratio", "overhead_pct",
                 "stall_time", "stall_events", "first_stall_step", "drops",
                 "exported_bytes")
METRICS_NAME = "metrics.csv"
SWEEP_NAME = "sweep_overload.csv"
META_NAME = "run_meta.json"
ENV_OUT = "TAPFLOW_OUT"


def _fmt(value) -> str:
    """Stable scalar formatting: shortest float repr, plain ints."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    lines += [",".join(_fmt(row[c]) for c in columns) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _enabled_registry(cfg: AppConfig):
    registry = install_hooks(cfg.workload.model, list(cfg.hooks))
    if cfg.hook_filter is not None:
        registry.set_hook_filter(list(cfg.hook_filter))
    registry.commit_filter()
    return registry


def _point_label(mode: str, ratio: float | None) -> str:
    return mode if ratio is None else f"{mode}-r{ratio:g}"


def _fresh_dataset_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    for name in (NDJSON_NAME, SIDECAR_NAME, META_NAME):
        target = path / name
        if target.exists():
            target.unlink()
    return path


def cmd_run(cfg: AppConfig, manifest: RunManifest) -> int:
    """Execute every (mode, sweep point) and write CSV + datasets."""
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    registry = _enabled_registry(cfg)
    schedule = build_schedule(cfg.workload,
                              build_requests(cfg.workload, manifest.seed))
    hooks_enabled = len(registry.enabled_ids())
    rows = []
    summary_lines = []
    for mode in manifest.modes:
        for ratio in (manifest.sweep or (None,)):
            engine = cfg.engine if ratio is None else engine_for_ratio(
                ratio, schedule, registry, base=cfg.engine)
            actual_ratio = generation_ratio(schedule, registry, engine)
            label = _point_label(mode, ratio)
            dataset_dir = _fresh_dataset_dir(out / label)
            with FileSink(dataset_dir) as sink:
                result = run_offline(
                    cfg.workload, list(cfg.hooks), cfg.policy, mode=mode,
                    seed=manifest.seed, drain=cfg.drain, engine=engine,
                    ring=cfg.ring, sink=sink,
                    hook_filter=None if cfg.hook_filter is None
                    else list(cfg.hook_filter))
            m = result.metrics
            meta = {
                "seed": manifest.seed,
                "mode": mode,
                "ratio": actual_ratio,
                "policy_mode": cfg.policy.mode,
                "strategy": cfg.policy.strategy,
                "hook_filter": None if cfg.hook_filter is None
                else list(cfg.hook_filter),
                "keep_log": {str(s): list(ids)
                             for s, ids in sorted(result.keep_log.items())},
                "record_count": m.record_count,
            }
            (dataset_dir / META_NAME).write_text(
                json.dumps(meta, sort_keys=True, indent=2) + "\n",
                encoding="utf-8")
            for step, wall, stall, drops, nbytes in zip(
                    schedule, m.step_wall_times, m.step_stall_times,
                    m.step_dropped, m.step_export_bytes):
                rows.append({
                    "step": step.step_seq, "mode": mode,
                    "ratio": actual_ratio, "hooks_enabled": hooks_enabled,
                    "ring_bytes": cfg.ring.payload_capacity,
                    "wall_time": wall, "stall_time": stall, "drops": drops,
                    "exported_bytes": nbytes,
                    "overhead_pct": (wall - step.compute_time)
                    / step.compute_time * 100.0,
                })
            rows.append({
                "step": "summary", "mode": mode, "ratio": actual_ratio,
                "hooks_enabled": hooks_enabled,
                "ring_bytes": cfg.ring.payload_capacity,
                "wall_time": m.run_time, "stall_time": m.stall_time,
                "drops": m.dropped_request_steps,
                "exported_bytes": m.exported_bytes,
                "overhead_pct": m.overhead_pct,
            })
            summary_lines.append(
                f"{label}: overhead {m.overhead_pct:.2f}%  "
                f"stall {m.stall_time:.6f}s ({m.stall_events} events)  "
                f"drops {m.dropped_request_steps}  "
                f"exported {m.exported_bytes} bytes "
                f"({m.record_count} records)")
    _write_csv(out / METRICS_NAME, CSV_COLUMNS, rows)
    print(f"wrote {out / METRICS_NAME}")
    for line in summary_lines:
        print(line)
    return 0


def cmd_verify(cfg: AppConfig, dataset: str | Path) -> int:
    """Compare a stored dataset against the deterministic reference."""
    dataset = Path(dataset)
    meta_path = dataset / META_NAME
    if not meta_path.exists():
        raise ConfigError(f"no {META_NAME} next to the dataset at {dataset}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    seed = meta["seed"]
    keep_log = {int(s): tuple(ids) for s, ids in meta["keep_log"].items()}

    registry = install_hooks(cfg.workload.model, list(cfg.hooks))
    if meta.get("hook_filter") is not None:
        registry.set_hook_filter(list(meta["hook_filter"]))
    registry.commit_filter()
    schedule = build_schedule(cfg.workload, build_requests(cfg.workload,
                                                           seed))
    expected = reference_records(seed, schedule, registry, keep_log=keep_log)

    actual = []
    bad_checksums = 0
    for header, payload in scan_dataset(dataset):
        if zlib.crc32(payload) != header["checksum"]:
            bad_checksums += 1
        actual.append(record_from_header(header, payload))
    diff = compare_datasets(expected, actual)

    per_hook = diff.per_hook_counts()
    if per_hook:
        for hook_name in sorted(per_hook):
            print(f"{hook_name}: {per_hook[hook_name]} differing records")
    if bad_checksums:
        print(f"stored checksums failing: {bad_checksums}")
    if diff.identical and not bad_checksums:
        print(f"verified: {len(actual)} records match the reference exactly")
        return 0
    print(f"mismatch: {diff.summary()}")
    return 1


def cmd_sweep_overload(cfg: AppConfig, manifest: RunManifest) -> int:
    """Grid of ring2 runs over (hook count, ring capacity, ratio)."""
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = install_hooks(cfg.workload.model, list(cfg.hooks))
    names = [full.hook(i).name for i in full.enabled_ids()]
    counts = cfg.overload.hook_counts or tuple(sorted(
        {1, max(1, len(names) // 2), len(names)}))
    if max(counts) > len(names):
        raise ConfigError(
            f"hook count {max(counts)} exceeds the {len(names)} "
            "installed hooks")
    schedule = build_schedule(cfg.workload,
                              build_requests(cfg.workload, manifest.seed))
    rows = []
    for n in counts:
        subset = names[:n]
        scratch = install_hooks(cfg.workload.model, list(cfg.hooks))
        scratch.set_hook_filter(subset)
        scratch.commit_filter()
        for capacity in cfg.overload.ring_capacities:
            ring = RingConfig(payload_capacity=capacity,
                              meta_slots=cfg.ring.meta_slots)
            for ratio in cfg.overload.ratios:
                engine = engine_for_ratio(ratio, schedule, scratch,
                                          base=cfg.engine)
                result = run_offline(
                    cfg.workload, list(cfg.hooks), cfg.policy, mode=RING2,
                    seed=manifest.seed, drain=cfg.drain, engine=engine,
                    ring=ring, hook_filter=subset)
                m = result.metrics
                rows.append({
                    "hooks_enabled": n, "ring_bytes": capacity,
                    "ratio": ratio, "overhead_pct": m.overhead_pct,
                    "stall_time": m.stall_time,
                    "stall_events": m.stall_events,
                    "first_stall_step": m.first_stall_step,
                    "drops": m.dropped_request_steps,
                    "exported_bytes": m.exported_bytes,
                })
                print(f"hooks {n}  ring {capacity}  ratio {ratio:g}: "
                      f"overhead {m.overhead_pct:.2f}%  first stall "
                      f"{m.first_stall_step}  drops "
                      f"{m.dropped_request_steps}")
    _write_csv(out / SWEEP_NAME, SWEEP_COLUMNS, rows)
    print(f"wrote {out / SWEEP_NAME}")
    return 0


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="tapflow",
        description="Simulated asynchronous activation capture: run "
                    "experiments, verify datasets, sweep overload onset.")
    parser.add_argument("--config", required=True,
                        help="YAML experiment description")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None,
                        help=f"output directory (or ${ENV_OUT})")
    parser.add_argument("--mode", default=None,
                        help="comma-separated mode list to run")
    parser.add_argument("--sweep", default=None,
                        help="comma-separated generation/bandwidth ratios")
    parser.add_argument("--verify", metavar="DATASET", default=None,
                        help="verify a dataset directory instead of running")
    parser.add_argument("--sweep-overload", action="store_true",
                        help="emit the overload-onset grid instead of "
                             "running")
    return parser.parse_args(argv)


def _manifest_from(cfg: AppConfig, args) -> RunManifest:
    if args.sweep is not None:
        try:
            sweep = tuple(float(tok) for tok in args.sweep.split(","))
        except ValueError:
            raise ConfigError(f"cannot parse --sweep {args.sweep!r}") from None
    else:
        sweep = cfg.sweep
    if args.mode is not None:
        modes = tuple(normalize_mode(tok.strip())
                      for tok in args.mode.split(","))
    else:
        modes = cfg.modes
    out = args.out or os.environ.get(ENV_OUT) or cfg.out_dir
    seed = cfg.seed if args.seed is None else args.seed
    return RunManifest(config_path=args.config, seed=seed, out_dir=out,
                       modes=modes, sweep=sweep)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        cfg = load_config(args.config)
        manifest = _manifest_from(cfg, args)
        if args.verify is not None:
            return cmd_verify(cfg, args.verify)
        if args.sweep_overload:
            return cmd_sweep_overload(cfg, manifest)
        return cmd_run(cfg, manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TapflowError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
