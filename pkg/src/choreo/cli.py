"""Command line entry point: QoS benchmarks and choreography scenarios.

Both modes read a JSON configuration document and write artifacts into an
output directory.  One master seed deterministically derives every
component seed, so repeated runs with the same config and seed produce
byte-identical outputs.  Files are written atomically (write then rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from .errors import ConfigError
from .qos import SweepSpec, sweep_metadata, sweep_thresholds, write_curve_csvs
from .runtime import ScenarioSpec, run_scenario
from .simnet import derive_seed, write_event_log


def _atomic_write(path: Path, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError("(file)", f"{path}: no such file")
    except json.JSONDecodeError as exc:
        raise ConfigError("(file)", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")


def build_sweep_spec(doc: dict, seed: int | None = None) -> tuple[int, SweepSpec]:
    """Resolve the master seed and derive the per-component seeds."""
    master = seed if seed is not None else int(doc.get("master_seed", 0))
    doc = dict(doc)
    doc.setdefault("trace", {})
    if isinstance(doc["trace"], dict):
        doc["trace"] = {**doc["trace"], "seed": derive_seed(master, "trace")}
    if isinstance(doc.get("loss"), dict):
        doc["loss"] = {**doc["loss"], "seed": derive_seed(master, "loss")}
    return master, SweepSpec.from_json(doc)


def run_benchmark(config_path: str, out_dir: str, seed: int | None) -> int:
    """Sweep every configured detector over one seeded trace; write curve CSVs."""
    doc = _load_config(config_path)
    master, spec = build_sweep_spec(doc, seed)
    reports = sweep_thresholds(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_curve_csvs(reports, out)
    metadata = {"master_seed": master, **sweep_metadata(spec)}
    _atomic_write(out / "benchmark_metadata.json", json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    for kind in sorted(paths):
        print(f"wrote {paths[kind]}")
    print(f"wrote {out / 'benchmark_metadata.json'}")
    return 0


def run_scenario_cmd(config_path: str, out_dir: str, seed: int | None, check: bool) -> int:
    """Run a choreography scenario; write the event log and final state dump."""
    doc = _load_config(config_path)
    spec = ScenarioSpec.from_json(doc)
    result = run_scenario(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_event_log(result.events, out / "scenario_events.jsonl")
    _atomic_write(
        out / "scenario_state.json",
        json.dumps(result.final_state(), indent=2, sort_keys=True) + "\n",
    )
    print(f"wrote {out / 'scenario_events.jsonl'}")
    print(f"wrote {out / 'scenario_state.json'}")
    failed = []
    for a in result.assertions:
        status = "PASS" if a.passed else "FAIL"
        print(f"[{status}] {a.name}: {a.detail}")
        if not a.passed:
            failed.append(a.name)
    if check and failed:
        print(f"{len(failed)} assertion(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="choreo",
        description="Run failure-detector QoS benchmarks and choreography scenarios.",
    )
    parser.add_argument("--mode", required=True, choices=("benchmark", "scenario"))
    parser.add_argument("--config", required=True, help="path to the JSON configuration")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    check = parser.add_mutually_exclusive_group()
    check.add_argument(
        "--assert", dest="check", action="store_true", default=True,
        help="fail the run when scenario assertions fail (default)",
    )
    check.add_argument(
        "--no-assert", dest="check", action="store_false",
        help="report scenario assertions without failing the run",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "benchmark":
            return run_benchmark(args.config, args.out, args.seed)
        return run_scenario_cmd(args.config, args.out, args.seed, args.check)
    except ConfigError as exc:
        print(f"config error in {args.config}: {exc.field}: {exc.message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
