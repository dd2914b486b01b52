"""Command-line entry point: one run, or the full method x size grid.

Configuration is a flat JSON document.  Precedence is command-line flag, then
config file, then built-in default.  ``rng_seed`` has no default.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .consensus.rules import METHODS, ConfigError, ConsensusRules, default_committee_target
from .metrics import dumps_summary, sort_rows
from .monitor import ParseError, ingest_csv
from .netsim import SimConfig, run_simulation, write_artifact

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3, 4
GRID_SIZES = (5, 10, 20, 40)

# shorthand keys accepted in config files, mirroring the flag names
ALIASES = {"consensus": "method", "nodes": "n_nodes", "difficulty": "difficulty_nibbles",
           "seed": "rng_seed"}


def bundled_data() -> Path:
    return Path(str(resources.files("chainmon") / "data" / "synthetic_temperatures.csv"))


@dataclass
class RunConfig:
    rng_seed: int
    data: Path
    out: Path
    sim: SimConfig
    rules: ConsensusRules
    methods: tuple[str, ...] = METHODS
    node_counts: tuple[int, ...] = GRID_SIZES

    def resolved(self) -> dict:
        """The fully resolved configuration embedded in every artifact."""
        doc = {**self.sim.to_dict(), **self.rules.to_dict()}
        doc.update(data=str(self.data), out=str(self.out), rng_seed=self.rng_seed)
        return doc


_SIM_FIELDS = {f.name for f in fields(SimConfig)}
_RULE_FIELDS = ConsensusRules.field_names()
_OTHER = {"data", "out", "methods", "node_counts", "rng_seed"}


def load_config_file(path: str | Path | None) -> tuple[dict, Path | None]:
    if path is None:
        return {}, None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: expected a JSON object")
    return doc, p.parent


def _normalize(doc: dict) -> dict:
    out = {}
    for k, v in doc.items():
        key = ALIASES.get(k, k)
        if key not in _SIM_FIELDS | _RULE_FIELDS | _OTHER:
            raise ConfigError(f"unknown config key {k!r}")
        out[key] = v
    return out


def resolve(file_doc: dict, overrides: dict, base_dir: Path | None = None) -> RunConfig:
    """Merge defaults <- file <- flags and validate."""
    merged = _normalize(file_doc)
    merged.update({k: v for k, v in _normalize(overrides).items() if v is not None})
    if merged.get("rng_seed") is None:
        raise ConfigError("rng_seed is required (flag --seed or config key rng_seed)")
    try:
        seed = int(merged["rng_seed"])
    except (TypeError, ValueError):
        raise ConfigError(f"rng_seed must be an integer, got {merged['rng_seed']!r}") from None
    if not 0 <= seed < 2**64:
        raise ConfigError("rng_seed must fit in 64 bits")

    data = merged.get("data")
    if data is None:
        data_path = bundled_data()
    else:
        data_path = Path(data)
        from_file = overrides.get("data") is None
        if from_file and base_dir is not None and not data_path.is_absolute():
            data_path = base_dir / data_path  # file paths are relative to the config file
    if not data_path.is_file():
        raise ConfigError(f"data file not found: {data_path}")
    out = Path(merged.get("out", "chainmon-out"))

    sim_kw = {k: merged[k] for k in _SIM_FIELDS if k in merged}
    sim_kw["rng_seed"] = seed
    rule_kw = {k: merged[k] for k in _RULE_FIELDS if k in merged}
    try:
        sim = SimConfig(**sim_kw)
        if rule_kw.get("committee_target") is None:
            rule_kw["committee_target"] = default_committee_target(sim.n_nodes)
        rules = ConsensusRules(**rule_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    methods = tuple(merged.get("methods", METHODS))
    sizes = tuple(int(n) for n in merged.get("node_counts", GRID_SIZES))
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods or not sizes or min(sizes) < 1:
        raise ConfigError(f"grid needs methods from {METHODS} and positive node counts")
    return RunConfig(seed, data_path, out, sim, rules, methods, sizes)


def execute(cfg: RunConfig, out_dir: Path, streams=None, trace: bool = False) -> tuple[int, dict]:
    """Run one simulation and write its artifact.  Returns (exit code, summary document)."""
    if streams is None:
        streams = ingest_csv(cfg.data)
    result = run_simulation(cfg.sim, cfg.rules, streams)
    resolved = cfg.resolved()
    resolved["out"] = str(out_dir)
    write_artifact(result, out_dir, resolved, trace=trace or cfg.sim.trace)
    if not result.ok:
        for p in result.problems:
            print(f"invariant violated: {p}", file=sys.stderr)
        print(f"event trace written to {out_dir / 'trace.jsonl'}", file=sys.stderr)
        return EXIT_INVARIANT, result.summary(resolved)
    return EXIT_OK, result.summary(resolved)


def run(config_path: str | Path | None, overrides: dict, trace: bool = False) -> int:
    try:
        doc, base = load_config_file(config_path)
        cfg = resolve(doc, overrides, base)
        code, _ = execute(cfg, cfg.out, trace=trace)
        if code == EXIT_OK:
            print(f"run complete: {cfg.out}")
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def grid_cells(cfg: RunConfig) -> list[tuple[int, str, int]]:
    return [(i, m, n) for i, (m, n) in enumerate((m, n) for m in cfg.methods for n in cfg.node_counts)]


def grid(config_path: str | Path | None, overrides: dict | None = None, trace: bool = False) -> int:
    """Every (method, size) cell with seed ``base + cell index``; one combined summary."""
    overrides = overrides or {}
    try:
        doc, base_dir = load_config_file(config_path)
        base = resolve(doc, overrides, base_dir)
        streams = ingest_csv(base.data)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

    rows, cells = [], []
    failed = False
    for idx, method, n in grid_cells(base):
        cell_dir = base.out / f"{method}_n{n}"
        cell_over = {**{k: v for k, v in overrides.items() if k not in ("consensus", "nodes")},
                     "consensus": method, "nodes": n, "seed": base.rng_seed + idx}
        try:
            cfg = resolve(doc, cell_over, base_dir)
            code, summary = execute(cfg, cell_dir, streams=streams, trace=trace)
            rows.extend(summary["rows"])
            status = "ok" if code == EXIT_OK else "invariant_violation"
        except ConfigError as exc:
            status, code = f"config_error: {exc}", EXIT_CONFIG
        except Exception as exc:  # a crashing cell must not stop the grid
            status, code = f"error: {type(exc).__name__}: {exc}", EXIT_FAILED
        failed |= code != EXIT_OK
        cells.append({"index": idx, "method": method, "n_nodes": n, "rng_seed": base.rng_seed + idx,
                      "status": status, "dir": cell_dir.name})
        print(f"[{idx + 1}/{len(base.methods) * len(base.node_counts)}] {method} n={n}: {status}")
    doc_out = {"config": base.resolved(), "cells": cells, "rows": sort_rows(rows)}
    base.out.mkdir(parents=True, exist_ok=True)
    (base.out / "summary.json").write_text(dumps_summary(doc_out), encoding="utf-8")
    (base.out / "summary.csv").write_text(rows_to_csv(doc_out["rows"]), encoding="utf-8")
    return EXIT_FAILED if failed else EXIT_OK


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_nodes", "metric", "value"])
    for r in rows:
        w.writerow([r["method"], r["n_nodes"], r["metric"], "" if r["value"] is None else repr(r["value"])])
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chainmon", description=(
        "Simulate PoW, PoS, DPoW and PPoKW consensus running a coordinator-free "
        "threshold-monitoring workload."))
    ap.add_argument("--config", metavar="PATH", help="flat JSON configuration file")
    ap.add_argument("--consensus", choices=METHODS)
    ap.add_argument("--nodes", type=int, metavar="N")
    ap.add_argument("--duration", type=float, metavar="SECONDS")
    ap.add_argument("--difficulty", type=int, metavar="NIBBLES")
    ap.add_argument("--data", metavar="PATH", help="CSV with sensor_id,timestamp,temperature")
    ap.add_argument("--threshold", type=float, metavar="CELSIUS")
    ap.add_argument("--seed", type=int, metavar="U64")
    ap.add_argument("--out", metavar="DIR")
    ap.add_argument("--grid", action="store_true", help="run every method x node-count cell")
    ap.add_argument("--trace", action="store_true", help="write the full event trace")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"consensus": args.consensus, "nodes": args.nodes, "duration": args.duration,
                 "difficulty": args.difficulty, "data": args.data, "threshold": args.threshold,
                 "seed": args.seed, "out": args.out, "trace": True if args.trace else None}
    if args.grid:
        return grid(args.config, overrides, trace=args.trace)
    return run(args.config, overrides, trace=args.trace)


if __name__ == "__main__":
    sys.exit(main())
