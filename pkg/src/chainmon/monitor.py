"""Coordinator-free threshold monitoring of the average temperature.

Each node keeps the value it last synced through the chain.  Its drift value
``e + (v_i - last_i)`` averages, over all nodes, to the true mean, so as
long as every drift value sits on the estimate's side of the threshold the
true mean does too.  A node only reports when its own drift value crosses.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

from .chain import Block, ObsKind

SAFE = "safe"
VIOLATION = "violation"
UP = "up"
DOWN = "down"


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class SensorStream:
    sensor_id: str
    readings: list[tuple[int, float]] = field(default_factory=list)


def _parse_time(raw: str) -> float:
    raw = raw.strip()
    try:
        return float(int(raw))
    except ValueError:
        pass
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def ingest_csv(path: str | Path) -> dict[str, SensorStream]:
    """Read ``sensor_id,timestamp,temperature`` rows into per-sensor streams.

    Timestamps (integer seconds or ISO-8601) are shifted so the earliest row
    is time 0.  Sensors keep their order of first appearance.
    """
    path = Path(path)
    rows: list[tuple[str, float, float, int]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["sensor_id", "timestamp", "temperature"]:
            raise ParseError("header must be sensor_id,timestamp,temperature", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", lineno)
            sid = row[0].strip()
            if not sid:
                raise ParseError("empty sensor_id", lineno)
            try:
                ts = _parse_time(row[1])
            except ValueError:
                raise ParseError(f"bad timestamp {row[1]!r}", lineno) from None
            try:
                temp = float(row[2])
            except ValueError:
                raise ParseError(f"bad temperature {row[2]!r}", lineno) from None
            if not math.isfinite(temp):
                raise ParseError(f"non-finite temperature {row[2]!r}", lineno)
            rows.append((sid, ts, temp, lineno))
    if not rows:
        raise ParseError("no data rows")
    t0 = min(r[1] for r in rows)
    streams: dict[str, SensorStream] = {}
    for sid, ts, temp, lineno in rows:
        s = streams.setdefault(sid, SensorStream(sid))
        t = int(round(ts - t0))
        if s.readings and t <= s.readings[-1][0]:
            raise ParseError(f"timestamps for sensor {sid} are not increasing", lineno)
        s.readings.append((t, temp))
    return streams


def assign_round_robin(streams: dict[str, SensorStream] | list[SensorStream], n_nodes: int) -> list[list[SensorStream]]:
    """Sensor ``k`` goes to node ``k mod n_nodes``."""
    items = list(streams.values()) if isinstance(streams, dict) else list(streams)
    out: list[list[SensorStream]] = [[] for _ in range(n_nodes)]
    for k, s in enumerate(items):
        out[k % n_nodes].append(s)
    return out


def percentile_threshold(streams: Iterable[SensorStream], q: float = 75.0, until: float | None = None) -> float:
    vals = sorted(v for s in streams for t, v in s.readings if until is None or t <= until)
    if not vals:
        raise ParseError("no readings to derive a threshold from")
    # linear interpolation between closest ranks
    pos = (len(vals) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (vals[hi] - vals[lo]) * (pos - lo)


def side(x: float, threshold: float) -> int:
    return (x > threshold) - (x < threshold)


@dataclass
class MonitorState:
    threshold: float
    last_sync_values: dict[str, float] = field(default_factory=dict)

    @property
    def estimate(self) -> float | None:
        if not self.last_sync_values:
            return None
        return math.fsum(self.last_sync_values.values()) / len(self.last_sync_values)

    def drift_value(self, node: str, v: float) -> float:
        return self.estimate + (v - self.last_sync_values[node])

    @classmethod
    def from_sync(cls, threshold: float, sync: dict) -> "MonitorState":
        return cls(threshold, {k: v for k, (_, v) in sync.items()})


def local_condition(state: MonitorState, node: str, v: float) -> str:
    """``violation`` when the node's drift value leaves the estimate's side of the threshold."""
    e = state.estimate
    if e is None or node not in state.last_sync_values:
        return VIOLATION
    u = state.drift_value(node, v)
    if side(u, state.threshold) == 0 or side(u, state.threshold) != side(e, state.threshold):
        return VIOLATION
    return SAFE


@dataclass(frozen=True)
class Crossing:
    sim_time: float
    direction: str
    estimate: float
    height: int = -1


def detect_global_event(chain: Iterable[Block], threshold: float) -> list[Crossing]:
    """Sign changes of ``estimate - threshold`` along the chain, evaluated after each block."""
    values: dict[str, tuple[int, float]] = {}
    out: list[Crossing] = []
    last_side = 0
    for block in chain:
        touched = False
        for o in block.observations:
            if o.kind is ObsKind.SENSOR_READING:
                prev = values.get(o.sensor_id)
                if prev is None or o.sim_time >= prev[0]:
                    values[o.sensor_id] = (o.sim_time, o.value)
                    touched = True
        if not touched:
            continue
        e = math.fsum(v for _, v in values.values()) / len(values)
        s = side(e, threshold)
        if s == 0:
            continue
        if last_side and s != last_side:
            out.append(Crossing(block.timestamp, UP if s > 0 else DOWN, e, block.height))
        last_side = s
    return out


def write_events_csv(path: str | Path, events: Iterable[Crossing]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sim_time", "direction", "estimate"])
        for ev in events:
            w.writerow([repr(float(ev.sim_time)), ev.direction, repr(float(ev.estimate))])
