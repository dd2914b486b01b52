"""Per-node metric windows and the cross-node summary table.

Counters are additive over windows; ``memory_bytes`` is a gauge sampled at
each window end and ``block_time`` is filled in from the final canonical
chain once the run is over.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

MSG_TYPES = ("data_request", "data_response", "transaction", "block_announce",
             "lottery_announce", "lottery_verify")
DEFAULT_WINDOW = 60.0


@dataclass
class MetricsRecord:
    node: str
    window_start: float
    window_end: float
    msgs_sent: dict[str, int] = field(default_factory=lambda: dict.fromkeys(MSG_TYPES, 0))
    bytes_sent: dict[str, int] = field(default_factory=lambda: dict.fromkeys(MSG_TYPES, 0))
    msgs_recv: dict[str, int] = field(default_factory=lambda: dict.fromkeys(MSG_TYPES, 0))
    bytes_recv: dict[str, int] = field(default_factory=lambda: dict.fromkeys(MSG_TYPES, 0))
    blocks_created: int = 0
    blocks_total: int = 0
    mining_time: float = 0.0
    cpu_attempts: int = 0
    memory_bytes: int = 0
    block_time: float | None = None

    @staticmethod
    def header() -> list[str]:
        cols = ["node", "window_start", "window_end"]
        for prefix in ("msgs_sent", "bytes_sent", "msgs_recv", "bytes_recv"):
            cols += [f"{prefix}.{t}" for t in MSG_TYPES]
        return cols + ["blocks_created", "blocks_total", "mining_time", "cpu_attempts",
                       "memory_bytes", "block_time"]

    def row(self) -> list[str]:
        out = [self.node, _num(self.window_start), _num(self.window_end)]
        for table in (self.msgs_sent, self.bytes_sent, self.msgs_recv, self.bytes_recv):
            out += [str(table[t]) for t in MSG_TYPES]
        out += [str(self.blocks_created), str(self.blocks_total), _num(self.mining_time),
                str(self.cpu_attempts), str(self.memory_bytes),
                "" if self.block_time is None else _num(self.block_time)]
        return out


def _num(x: float) -> str:
    return repr(float(x))


# event kinds understood by record_event
SEND, RECV, MINING, BLOCK = "send", "recv", "mining", "block"


@dataclass(frozen=True)
class MetricEvent:
    kind: str
    time: float
    msg_type: str = ""
    payload_bytes: int = 0
    attempts: int = 0
    duration: float = 0.0
    own: bool = False


class MetricsSink:
    """One node's windows.  ``record_event`` routes an event to exactly one counter family."""

    def __init__(self, node: str, window: float = DEFAULT_WINDOW, duration: float | None = None):
        if window <= 0:
            raise ValueError("window must be positive")
        self.node = node
        self.window = window
        self.duration = duration
        self.records: list[MetricsRecord] = []
        self._last = (max(0, math.ceil(duration / window) - 1) if duration is not None
                      else float("inf"))

    def _index_for(self, t: float) -> int:
        idx = int(t // self.window) if t > 0 else 0
        return idx if idx <= self._last else self._last

    def _window_for(self, t: float) -> MetricsRecord:
        idx = self._index_for(t)
        if idx < len(self.records):
            return self.records[idx]
        while len(self.records) <= idx:
            k = len(self.records)
            end = (k + 1) * self.window
            if self.duration is not None:
                end = min(end, self.duration)
            self.records.append(MetricsRecord(self.node, k * self.window, end))
        return self.records[idx]

    def count_message(self, sent: bool, t: float, msg_type: str, nbytes: int) -> None:
        """Fast path for the send/receive families (the bulk of all events)."""
        idx = int(t // self.window) if t > 0 else 0
        if idx > self._last:
            idx = self._last
        rec = self.records[idx] if idx < len(self.records) else self._window_for(t)
        if sent:
            rec.msgs_sent[msg_type] += 1
            rec.bytes_sent[msg_type] += nbytes
        else:
            rec.msgs_recv[msg_type] += 1
            rec.bytes_recv[msg_type] += nbytes

    def record_event(self, event: MetricEvent) -> "MetricsSink":
        rec = self._window_for(event.time)
        if event.kind == SEND:
            rec.msgs_sent[event.msg_type] += 1
            rec.bytes_sent[event.msg_type] += event.payload_bytes
        elif event.kind == RECV:
            rec.msgs_recv[event.msg_type] += 1
            rec.bytes_recv[event.msg_type] += event.payload_bytes
        elif event.kind == MINING:
            rec.cpu_attempts += event.attempts
            rec.mining_time += event.duration
        elif event.kind == BLOCK:
            rec.blocks_total += 1
            if event.own:
                rec.blocks_created += 1
        else:
            raise ValueError(f"unknown metric event kind {event.kind!r}")
        return self

    def sample_memory(self, t: float, nbytes: int) -> None:
        """Gauge for the window that ends at (or contains) ``t``."""
        self._window_for(t - 1e-9 if t > 0 else 0.0).memory_bytes = nbytes

    def ensure_windows(self, until: float) -> None:
        if until > 0:
            self._window_for(until - 1e-9)

    def set_block_times(self, timestamps: list[float]) -> None:
        """Mean canonical inter-block interval per window, keyed by the later block's time."""
        gaps: dict[int, list[float]] = {}
        for a, b in zip(timestamps, timestamps[1:]):
            self._window_for(b)
            idx = self._index_for(b)
            gaps.setdefault(idx, []).append(b - a)
        for idx, rec in enumerate(self.records):
            g = gaps.get(idx)
            rec.block_time = math.fsum(g) / len(g) if g else None

    # totals -----------------------------------------------------------

    def totals(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for t in MSG_TYPES:
            out[f"msgs_sent.{t}"] = sum(r.msgs_sent[t] for r in self.records)
            out[f"bytes_sent.{t}"] = sum(r.bytes_sent[t] for r in self.records)
            out[f"msgs_recv.{t}"] = sum(r.msgs_recv[t] for r in self.records)
            out[f"bytes_recv.{t}"] = sum(r.bytes_recv[t] for r in self.records)
        out["msgs_sent"] = sum(out[f"msgs_sent.{t}"] for t in MSG_TYPES)
        out["bytes_sent"] = sum(out[f"bytes_sent.{t}"] for t in MSG_TYPES)
        out["msgs_recv"] = sum(out[f"msgs_recv.{t}"] for t in MSG_TYPES)
        out["bytes_recv"] = sum(out[f"bytes_recv.{t}"] for t in MSG_TYPES)
        out["blocks_created"] = sum(r.blocks_created for r in self.records)
        out["blocks_total"] = sum(r.blocks_total for r in self.records)
        out["mining_time"] = math.fsum(r.mining_time for r in self.records)
        out["cpu_attempts"] = sum(r.cpu_attempts for r in self.records)
        mem = [r.memory_bytes for r in self.records]
        out["memory_bytes"] = math.fsum(mem) / len(mem) if mem else 0.0
        out["memory_bytes_final"] = mem[-1] if mem else 0
        return out

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(records_to_csv(self.records), encoding="utf-8")


def record_event(sink: MetricsSink, event: MetricEvent) -> MetricsSink:
    return sink.record_event(event)


def records_to_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRecord.header())
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def summarize(per_node: dict[str, dict[str, float]], method: str, n_nodes: int,
              extra: dict[str, float] | None = None) -> list[dict]:
    """Average each metric over nodes; one row per (method, n_nodes, metric), sorted.

    ``per_node`` maps node id to that node's run totals.  Node order does not
    matter: values are summed with ``math.fsum``.
    """
    rows = []
    if per_node:
        names = sorted(set().union(*(t.keys() for t in per_node.values())))
        for name in names:
            vals = [t[name] for t in per_node.values() if name in t and t[name] is not None]
            mean = math.fsum(vals) / len(vals) if vals else None
            rows.append({"method": method, "n_nodes": n_nodes, "metric": name, "value": mean})
    for name, v in (extra or {}).items():
        rows.append({"method": method, "n_nodes": n_nodes, "metric": name, "value": v})
    return sort_rows(rows)


def sort_rows(rows: Iterable[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: (r["method"], r["n_nodes"], r["metric"]))


def dumps_summary(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
