from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from chainmon.metrics import (BLOCK, MINING, MSG_TYPES, RECV, SEND, MetricEvent, MetricsRecord, MetricsSink,
                              dumps_summary, record_event, records_to_csv, summarize)


def test_each_event_touches_exactly_one_counter_family():
    sink = MetricsSink("n0", window=60, duration=180)
    record_event(sink, MetricEvent(SEND, 5.0, "transaction", 40))
    record_event(sink, MetricEvent(RECV, 65.0, "block_announce", 300))
    record_event(sink, MetricEvent(MINING, 70.0, attempts=7, duration=1.0))
    record_event(sink, MetricEvent(BLOCK, 130.0, own=True))
    record_event(sink, MetricEvent(BLOCK, 179.0))
    w0, w1, w2 = sink.records
    assert (w0.msgs_sent["transaction"], w0.bytes_sent["transaction"]) == (1, 40)
    assert sum(w0.msgs_recv.values()) == 0 and w0.cpu_attempts == 0
    assert (w1.msgs_recv["block_announce"], w1.bytes_recv["block_announce"]) == (1, 300)
    assert (w1.cpu_attempts, w1.mining_time) == (7, 1.0) and sum(w1.msgs_sent.values()) == 0
    assert (w2.blocks_total, w2.blocks_created) == (2, 1)
    with pytest.raises(ValueError):
        record_event(sink, MetricEvent("gossip", 1.0))


def test_events_at_duration_land_in_the_last_window():
    sink = MetricsSink("n0", window=60, duration=120)
    sink.count_message(True, 120.0, "transaction", 10)
    sink.sample_memory(120.0, 77)
    assert len(sink.records) == 2
    assert sink.records[1].msgs_sent["transaction"] == 1 and sink.records[1].memory_bytes == 77


def test_totals_and_block_times():
    sink = MetricsSink("n0", window=60, duration=180)
    sink.count_message(True, 1, "transaction", 10)
    sink.count_message(True, 61, "data_request", 5)
    sink.sample_memory(60, 100)
    sink.sample_memory(120, 300)
    sink.sample_memory(180, 200)
    sink.set_block_times([0.0, 50.0, 70.0, 150.0])
    tot = sink.totals()
    assert tot["msgs_sent"] == 2 and tot["bytes_sent"] == 15
    assert tot["memory_bytes"] == 200 and tot["memory_bytes_final"] == 200
    assert [r.block_time for r in sink.records] == [50.0, 20.0, 80.0]


def test_summarize_averages_over_nodes():
    rows = summarize({"a": {"cpu_attempts": 100}, "b": {"cpu_attempts": 300}}, "pow", 2)
    assert rows == [{"method": "pow", "n_nodes": 2, "metric": "cpu_attempts", "value": 200.0}]
    rows = summarize({"a": {"x": 1.0, "y": None}}, "pos", 1, extra={"run.messages": 4})
    assert [r["metric"] for r in rows] == ["run.messages", "x", "y"]
    assert rows[-1]["value"] is None


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=12), st.randoms())
def test_summary_is_independent_of_node_order(values, rnd):
    per_node = {f"n{i}": {"m": v, "k": i} for i, v in enumerate(values)}
    keys = list(per_node)
    rnd.shuffle(keys)
    shuffled = {k: per_node[k] for k in keys}
    a = dumps_summary({"rows": summarize(per_node, "dpow", len(values))})
    b = dumps_summary({"rows": summarize(shuffled, "dpow", len(values))})
    assert a == b
    json.loads(a)


def test_csv_header_lists_every_message_type():
    sink = MetricsSink("n7", window=60, duration=60)
    sink.ensure_windows(60)
    lines = records_to_csv(sink.records).splitlines()
    head = lines[0].split(",")
    assert head[:3] == ["node", "window_start", "window_end"]
    assert head == MetricsRecord.header()
    for t in MSG_TYPES:
        assert f"msgs_sent.{t}" in head and f"bytes_recv.{t}" in head
    assert head[-1] == "block_time"
    assert lines[1].startswith("n7,0.0,60.0,") and lines[1].endswith(",")


def test_window_must_be_positive():
    with pytest.raises(ValueError):
        MetricsSink("n", window=0)
