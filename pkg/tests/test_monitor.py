from __future__ import annotations

import math

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from chainmon.chain import Block, ObsKind, Observation, make_genesis
from chainmon.monitor import (DOWN, SAFE, UP, VIOLATION, MonitorState, ParseError, SensorStream,
                              assign_round_robin, detect_global_event, ingest_csv, local_condition,
                              percentile_threshold, write_events_csv)


def write(tmp_path, text: str):
    p = tmp_path / "d.csv"
    p.write_text(text, encoding="utf-8")
    return p


def test_ingest_two_rows_iso_and_integer_times(tmp_path):
    p = write(tmp_path, "sensor_id,timestamp,temperature\n"
                        "s1,2019-03-23T09:00:10Z,5.5\n"
                        "s2,2019-03-23T09:00:00,6.0\n")
    streams = ingest_csv(p)
    assert list(streams) == ["s1", "s2"]
    assert streams["s1"].readings == [(10, 5.5)] and streams["s2"].readings == [(0, 6.0)]
    p = write(tmp_path, "sensor_id,timestamp,temperature\na,100,1\na,160,2\n")
    assert ingest_csv(p)["a"].readings == [(0, 1.0), (60, 2.0)]


@pytest.mark.parametrize("body,line", [
    ("s1,0,1.0\ns1,60,nan\n", 3),
    ("s1,0,1.0\ns1,0,2.0\n", 3),
    ("s1,60,1.0\ns1,0,2.0\n", 3),
    ("s1,0,warm\n", 2),
    ("s1,yesterday,1.0\n", 2),
    ("s1,0\n", 2),
])
def test_ingest_rejects_bad_rows_with_line_numbers(tmp_path, body, line):
    with pytest.raises(ParseError) as exc:
        ingest_csv(write(tmp_path, "sensor_id,timestamp,temperature\n" + body))
    assert exc.value.line == line


def test_ingest_rejects_bad_header_and_empty(tmp_path):
    with pytest.raises(ParseError):
        ingest_csv(write(tmp_path, "id,time,temp\na,0,1\n"))
    with pytest.raises(ParseError):
        ingest_csv(write(tmp_path, "sensor_id,timestamp,temperature\n"))


def test_round_robin_eight_sensors_five_nodes():
    streams = [SensorStream(f"s{k}") for k in range(8)]
    groups = assign_round_robin(streams, 5)
    assert [[s.sensor_id for s in g] for g in groups] == [["s0", "s5"], ["s1", "s6"], ["s2", "s7"], ["s3"], ["s4"]]


def test_percentile_threshold_interpolates():
    s = [SensorStream("a", [(0, 1.0), (1, 2.0), (2, 3.0), (3, 4.0), (9, 100.0)])]
    assert percentile_threshold(s, 75, until=3) == pytest.approx(3.25)
    assert percentile_threshold(s, 50) == 3.0


def test_local_condition_worked_example():
    # estimate 10 below threshold 15; node synced 12, now reads 18 -> drift 16 crosses
    state = MonitorState(15.0, {"n1": 12.0, "n2": 8.0})
    assert state.estimate == 10.0
    assert state.drift_value("n1", 18.0) == 16.0
    assert local_condition(state, "n1", 18.0) == VIOLATION
    assert local_condition(state, "n1", 16.0) == SAFE
    assert local_condition(state, "n1", 17.0) == VIOLATION  # drift exactly on the threshold
    assert local_condition(MonitorState(15.0), "n1", 1.0) == VIOLATION  # nothing synced yet


@settings(max_examples=200)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=20),
       st.floats(-50, 50))
def test_drift_values_average_to_the_true_mean(pairs, threshold):
    last = {f"n{i}": a for i, (a, _) in enumerate(pairs)}
    now = {f"n{i}": b for i, (_, b) in enumerate(pairs)}
    state = MonitorState(threshold, last)
    drifts = [state.drift_value(k, now[k]) for k in last]
    true_mean = math.fsum(now.values()) / len(now)
    assert math.fsum(drifts) / len(drifts) == pytest.approx(true_mean, abs=1e-9)
    # all drifts safe => true mean on the estimate's side of the threshold
    if all(local_condition(state, k, now[k]) == SAFE for k in last):
        e = state.estimate
        assert (true_mean - threshold) * (e - threshold) > -1e-9


def chain_from(readings: list[tuple[int, str, float]]) -> list[Block]:
    """One block per reading, timestamp = reading time."""
    blocks = [make_genesis()]
    for t, sid, v in readings:
        prev = blocks[-1]
        blocks.append(Block(prev.height + 1, prev.digest, float(t),
                            (Observation(sid, t, ObsKind.SENSOR_READING, value=v),), 0, "m"))
    return blocks


def test_constant_stream_has_no_crossings():
    readings = [(t, s, 20.0) for t in range(0, 600, 60) for s in ("a", "b")]
    assert detect_global_event(chain_from(readings), 25.0) == []


def test_ramp_crosses_once_upward_and_matches_the_replay_oracle():
    readings = [(t, s, 10.0 + t / 60 + off) for t in range(0, 1200, 60) for s, off in (("a", 0.0), ("b", 1.0))]
    events = detect_global_event(chain_from(readings), 20.0)
    assert [e.direction for e in events] == [UP]
    expect = oracles.replay_reports([(float(t), s, v) for t, s, v in readings], 20.0)
    assert [(e.sim_time, e.direction) for e in events] == expect


def test_down_crossing_and_stale_readings_ignored():
    readings = [(0, "a", 30.0), (60, "a", 10.0), (30, "a", 99.0)]  # last one is older than what is synced
    events = detect_global_event(chain_from(readings), 20.0)
    assert [(e.direction, e.estimate) for e in events] == [(DOWN, 10.0)]


def test_events_csv_header(tmp_path):
    events = detect_global_event(chain_from([(0, "a", 1.0), (60, "a", 3.0)]), 2.0)
    write_events_csv(tmp_path / "e.csv", events)
    assert (tmp_path / "e.csv").read_text().splitlines() == ["sim_time,direction,estimate", "60.0,up,3.0"]
