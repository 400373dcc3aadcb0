import pytest

from helpers import two_port_config, workload
from tmsim.core import (
    PacketDescriptor,
    QueueState,
    SharedBufferState,
    enqueue,
)
from tmsim.engine import EventKind, EventRecord, FlowRecord
from tmsim.expulsion import TokenBucket, TokenEntry, TokenSource
from tmsim.metrics import (
    SlowdownError,
    StreamOrderError,
    audit_token_ledger,
    burst_absorption_capacity,
    drop_audit_pushout,
    first_drop_snapshot,
    flows_frame,
    occupancy_average,
    percentile,
    qct_by_tag,
    queries_frame,
    queue_length_trace,
    slowdown,
    summarize,
    summary_frame,
)
from tmsim.traffic import QueryState

K = EventKind
CONFIG = two_port_config(buffer_cells=30)


def ev(time, kind, queue_id=0, cells=1, flow_id=0) -> EventRecord:
    return EventRecord(time, kind, queue_id, flow_id, cells)


def _filled() -> list[EventRecord]:
    return [
        ev(0, K.ARRIVAL, 0, 10),
        ev(0, K.ADMIT, 0, 10),
        ev(0, K.ARRIVAL, 1, 10),
        ev(0, K.ADMIT, 1, 10),
    ]


def test_buffer_utilization_at_drop():
    events = _filled() + [
        ev(100, K.ARRIVAL, 0, 1, flow_id=4),
        ev(100, K.TAIL_DROP, 0, 1, flow_id=4),
    ]
    summary = summarize(events, CONFIG)
    assert summary.buffer_utilization_at_drop == [pytest.approx(2 / 3)]
    assert summary.bandwidth_utilization_at_drop == [0.0]
    assert summary.drops_by_class == {0: {"tail": 1, "head": 0}}
    assert summary.tail_drops == 1
    assert summary.queues[0].arrivals == 2


def test_bandwidth_utilization_window():
    assert CONFIG.slot_ns == 80
    events = _filled() + [
        ev(500, K.DEQUEUE_START, 0, 6),
        ev(850, K.HEAD_DROP, 1, 10),
        ev(900, K.TAIL_DROP, 1, 1),
        ev(1600, K.TAIL_DROP, 1, 1),
        ev(2400, K.TAIL_DROP, 1, 1),
    ]
    summary = summarize(events, CONFIG)
    # 12 cell slots fit in the 1us window; a 10G port reads a cell every
    # 160ns, so the six cells are read from 500 to 1300.
    assert summary.bandwidth_utilization_at_drop == [
        pytest.approx(3 / 12),
        pytest.approx(3 / 12),
        pytest.approx(5 / 12),
        0.0,
    ]


def test_drop_classes_from_flows():
    flows = [FlowRecord(3, "hp", 1, 0, 1500, 0, None)]
    events = _filled() + [ev(10, K.HEAD_DROP, 0, 10, flow_id=3)]
    summary = summarize(events, CONFIG, flows)
    assert summary.drops_by_class == {1: {"tail": 0, "head": 1}}
    assert summary.head_dropped_cells == 10
    assert summary.expulsion_rate_cells_per_sec == pytest.approx(2e5)


def test_expulsion_budget():
    events = _filled() + [ev(10, K.HEAD_DROP, 0, 10)]
    summary = summarize(events, CONFIG)
    bucket = TokenBucket(1, 8, generated=30, tx_withdrawn=20)
    assert summary.expulsion_budget_cells_per_sec(bucket) == 2e5
    assert summary.expulsion_within_budget(bucket)

    bucket.tx_withdrawn = 25
    assert not summary.expulsion_within_budget(bucket)
    bucket.tokens = -5
    assert summary.expulsion_within_budget(bucket)


def test_mean_and_max_occupancy():
    events = [ev(0, K.ADMIT, 0, 10), ev(25_000, K.DEQUEUE_START, 0, 10)]
    summary = summarize(events, CONFIG)
    assert summary.queues[0].max_cells == 10
    assert summary.queues[0].mean_cells == pytest.approx(5.0)
    assert summary.queues[0].residual == 0


def test_counting_identity_against_final_buffer():
    events = [
        ev(0, K.ADMIT, 0, 8),
        ev(0, K.ADMIT, 0, 8),
        ev(0, K.ADMIT, 0, 8),
        ev(10, K.DEQUEUE_START, 0, 8),
        ev(20, K.HEAD_DROP, 0, 8),
    ]
    assert summarize(events, CONFIG).counting_identity_holds()

    buf = SharedBufferState(30, [QueueState(0, 0), QueueState(1, 1)])
    enqueue(buf[0], PacketDescriptor(0, 1500, 8, 0), buf)
    summary = summarize(events, CONFIG, buffer=buf)
    assert summary.queues[0].residual_cells == 8
    assert summary.counting_identity_holds()

    empty = SharedBufferState(30, [QueueState(0, 0), QueueState(1, 1)])
    summary = summarize(events, CONFIG, buffer=empty)
    assert not summary.counting_identity_holds()


def test_out_of_order_stream_rejected():
    events = [ev(10, K.ADMIT), ev(5, K.ADMIT)]
    with pytest.raises(StreamOrderError):
        summarize(events, CONFIG)


@pytest.mark.parametrize(
    "p, expected", [(25, 1), (50, 2), (75, 3), (99, 4), (100, 4)]
)
def test_percentile_nearest_rank(p, expected):
    assert percentile([4, 1, 3, 2], p) == expected


def test_percentile_rejects_bad_input():
    with pytest.raises(ValueError):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile([1], 101)


def test_slowdown():
    assert slowdown(30, 10) == 3
    with pytest.raises(SlowdownError):
        slowdown(30, 0)


def test_queue_length_trace():
    events = _filled() + [ev(100, K.DEQUEUE_START, 1, 4)]
    frame = queue_length_trace(events, CONFIG)
    assert list(frame.columns) == ["time_ns", "queue_id", "occupancy_cells"]
    assert frame.values.tolist() == [[0, 0, 10], [0, 1, 10], [100, 1, 6]]


@pytest.mark.parametrize(
    "start, end, average",
    [(0, 50_000, 5.0), (10_000, 30_000, 7.5), (30_000, 40_000, 0.0)],
)
def test_occupancy_average(start, end, average):
    events = [ev(0, K.ADMIT, 0, 10), ev(25_000, K.DEQUEUE_START, 0, 10)]
    result = occupancy_average(events, CONFIG, start, end)
    assert result[0] == pytest.approx(average)
    assert result[1] == 0


def test_occupancy_average_empty_window():
    with pytest.raises(ValueError):
        occupancy_average([], CONFIG, 10, 10)


def test_first_drop_snapshot():
    events = [
        ev(0, K.ADMIT, 0, 10),
        ev(0, K.ADMIT, 1, 5),
        ev(100, K.TAIL_DROP, 0, 1, flow_id=2),
        ev(200, K.TAIL_DROP, 1, 1, flow_id=7),
    ]
    snap = first_drop_snapshot(events, CONFIG, flow_ids=[7])
    assert snap.event.time == 200
    assert snap.occupancy == {0: 10, 1: 5}
    assert snap.free_cells == 15
    assert first_drop_snapshot(events, CONFIG, flow_ids=[9]) is None
    assert first_drop_snapshot(events, CONFIG).event.flow_id == 2


def test_drop_audit_pushout():
    events = [
        ev(0, K.ADMIT, 0, 25),
        ev(10, K.TAIL_DROP, 1, 8),
        ev(20, K.TAIL_DROP, 1, 5),
    ]
    assert drop_audit_pushout(events, CONFIG) == [events[2]]


def test_token_audit():
    bucket = TokenBucket(1, 8, generated=10, ledger=[])
    bucket.ledger.append(TokenEntry(0, TokenSource.TX, 3, 1, -2))
    bucket.ledger.append(TokenEntry(9, TokenSource.EXPULSION, 8, 8, 0))
    bucket.expulsion_withdrawn = 8
    assert audit_token_ledger(bucket) == []

    bucket.ledger.append(TokenEntry(12, TokenSource.EXPULSION, 8, 4, -4))
    bucket.expulsion_withdrawn = 16
    problems = audit_token_ledger(bucket)
    assert len(problems) == 3


def test_frames():
    flows = [
        FlowRecord(0, "a", 0, 0, 3000, 0, 900),
        FlowRecord(1, "a", 1, 0, None, 0, None),
    ]
    frame = flows_frame(flows)
    assert list(frame.columns) == ["flow_id", "class", "bytes", "fct_ns"]
    assert frame["fct_ns"].iloc[0] == 900

    queries = [
        QueryState(0, frozenset({0}), 100, "q", 400),
        QueryState(1, frozenset({1}), 200, "bg", 700),
        QueryState(2, frozenset({2}), 300, "q"),
    ]
    assert queries_frame(queries)["qct_ns"].iloc[0] == 300
    assert qct_by_tag(queries) == {"q": [300], "bg": [500]}

    summary = summarize([], CONFIG, flows, queries)
    scalars = summary_frame(summary).set_index("metric")["value"]
    assert scalars["flows_completed"] == 1
    assert scalars["qct_ns_p50"] == 300
    assert scalars["qct_ns_p99"] == 500


def test_burst_capacity_needs_named_burst():
    spec = workload({"kind": "long_lived", "queue": 0, "rate_bps": "1G"})
    with pytest.raises(ValueError):
        burst_absorption_capacity(CONFIG, spec, "burst")


def test_burst_capacity_limited_by_threshold():
    spec = workload(
        {
            "kind": "raw_burst",
            "name": "burst",
            "queue": 1,
            "burst_size_bytes": 1500,
        }
    )
    assert burst_absorption_capacity(CONFIG, spec, "burst", 4) == 3000
