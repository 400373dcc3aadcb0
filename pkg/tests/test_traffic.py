import numpy as np
import pytest
from pydantic import ValidationError

from helpers import workload
from tmsim.core import PacketDescriptor
from tmsim.structures import Registry
from tmsim.traffic import (
    BuildContext,
    CdfLoadError,
    EmpiricalCdf,
    FlowStart,
    FlowState,
    IncastQuery,
    Injection,
    QueryState,
    Transport,
    build_sources,
    deliver,
    issue_incast,
    sample_flow_size,
)

TWO_POINT = EmpiricalCdf([1000, 9000], [0.5, 1.0])


def _ctx(geom, duration: int = 10**9) -> BuildContext:
    return BuildContext(
        geom=geom,
        mtu=1500,
        duration=duration,
        seed=1,
        window_packets=43,
        rto=5_000_000,
        port_rates={0: 10**10, 1: 10**10},
        queue_port={0: 0, 1: 1},
    )


def _items(spec, geom, cdf=TWO_POINT, duration=10**9):
    sources, open_loop = build_sources(
        spec, _ctx(geom, duration), lambda _: cdf
    )
    return [item for source in sources for item in source], open_loop


def _pd(flow: FlowState, seq: int) -> PacketDescriptor:
    length = flow.packet_length(seq)
    cells = -(-length // 200)
    return PacketDescriptor(flow.flow_id, length, cells, 0, seq=seq)


def test_degenerate_cdf_always_same_size():
    cdf = EmpiricalCdf([4242], [1.0])
    rng = np.random.default_rng(0)
    assert {sample_flow_size(cdf, rng) for _ in range(100)} == {4242}


@pytest.mark.parametrize("u, size", [(0.25, 1000), (0.5, 1000), (0.75, 9000)])
def test_quantile_is_a_step(u, size):
    assert TWO_POINT.quantile(u) == size


def test_sampled_mean():
    rng = np.random.default_rng(7)
    samples = TWO_POINT.sample(rng, 10**6)
    assert TWO_POINT.mean() == 5000
    assert samples.mean() == pytest.approx(5000, rel=0.01)


@pytest.mark.parametrize(
    "text",
    [
        "1000\t0.5\n900\t1.0\n",
        "1000\t0.5\n2000\t0.9\n",
        "1000 0.5\n",
        "abc\t1.0\n",
        "",
    ],
)
def test_cdf_load_errors(tmp_path, text):
    path = tmp_path / "bad.tsv"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(CdfLoadError):
        EmpiricalCdf.load(path)


def test_cdf_missing_file(tmp_path):
    with pytest.raises(CdfLoadError):
        EmpiricalCdf.load(tmp_path / "missing.tsv")


def test_shipped_cdf_loads():
    cdf = EmpiricalCdf.load(Registry().default_cdf)
    assert cdf.probs[-1] == 1.0
    assert cdf.quantile(1.0) == 20_000_000


def test_window_fills_then_slides(geom):
    flow = FlowState(0, 10 * 1500, 0, start_time=0, window_packets=4)
    transport = Transport(geom)
    sent = transport.start([flow], None, 0)
    assert [inj.pd.seq for inj in sent] == [0, 1, 2, 3]
    assert flow.outstanding == {0, 1, 2, 3}

    more = transport.on_delivery(_pd(flow, 0), 100)
    assert [inj.pd.seq for inj in more] == [4]
    assert more[0].time == 100
    assert flow.acked_bytes == 1500


def test_out_of_order_delivery_ignored(geom):
    flow = FlowState(0, 3 * 1500, 0, start_time=0, window_packets=4)
    transport = Transport(geom)
    transport.start([flow], None, 0)
    assert transport.on_delivery(_pd(flow, 1), 50) == []
    assert flow.base == 0
    assert not deliver(flow, 2, 60)


def test_timeout_resends_oldest_unacked(geom):
    rto = 5_000_000
    flow = FlowState(3, 8 * 1500, 0, start_time=1000, window_packets=8)
    transport = Transport(geom)
    transport.start([flow], None, 1000)
    for seq in range(7):
        transport.on_delivery(_pd(flow, seq), 1000)

    assert transport.next_deadline() == 1000 + rto
    assert transport.fire_timers(1000 + rto - 1) == []
    resent = transport.fire_timers(1000 + rto)
    assert [(inj.time, inj.pd.seq) for inj in resent] == [(1000 + rto, 7)]
    assert flow.retransmits == 1

    transport.on_delivery(_pd(flow, 7), 1000 + rto + 500)
    assert flow.fct == rto + 500
    assert transport.next_deadline() is None


def test_sender_rate_paces_packets(geom):
    flow = FlowState(
        0,
        3 * 1500,
        0,
        start_time=0,
        window_packets=8,
        sender_rate_bps=10**10,
    )
    sent = Transport(geom).start([flow], None, 0)
    assert [inj.time for inj in sent] == [0, 1200, 2400]


def test_last_packet_is_short():
    flow = FlowState(0, 3100, 0, start_time=0, window_packets=8)
    assert flow.n_packets == 3
    assert flow.packet_length(2) == 100


@pytest.mark.parametrize(
    "fan_in, size, first, last",
    [
        (16, 1_600_000, 100_000, 100_000),
        (1, 50_000, 50_000, 50_000),
        (40, 1_000_001, 25_001, 25_000),
    ],
)
def test_issue_incast_splits_query(fan_in, size, first, last):
    spec = IncastQuery(
        kind="incast", queue=0, fan_in=fan_in, query_size_bytes=size
    )
    query, flows = issue_incast(spec, 500, 9, iter(range(100)), 43)
    assert len(flows) == fan_in
    assert flows[0].total_bytes == first
    assert flows[-1].total_bytes == last
    assert sum(f.total_bytes for f in flows) == size
    assert query.flow_ids == frozenset(range(fan_in))
    assert all(f.query_id == 9 and f.start_time == 500 for f in flows)


def test_query_completes_with_its_slowest_flow(geom):
    spec = IncastQuery(
        kind="incast", queue=0, fan_in=2, query_size_bytes=3000
    )
    query, flows = issue_incast(spec, 100, 0, iter(range(2)), 43)
    transport = Transport(geom)
    transport.start(flows, query, 100)

    transport.on_delivery(_pd(flows[1], 0), 900)
    assert query.qct is None
    transport.on_delivery(_pd(flows[0], 0), 2100)
    assert query.completion_time == 2100
    assert query.qct == max(f.fct for f in flows)


def test_poisson_arrival_gaps(geom):
    spec = workload(
        {
            "kind": "poisson_flows",
            "queues": [0],
            "flows_per_sec": 1e6,
            "max_flows": 100_000,
        }
    )
    items, open_loop = _items(spec, geom)
    assert open_loop == []
    assert len(items) == 100_000
    times = np.array([item.time for item in items])
    assert np.all(np.diff(times) >= 0)
    assert np.diff(times).mean() == pytest.approx(1000, rel=0.02)


def test_poisson_load_sets_rate(geom):
    spec = workload(
        {"kind": "poisson_flows", "queues": [0], "load": 0.5}
    )
    items, _ = _items(spec, geom, duration=10_000_000)
    # 0.5 * 10 Gbps over 5000-byte flows is 125k flows/s.
    assert len(items) == pytest.approx(1250, rel=0.15)
    assert all(isinstance(item, FlowStart) for item in items)


def test_raw_burst_paced(geom):
    spec = workload(
        {
            "kind": "raw_burst",
            "name": "b",
            "queue": 1,
            "start_ns": "2us",
            "burst_size_bytes": 4000,
            "rate_bps": "10Gbps",
        }
    )
    items, open_loop = _items(spec, geom)
    assert [(i.time, i.pd.length_bytes) for i in items] == [
        (2000, 1500),
        (3200, 1500),
        (4400, 1000),
    ]
    assert open_loop[0].total_bytes == 4000
    assert open_loop[0].tag == "b"


def test_long_lived_flows_are_staggered(geom):
    spec = workload(
        {
            "kind": "long_lived",
            "queue": 0,
            "flow_count": 2,
            "rate_bps": "10G",
            "stop_ns": 2400,
        }
    )
    items, open_loop = _items(spec, geom)
    assert len(open_loop) == 2
    times = sorted((i.time, i.pd.flow_id) for i in items)
    assert times == [(0, 0), (600, 1), (1200, 0), (1800, 1)]
    assert all(isinstance(i, Injection) for i in items)


def test_incast_fixed_period(geom):
    spec = workload(
        {
            "kind": "incast",
            "queue": 0,
            "fan_in": 4,
            "query_size_bytes": "8KB",
            "start_ns": "10us",
            "period_ns": "50us",
            "count": 3,
        }
    )
    items, _ = _items(spec, geom)
    assert [i.time for i in items] == [10_000, 60_000, 110_000]
    assert [i.query.query_id for i in items] == [0, 1, 2]
    assert len({f.flow_id for i in items for f in i.flows}) == 12


@pytest.mark.parametrize(
    "generator",
    [
        {"kind": "teleport", "queue": 0},
        {"kind": "poisson_flows", "queues": [0]},
        {
            "kind": "poisson_flows",
            "queues": [0],
            "load": 0.5,
            "flows_per_sec": 10,
        },
        {"kind": "incast", "queue": 0, "fan_in": 2, "query_size_bytes": 1},
        {
            "kind": "incast",
            "queue": 0,
            "fan_in": 2,
            "query_size_bytes": 3000,
            "count": 2,
        },
        {"kind": "long_lived", "queue": 0, "rate_bps": "fast"},
        {"kind": "long_lived", "queue": 0, "rate_bps": 1, "colour": "red"},
    ],
)
def test_bad_generators_rejected(generator):
    with pytest.raises(ValidationError):
        workload(generator)


def test_queue_ids_collected():
    spec = workload(
        {"kind": "poisson_flows", "queues": [0, 2], "load": 0.1},
        {"kind": "long_lived", "queue": 1, "rate_bps": "1G"},
    )
    assert spec.queue_ids() == {0, 1, 2}


def test_query_state_without_completion():
    assert QueryState(0, frozenset(), 10).qct is None
