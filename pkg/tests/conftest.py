from typing import Callable

import pytest

from tmsim.core import (
    CellGeometry,
    PacketDescriptor,
    QueueState,
    SharedBufferState,
    enqueue,
)


@pytest.fixture
def geom() -> CellGeometry:
    return CellGeometry(200)


@pytest.fixture
def pkt() -> Callable[..., PacketDescriptor]:
    def _pkt(cells: int, flow_id: int = 0, seq: int = 0) -> PacketDescriptor:
        return PacketDescriptor(flow_id, cells * 200, cells, 0, seq=seq)

    return _pkt


@pytest.fixture
def make_buffer() -> Callable[..., SharedBufferState]:
    def _make(
        capacity: int, occupancy: list[int] | int = 0
    ) -> SharedBufferState:
        """Buffer whose queue i holds occupancy[i] one-cell packets."""
        cells = (
            [0] * occupancy if isinstance(occupancy, int) else list(occupancy)
        )
        buf = SharedBufferState(
            capacity, [QueueState(i, i) for i in range(len(cells))]
        )
        for qid, n in enumerate(cells):
            for seq in range(n):
                pd = PacketDescriptor(qid, 200, 1, 0, seq=seq)
                enqueue(buf[qid], pd, buf)
        return buf

    return _make
