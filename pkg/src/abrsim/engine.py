"""Deterministic discrete-event kernel.

Time is an integer count of microsecond ticks.  Events are ordered by
(time, insertion sequence), so simultaneous events run in the order they
were scheduled and identical runs replay identically.  Link serialization
is tracked in exact integer sub-tick units (1/rate-numerator microseconds),
which guarantees no over-service without floating-point drift; the arrival
event itself is scheduled on the next whole tick.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .model import Cell


class SchedulingInPast(RuntimeError):
    """An event was scheduled before the current clock."""


# --------------------------------------------------------------------------
# Event vocabulary.  Internally the heap stores plain tuples
# (at, seq, code, a, b); these dataclasses are the public face used by
# Simulator.schedule() and by tests of the queue contract.

_ARRIVAL, _TIMER, _WAKE = 0, 1, 2


@dataclass(frozen=True)
class CellArrival:
    link_id: object
    cell: Cell


@dataclass(frozen=True)
class TimerFire:
    owner_id: object
    tag: object


@dataclass(frozen=True)
class SourceWake:
    vc: object


@dataclass(frozen=True)
class Event:
    at: int
    kind: object
    sequence: Optional[int] = None


class Node:
    """A network element addressable by id; subclasses act on cells/timers."""

    def __init__(self, node_id):
        self.node_id = node_id
        self.sim: Optional[Simulator] = None

    def on_cell(self, cell, link):
        raise NotImplementedError(f"{self.node_id} does not accept cells")

    def on_timer(self, tag):
        raise NotImplementedError(f"{self.node_id} has no timers")

    def wake(self):
        raise NotImplementedError(f"{self.node_id} is not a source")

    def queued_cell_count(self) -> int:
        """Cells held inside this node (outside the event heap)."""
        return 0


class TailDrop:
    """Drop the arriving cell when the queue is full; capacity None = infinite."""

    def admit(self, queue: "PortQueue", cell) -> bool:
        cap = queue.capacity
        return cap is None or queue.occupancy < cap


class PortQueue:
    """FIFO output queue of a link: occupancy covers waiting + in service.

    Cells are physically represented by their scheduled arrival events; the
    queue tracks the service-completion tick of each admitted cell so the
    occupancy at any instant can be recovered by expiring past completions.
    """

    __slots__ = ("capacity", "occupancy", "drop_policy", "_completions",
                 "watermark", "drops", "sent", "offered")

    def __init__(self, capacity=None, drop_policy=None):
        self.capacity = capacity
        self.occupancy = 0
        self.drop_policy = drop_policy or TailDrop()
        self._completions = deque()
        self.watermark = 0   # max occupancy since last take_watermark()
        self.drops = 0       # cumulative cells refused here
        self.sent = 0        # cumulative cells put on the wire
        self.offered = 0     # cumulative cells presented (admitted or not)

    def refresh(self, now: int) -> int:
        comps = self._completions
        while comps and comps[0] <= now:
            comps.popleft()
        self.occupancy = len(comps)
        return self.occupancy

    def take_watermark(self) -> int:
        mark = self.watermark
        self.watermark = self.occupancy
        return mark


class Link:
    """Unidirectional link: finite cell rate plus fixed propagation delay."""

    def __init__(self, link_id, rate, delay: int, src=None, dst=None,
                 capacity=None, drop_policy=None):
        rate = Fraction(rate)
        if rate <= 0:
            raise ValueError("link rate must be positive")
        if delay < 0:
            raise ValueError("propagation delay must be >= 0")
        self.link_id = link_id
        self.rate = rate
        self.delay = int(delay)
        self.src = src
        self.dst = dst
        self.queue = PortQueue(capacity, drop_policy)
        self.sim: Optional[Simulator] = None
        self.to_node: Optional[Node] = None
        # Serialization bookkeeping in units of 1/rate.numerator microseconds.
        self._num = rate.numerator
        self._units_per_cell = 1_000_000 * rate.denominator
        self._free_units = 0

    @property
    def cell_time(self) -> Fraction:
        """Exact service time of one cell in ticks."""
        return Fraction(self._units_per_cell, self._num)

    def transmit(self, cell, at: int) -> int:
        """Serialize ``cell`` starting no earlier than ``at``.

        Returns the arrival tick at the far end:
        ceil(max(at, link free time) + 1/rate) + propagation delay.
        """
        num = self._num
        units = at * num
        free = self._free_units
        if free > units:
            units = free
        units += self._units_per_cell
        self._free_units = units
        done = -(-units // num)  # ceil to a whole tick
        arrival = done + self.delay
        self.queue._completions.append(done)
        self.queue.sent += 1
        self.sim._push(arrival, _ARRIVAL, self, cell)
        return arrival

    def offer(self, cell, now: int) -> Optional[int]:
        """Apply the queue's drop policy, then transmit if admitted.

        Returns the arrival tick at the far end, or None when dropped.
        """
        q = self.queue
        q.refresh(now)
        q.offered += 1
        if not q.drop_policy.admit(q, cell):
            q.drops += 1
            self.sim.note_dropped(cell, self)
            return None
        arrival = self.transmit(cell, now)
        q.occupancy += 1
        if q.occupancy > q.watermark:
            q.watermark = q.occupancy
        return arrival

    def inject(self, cell, at: int) -> int:
        """Deliver ``cell`` after the propagation delay only, consuming no
        service capacity (zero-cost mode for control cells)."""
        arrival = at + self.delay
        self.sim._push(arrival, _ARRIVAL, self, cell)
        return arrival

    def _arrive(self, cell):
        self.to_node.on_cell(cell, self)


class Simulator:
    """Single-threaded event loop owning the clock, nodes, and links."""

    def __init__(self):
        self.clock = 0
        self._heap = []
        self._seq = 0
        self.nodes = {}
        self.links = {}
        self._timer_owners = {}
        self._cell_holders = []
        self.metrics = None  # optional collector attached by the harness
        # Conservation counters (every cell kind, including control cells).
        self.emitted = 0
        self.delivered = 0
        self.dropped = 0
        self.drop_log = []

    # -- construction ------------------------------------------------------

    def add_node(self, node: Node) -> Node:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id}")
        node.sim = self
        self.nodes[node.node_id] = node
        self._timer_owners[node.node_id] = node
        return node

    def add_link(self, link: Link) -> Link:
        if link.link_id in self.links:
            raise ValueError(f"duplicate link id {link.link_id}")
        link.sim = self
        if link.dst is not None:
            link.to_node = self.nodes[link.dst]
        self.links[link.link_id] = link
        return link

    def register_timer_owner(self, owner_id, obj) -> None:
        self._timer_owners[owner_id] = obj

    def register_cell_holder(self, obj) -> None:
        self._cell_holders.append(obj)

    # -- scheduling --------------------------------------------------------

    def _push(self, at: int, code: int, a, b) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, code, a, b))

    def schedule(self, event: Event) -> None:
        """Queue a public event; refuses times earlier than the clock."""
        if event.at < self.clock:
            raise SchedulingInPast(
                f"event at t={event.at} scheduled while clock={self.clock}")
        kind = event.kind
        if isinstance(kind, CellArrival):
            self._push(event.at, _ARRIVAL, self.links[kind.link_id], kind.cell)
        elif isinstance(kind, TimerFire):
            self._push(event.at, _TIMER, self._timer_owners[kind.owner_id],
                       kind.tag)
        elif isinstance(kind, SourceWake):
            self._push(event.at, _WAKE, self.nodes[kind.vc], None)
        else:
            raise TypeError(f"unknown event kind {kind!r}")

    def schedule_timer(self, at: int, owner, tag) -> None:
        if at < self.clock:
            raise SchedulingInPast(
                f"timer at t={at} scheduled while clock={self.clock}")
        self._push(at, _TIMER, owner, tag)

    def schedule_wake(self, at: int, source) -> None:
        if at < self.clock:
            raise SchedulingInPast(
                f"wake at t={at} scheduled while clock={self.clock}")
        self._push(at, _WAKE, source, None)

    # -- execution ---------------------------------------------------------

    def run_until(self, end: int):
        """Process every event with time <= end; leaves clock == end.

        Returns the metrics log when a collector is attached, else None.
        """
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= end:
            at, _, code, a, b = pop(heap)
            self.clock = at
            if code == _ARRIVAL:
                a._arrive(b)
            elif code == _TIMER:
                a.on_timer(b)
            else:
                a.wake()
        self.clock = end
        if self.metrics is not None:
            return self.metrics.finalize(end)
        return None

    # -- cell accounting ---------------------------------------------------

    def note_emitted(self, cell) -> None:
        self.emitted += 1

    def note_delivered(self, cell) -> None:
        self.delivered += 1

    def note_dropped(self, cell, where=None) -> None:
        self.dropped += 1
        if self.metrics is not None:
            self.metrics.on_drop(cell, where)

    def in_flight(self) -> int:
        """Cells alive in the network: scheduled arrivals plus node queues."""
        count = sum(1 for entry in self._heap if entry[2] == _ARRIVAL)
        count += sum(h.queued_cell_count() for h in self._cell_holders)
        return count

    def conservation_balance(self) -> int:
        """emitted - delivered - dropped - in flight; zero when conserved."""
        return self.emitted - self.delivered - self.dropped - self.in_flight()
