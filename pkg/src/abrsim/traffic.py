"""Traffic generation and network-entry enforcement.

GCRA is realized in virtual-scheduling form: the theoretical arrival time
(TAT) is an exact rational, so conformance decisions carry no rounding at
all.  A cell arriving at ``t`` conforms iff ``t >= TAT - limit``; conforming
cells advance ``TAT = max(t, TAT) + increment``.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Optional

from .model import DATA, RM, TrafficContract

ADMIT = "admit"
ADMIT_TAGGED = "admit_tagged"
REJECT = "reject"

DROP = "drop"
TAG_CLP = "tag"


class SourceIdle(RuntimeError):
    """A source with zero allowed rate has no next emission time."""


class GcraState:
    """One leaky bucket: increment = nominal inter-cell time, limit = slack."""

    __slots__ = ("increment", "limit", "tat")

    def __init__(self, increment, limit):
        self.increment = Fraction(increment)
        self.limit = Fraction(limit)
        self.tat = Fraction(0)

    def check(self, arrival) -> bool:
        """Test one arrival; updates TAT only when the cell conforms."""
        if arrival >= self.tat - self.limit:
            base = self.tat if self.tat > arrival else Fraction(arrival)
            self.tat = base + self.increment
            return True
        return False

    def would_conform(self, arrival) -> bool:
        return arrival >= self.tat - self.limit

    def commit(self, arrival) -> None:
        base = self.tat if self.tat > arrival else Fraction(arrival)
        self.tat = base + self.increment


def gcra_for_rate(rate, limit) -> GcraState:
    """Bucket enforcing ``rate`` cells/s with ``limit`` ticks of tolerance."""
    return GcraState(Fraction(1_000_000) / Fraction(rate), limit)


class Policer:
    """Dual-GCRA usage parameter control at a network entry point.

    The PCR bucket uses CDVT as its limit; when the contract declares SCR,
    a second bucket uses the exact burst tolerance.  Bucket state advances
    only for cells that conform on every applicable bucket, so a tagged or
    rejected cell spends no credit.
    """

    def __init__(self, contract: TrafficContract, action: str = DROP):
        if action not in (DROP, TAG_CLP):
            raise ValueError(f"unknown non-conformance action {action!r}")
        self.contract = contract
        self.action = action
        self.buckets = [gcra_for_rate(contract.pcr, contract.cdvt)]
        if contract.scr is not None:
            bt = contract.bt if contract.bt is not None else Fraction(0)
            self.buckets.append(gcra_for_rate(contract.scr, bt))

    def police(self, cell, arrival) -> str:
        if all(b.would_conform(arrival) for b in self.buckets):
            for b in self.buckets:
                b.commit(arrival)
            return ADMIT
        if self.action == TAG_CLP:
            cell.clp = True
            return ADMIT_TAGGED
        return REJECT


class EarlyPacketDiscard:
    """Queue admission policy that drops whole packets past a threshold.

    Once a VC's packet is refused, every following cell of that VC is
    refused up to and including the end-of-message cell; mid-flight packets
    are never truncated.  RM cells bypass the policy (but not a hard
    capacity limit).
    """

    def __init__(self, threshold: int, capacity: Optional[int] = None):
        self.threshold = threshold
        self.capacity = capacity
        self.discarding = set()
        self._mid_packet = set()

    def admit(self, queue, cell) -> bool:
        if self.capacity is not None and queue.occupancy >= self.capacity:
            return False
        if cell.kind != DATA:
            return True
        vc = cell.vc
        if vc in self.discarding:
            if cell.eom:
                self.discarding.discard(vc)
            return False
        starts_packet = vc not in self._mid_packet
        if starts_packet and queue.occupancy >= self.threshold:
            if not cell.eom:  # a one-cell packet enters and leaves at once
                self.discarding.add(vc)
            return False
        if cell.eom:
            self._mid_packet.discard(vc)
        else:
            self._mid_packet.add(vc)
        return True


def epd_enqueue(policy: EarlyPacketDiscard, queue, cell) -> bool:
    """Admission decision for one cell; True means enqueue."""
    return policy.admit(queue, cell)


# --------------------------------------------------------------------------
# Source activity models.  The model answers whether a cell is available and
# where packet boundaries fall; the pacing itself (1/ACR spacing) is owned by
# the emitting node.

PERSISTENT = "persistent"
STAGGERED = "staggered"
BURSTY = "bursty"

OPEN_LOOP = "open"
CLOSED_LOOP = "closed"


class SourceModel:
    """Cell-availability process of one source."""

    kind = PERSISTENT

    def __init__(self, packet_len: int = 30):
        if packet_len < 1:
            raise ValueError("packet_len must be >= 1")
        self.packet_len = packet_len
        self._in_packet = 0

    @property
    def start(self) -> int:
        return 0

    def has_cell(self, now: int) -> bool:
        return True

    def next_ready(self, now: int) -> Optional[int]:
        """Earliest tick >= now at which a cell could be available."""
        return now

    def take_cell_flags(self, now: int) -> bool:
        """Advance one emitted data cell; returns True when it ends a packet."""
        self._in_packet += 1
        if self._in_packet >= self.packet_len:
            self._in_packet = 0
            return True
        return False

    def on_burst_delivered(self, now: int) -> None:
        pass


class PersistentSource(SourceModel):
    """Always has a cell to send."""


class StaggeredSource(SourceModel):
    """Persistent source that stays silent before its start time."""

    kind = STAGGERED

    def __init__(self, start: int, packet_len: int = 30):
        super().__init__(packet_len)
        self._start = int(start)

    @property
    def start(self) -> int:
        return self._start

    def has_cell(self, now: int) -> bool:
        return now >= self._start

    def next_ready(self, now: int) -> Optional[int]:
        return now if now >= self._start else self._start


class BurstySource(SourceModel):
    """Alternates bursts of cells with idle gaps.

    Open loop: the next burst begins a fixed idle gap after the last cell of
    the previous burst was sent.  Closed loop: the idle gap starts only once
    the previous burst has been delivered in full (the delivery notification
    comes from the destination).  Each burst is one packet: its last cell
    carries the end-of-message mark.
    """

    kind = BURSTY

    def __init__(self, burst_len: int, idle: int, loop: str = OPEN_LOOP,
                 start: int = 0):
        super().__init__(packet_len=burst_len)
        if burst_len < 1:
            raise ValueError("burst_len must be >= 1")
        if loop not in (OPEN_LOOP, CLOSED_LOOP):
            raise ValueError(f"unknown loop mode {loop!r}")
        self.burst_len = burst_len
        self.idle = int(idle)
        self.loop = loop
        self._start = int(start)
        self._left_in_burst = burst_len
        self._resume_at = int(start)
        self._awaiting_delivery = False
        self.bursts_started = 0

    @property
    def start(self) -> int:
        return self._start

    def has_cell(self, now: int) -> bool:
        if self._awaiting_delivery:
            return False
        return now >= self._resume_at

    def next_ready(self, now: int) -> Optional[int]:
        if self._awaiting_delivery:
            return None  # woken explicitly by the delivery notification
        return now if now >= self._resume_at else self._resume_at

    def take_cell_flags(self, now: int) -> bool:
        if self._left_in_burst == self.burst_len:
            self.bursts_started += 1
        self._left_in_burst -= 1
        if self._left_in_burst == 0:
            self._left_in_burst = self.burst_len
            if self.loop == CLOSED_LOOP:
                self._awaiting_delivery = True
            else:
                self._resume_at = now + self.idle
            return True
        return False

    def on_burst_delivered(self, now: int) -> None:
        if self.loop == CLOSED_LOOP and self._awaiting_delivery:
            self._awaiting_delivery = False
            self._resume_at = now + self.idle


def next_emission(model: SourceModel, now: int, acr) -> int:
    """Next cell time for a source that just acted at ``now``.

    An active source spaces cells 1/acr apart; staggered and bursty models
    defer to their start or resume times.  Raises SourceIdle when the
    allowed rate is zero (the source must wait for a rate increase).
    """
    if acr <= 0:
        raise SourceIdle("allowed cell rate is zero")
    gap = Fraction(1_000_000) / Fraction(acr)
    ready = model.next_ready(now)
    if ready is None:
        raise SourceIdle("closed-loop source awaiting burst delivery")
    if ready > now:
        return ready
    exact = now + gap
    return -(-exact.numerator // exact.denominator)  # ceil to whole ticks
