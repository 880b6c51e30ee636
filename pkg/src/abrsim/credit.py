"""Link-by-link per-VC credit flow control.

Every credit-gated hop keeps per-VC queues at the sender and per-VC buffer
accounting at the receiver.  The receiver hands out cumulative transmission
permissions ("limits"); a sender may put a cell on the wire only while its
sent count is below the limit, which structurally bounds the receiver's
queue by its buffer allocation: that is the zero-loss guarantee.

Credits return in batches of ``n2`` freed buffers.  Resynchronization rides
in-band: the sender periodically emits a sync cell carrying its cumulative
sent count; because the link is FIFO, every earlier cell has either arrived
or been lost by the time the sync cell lands, so lost = sent - received
needs no in-flight adjustment.
"""
from __future__ import annotations

import math
from collections import deque
from fractions import Fraction
from typing import Dict, Optional

from .engine import Link, Node
from .model import DATA, RM, Cell

N2_DEFAULT = 10
MIN_GRANT_DEFAULT = 2


class UnknownVc(KeyError):
    """The VC is not registered on this credit-controlled link."""


class NegativeLoss(RuntimeError):
    """Resync counters claim more cells received than were ever sent."""


class InsufficientBuffer(ValueError):
    """The shared buffer cannot cover the minimum grant of every VC."""


class CreditProtocolError(RuntimeError):
    """A sender outran its permission; the zero-loss invariant would break."""


def static_credit_size(link: Link) -> int:
    """Minimum credit for full-rate flow of one VC: rate x round trip.

    The round trip is twice the one-way propagation delay; degenerate
    zero-delay links are clamped to a single cell of credit.
    """
    cells = Fraction(link.rate) * 2 * link.delay / 1_000_000
    size = -(-cells.numerator // cells.denominator)
    return max(1, size)


def adaptive_allocate(usage: Dict[object, int], total_buffer: int,
                      min_grant: int = MIN_GRANT_DEFAULT) -> Dict[object, int]:
    """Split a shared buffer across VCs in proportion to recent usage.

    Inactive VCs keep a small fixed grant; active VCs share the remainder
    proportionally, floored at the fixed grant.  The result never exceeds
    ``total_buffer``.
    """
    vcs = list(usage)
    if total_buffer < len(vcs) * min_grant:
        raise InsufficientBuffer(
            f"buffer {total_buffer} < {len(vcs)} vcs x min grant {min_grant}")
    active = [vc for vc in vcs if usage[vc] > 0]
    inactive = [vc for vc in vcs if usage[vc] <= 0]
    alloc = {vc: min_grant for vc in inactive}
    pool = total_buffer - min_grant * len(inactive)
    total_usage = sum(usage[vc] for vc in active)
    if not active:
        return alloc
    for vc in active:
        alloc[vc] = max(min_grant, pool * usage[vc] // total_usage)
    excess = sum(alloc[vc] for vc in active) - pool
    while excess > 0:
        vc = max(active, key=lambda v: (alloc[v], str(v)))
        give_back = min(excess, alloc[vc] - min_grant)
        alloc[vc] -= give_back
        excess -= give_back
    return alloc


class SyncCell:
    """In-band resynchronization marker carrying the sender's sent count."""

    __slots__ = ("vc", "sender_sent", "kind", "emitted_at")

    def __init__(self, vc, sender_sent: int, emitted_at: int = 0):
        self.vc = vc
        self.sender_sent = sender_sent
        self.kind = "sync"
        self.emitted_at = emitted_at

    def __repr__(self):
        return f"SyncCell(vc={self.vc}, sent={self.sender_sent})"


class CreditCell:
    """Receiver-to-sender grant of additional transmission permissions."""

    __slots__ = ("vc", "granted", "receiver_count", "kind", "emitted_at")

    def __init__(self, vc, granted: int, receiver_count: int,
                 emitted_at: int = 0):
        if granted < 0:
            raise ValueError("granted must be >= 0")
        self.vc = vc
        self.granted = granted
        self.receiver_count = receiver_count
        self.kind = "credit"
        self.emitted_at = emitted_at

    def __repr__(self):
        return f"CreditCell(vc={self.vc}, granted={self.granted})"


class CreditSender:
    """Sender-side balances for one outgoing link."""

    def __init__(self):
        self.balance: Dict[object, int] = {}
        self.cells_sent: Dict[object, int] = {}

    def register(self, vc, initial_credit: int) -> None:
        self.balance[vc] = initial_credit
        self.cells_sent[vc] = 0

    def gate(self, vc) -> bool:
        """True when one more cell may be sent on ``vc``."""
        try:
            return self.balance[vc] > 0
        except KeyError:
            raise UnknownVc(vc) from None

    def consume(self, vc) -> None:
        if self.balance[vc] <= 0:
            raise CreditProtocolError(f"vc {vc} sent without credit")
        self.balance[vc] -= 1
        self.cells_sent[vc] += 1

    def add(self, vc, granted: int) -> None:
        if vc not in self.balance:
            raise UnknownVc(vc)
        self.balance[vc] += granted


def credit_send_gate(sender: CreditSender, vc) -> bool:
    """Permission test: a VC may transmit iff its balance is positive."""
    return sender.gate(vc)


class CreditReceiver:
    """Receiver-side buffer accounting for one incoming link.

    ``limit`` is the cumulative permission extended to the sender; the grant
    rule keeps limit <= forwarded + allocation per VC and total outstanding
    permissions within the shared buffer, so arrivals can never overflow.
    """

    def __init__(self, total_buffer: int, n2: int = N2_DEFAULT):
        self.total_buffer = total_buffer
        self.n2 = n2
        self.allocation: Dict[object, int] = {}
        self.limit: Dict[object, int] = {}
        self.received: Dict[object, int] = {}
        self.forwarded: Dict[object, int] = {}
        self.lost: Dict[object, int] = {}

    def register(self, vc, allocation: int) -> None:
        if sum(self.allocation.values()) + allocation > self.total_buffer:
            raise InsufficientBuffer(
                f"allocations exceed shared buffer {self.total_buffer}")
        self.allocation[vc] = allocation
        self.limit[vc] = allocation
        self.received[vc] = 0
        self.forwarded[vc] = 0
        self.lost[vc] = 0

    def outstanding(self) -> int:
        return sum(self.limit[vc] - self.forwarded[vc] - self.lost[vc]
                   for vc in self.limit)

    def occupancy(self, vc) -> int:
        return self.received[vc] - self.forwarded[vc]

    def on_received(self, vc) -> None:
        if vc not in self.limit:
            raise UnknownVc(vc)
        self.received[vc] += 1
        if self.received[vc] + self.lost[vc] > self.limit[vc]:
            raise CreditProtocolError(
                f"vc {vc} exceeded its permission; buffer would overflow")

    def on_forwarded(self, vc) -> int:
        """Account one forwarded cell; returns a credit grant (0 = batched)."""
        self.forwarded[vc] += 1
        return self._try_grant(vc)

    def resync(self, vc, sender_sent: int) -> int:
        """Reconcile counters; reissues credits for newly detected losses."""
        if vc not in self.limit:
            raise UnknownVc(vc)
        lost_delta = sender_sent - self.received[vc] - self.lost[vc]
        if lost_delta < 0:
            raise NegativeLoss(
                f"vc {vc}: receiver saw {self.received[vc]} of {sender_sent}")
        self.lost[vc] += lost_delta
        return lost_delta

    def reissue_after_resync(self, vc) -> int:
        return self._try_grant(vc)

    def set_allocations(self, alloc: Dict[object, int]) -> None:
        for vc, amount in alloc.items():
            if vc not in self.limit:
                raise UnknownVc(vc)
            self.allocation[vc] = amount

    def _try_grant(self, vc) -> int:
        freed = self.forwarded[vc] + self.lost[vc]
        desired = freed + self.allocation[vc] - self.limit[vc]
        if desired <= 0:
            return 0
        headroom = self.total_buffer - self.outstanding()
        grant = min(desired, headroom)
        batch = min(self.n2, self.allocation[vc])
        if grant < batch:
            return 0
        self.limit[vc] += grant
        return grant


def resync(receiver: CreditReceiver, vc, sender_sent: int,
           receiver_received: Optional[int] = None) -> int:
    """Count-reconciliation entry point; see CreditReceiver.resync."""
    if receiver_received is not None and receiver_received != receiver.received[vc]:
        raise ValueError("receiver count disagrees with receiver state")
    return receiver.resync(vc, sender_sent)


# --------------------------------------------------------------------------
# Simulation nodes.


class _Transmitter:
    """Round-robin server of per-VC queues feeding one outgoing link."""

    __slots__ = ("link", "sender", "vcs", "queues", "rr", "busy")

    def __init__(self, link: Link, sender: CreditSender):
        self.link = link
        self.sender = sender
        self.vcs = []
        self.queues: Dict[object, deque] = {}
        self.rr = 0
        self.busy = False

    def register(self, vc, initial_credit: int) -> None:
        self.vcs.append(vc)
        self.queues[vc] = deque()
        self.sender.register(vc, initial_credit)

    def queued(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def pick(self):
        n = len(self.vcs)
        for k in range(n):
            vc = self.vcs[(self.rr + k) % n]
            if self.queues[vc] and self.sender.balance[vc] > 0:
                self.rr = (self.rr + k + 1) % n
                return vc
        return None


class _CreditNodeMixin:
    """Shared transmit/accounting machinery of credit sources and switches."""

    def _init_credit(self):
        self.transmitters: Dict[object, _Transmitter] = {}
        self.receivers: Dict[object, CreditReceiver] = {}
        self.reverse_of: Dict[object, Link] = {}
        self.vc_out: Dict[object, object] = {}
        self.vc_in: Dict[object, object] = {}
        self.credit_cells_free = False

    def add_out_link(self, link: Link) -> _Transmitter:
        tx = _Transmitter(link, CreditSender())
        self.transmitters[link.link_id] = tx
        return tx

    def add_in_link(self, link: Link, reverse: Link, total_buffer: int,
                    n2: int = N2_DEFAULT) -> CreditReceiver:
        rx = CreditReceiver(total_buffer, n2)
        self.receivers[link.link_id] = rx
        self.reverse_of[link.link_id] = reverse
        return rx

    def queued_cell_count(self) -> int:
        return sum(tx.queued() for tx in self.transmitters.values())

    def _try_send(self, out_id) -> None:
        tx = self.transmitters[out_id]
        if tx.busy:
            return
        vc = tx.pick()
        if vc is None:
            return
        now = self.sim.clock
        cell = tx.queues[vc].popleft()
        tx.sender.consume(vc)
        arrival = tx.link.offer(cell, now)
        tx.busy = True
        self.sim.schedule_timer(arrival - tx.link.delay, self,
                                ("txdone", out_id, vc))

    def _send_credit(self, in_id, vc, granted: int) -> None:
        rx = self.receivers[in_id]
        now = self.sim.clock
        cell = CreditCell(vc, granted, rx.received[vc], emitted_at=now)
        self.sim.note_emitted(cell)
        reverse = self.reverse_of[in_id]
        if self.credit_cells_free:
            reverse.inject(cell, now)
        else:
            reverse.offer(cell, now)

    def _after_forward(self, vc) -> None:
        """Free the upstream buffer slot once the cell has left this node."""
        in_id = self.vc_in.get(vc)
        if in_id is None:
            return
        grant = self.receivers[in_id].on_forwarded(vc)
        if grant:
            self._send_credit(in_id, vc, grant)


class CreditSource(Node, _CreditNodeMixin):
    """Source gated by the credits of its access link; paces at PCR."""

    def __init__(self, node_id, vc, model, pcr, out_link: Link):
        super().__init__(node_id)
        self._init_credit()
        self.vc = vc
        self.model = model
        self.pcr = float(pcr)
        self.out_link = out_link
        self.vc_out[vc] = out_link.link_id
        self._next_f = 0.0
        self._pending = False
        self._sleeping = False
        self.data_sent = 0
        self.resync_period: Optional[int] = None

    def start(self):
        at = self.model.start
        self._next_f = float(at)
        self.sim.schedule_wake(at, self)
        if self.resync_period:
            self.sim.schedule_timer(at + self.resync_period, self, "resync")

    def wake(self):
        now = self.sim.clock
        ready = self.model.next_ready(now)
        if ready is None:
            self._sleeping = True
            return
        if ready > now:
            self._next_f = float(ready)
            self.sim.schedule_wake(ready, self)
            return
        tx = self.transmitters[self.out_link.link_id]
        if tx.busy or not tx.sender.balance[self.vc] > 0:
            self._pending = True
            return
        self._emit(now, tx)
        self._schedule_next(now)

    def _emit(self, now, tx):
        eom = self.model.take_cell_flags(now)
        cell = Cell(self.vc, DATA, eom=eom, emitted_at=now)
        self.sim.note_emitted(cell)
        if self.sim.metrics is not None:
            self.sim.metrics.on_emit(self.vc, cell)
        self.data_sent += 1
        tx.queues[self.vc].append(cell)
        self._try_send(self.out_link.link_id)

    def _schedule_next(self, now):
        self._next_f = max(self._next_f, float(now)) + 1e6 / self.pcr
        at = int(math.ceil(self._next_f))
        self.sim.schedule_wake(max(at, now), self)

    def _resume_if_pending(self):
        if self._pending:
            now = self.sim.clock
            tx = self.transmitters[self.out_link.link_id]
            if not tx.busy and tx.sender.balance[self.vc] > 0 \
                    and self.model.has_cell(now):
                self._pending = False
                self._emit(now, tx)
                self._schedule_next(now)

    def on_timer(self, tag):
        if tag == "resync":
            now = self.sim.clock
            tx = self.transmitters[self.out_link.link_id]
            sync = SyncCell(self.vc, tx.sender.cells_sent[self.vc],
                            emitted_at=now)
            self.sim.note_emitted(sync)
            self.out_link.offer(sync, now)
            self.sim.schedule_timer(now + self.resync_period, self, "resync")
            return
        what, out_id, vc = tag
        assert what == "txdone"
        self.transmitters[out_id].busy = False
        self._resume_if_pending()

    def on_cell(self, cell, link):
        if isinstance(cell, CreditCell):
            tx = self.transmitters[self.out_link.link_id]
            tx.sender.add(cell.vc, cell.granted)
            self.sim.note_delivered(cell)
            self._resume_if_pending()
        else:
            raise ValueError(f"credit source got unexpected {cell!r}")

    def notify_burst_delivered(self):
        now = self.sim.clock
        self.model.on_burst_delivered(now)
        if self._sleeping:
            self._sleeping = False
            ready = self.model.next_ready(now)
            if ready is not None:
                self._next_f = float(ready)
                self.sim.schedule_wake(ready, self)


class CreditSwitch(Node, _CreditNodeMixin):
    """Switch with per-VC queues, round-robin service, and credit returns."""

    def __init__(self, node_id):
        super().__init__(node_id)
        self._init_credit()
        self.adaptive: Dict[object, dict] = {}  # in_link id -> settings
        self.drop_filter = None  # test hook: callable(cell) -> bool

    def register_vc(self, vc, in_link: Link, out_link: Link) -> None:
        self.vc_in[vc] = in_link.link_id
        self.vc_out[vc] = out_link.link_id

    def enable_adaptive(self, in_link_id, period: int,
                        min_grant: int = MIN_GRANT_DEFAULT) -> None:
        self.adaptive[in_link_id] = {
            "period": period,
            "min_grant": min_grant,
            "last_forwarded": {},
        }
        self.sim.schedule_timer(self.sim.clock + period, self,
                                ("adapt", in_link_id))

    def on_cell(self, cell, link):
        now = self.sim.clock
        if isinstance(cell, CreditCell):
            out_id = self.vc_out[cell.vc]
            self.transmitters[out_id].sender.add(cell.vc, cell.granted)
            self.sim.note_delivered(cell)
            self._try_send(out_id)
            return
        if isinstance(cell, SyncCell):
            rx = self.receivers[link.link_id]
            lost = rx.resync(cell.vc, cell.sender_sent)
            if lost:
                grant = rx.reissue_after_resync(cell.vc)
                if grant:
                    self._send_credit(link.link_id, cell.vc, grant)
            self.sim.note_delivered(cell)
            self._forward_sync(cell, now)
            return
        # Data cell.
        if self.drop_filter is not None and self.drop_filter(cell):
            self.sim.note_dropped(cell, link)
            return
        rx = self.receivers[link.link_id]
        rx.on_received(cell.vc)
        out_id = self.vc_out[cell.vc]
        self.transmitters[out_id].queues[cell.vc].append(cell)
        self._try_send(out_id)

    def _forward_sync(self, cell, now) -> None:
        """Restate the sync downstream with this hop's own sent count."""
        out_id = self.vc_out[cell.vc]
        tx = self.transmitters[out_id]
        sync = SyncCell(cell.vc, tx.sender.cells_sent[cell.vc], emitted_at=now)
        self.sim.note_emitted(sync)
        tx.link.offer(sync, now)

    def on_timer(self, tag):
        if tag[0] == "txdone":
            _, out_id, vc = tag
            self.transmitters[out_id].busy = False
            self._after_forward(vc)
            self._try_send(out_id)
            return
        if tag[0] == "adapt":
            _, in_id = tag
            self._reallocate(in_id)
            settings = self.adaptive[in_id]
            self.sim.schedule_timer(self.sim.clock + settings["period"], self,
                                    ("adapt", in_id))
            return
        raise ValueError(f"unknown timer {tag!r}")

    def _reallocate(self, in_id) -> None:
        rx = self.receivers[in_id]
        settings = self.adaptive[in_id]
        last = settings["last_forwarded"]
        usage = {}
        for vc in rx.allocation:
            done = rx.forwarded[vc]
            usage[vc] = done - last.get(vc, 0)
            last[vc] = done
        alloc = adaptive_allocate(usage, rx.total_buffer,
                                  settings["min_grant"])
        rx.set_allocations(alloc)
        for vc in rx.allocation:
            grant = rx._try_grant(vc)
            if grant:
                self._send_credit(in_id, vc, grant)


class CreditSink(Node, _CreditNodeMixin):
    """Destination: consumes cells instantly and returns credits."""

    def __init__(self, node_id):
        super().__init__(node_id)
        self._init_credit()
        self.sources = {}
        self.drop_filter = None
        self.delivered_data = 0

    def add_vc(self, vc, in_link: Link, source=None) -> None:
        self.vc_in[vc] = in_link.link_id
        if source is not None:
            self.sources[vc] = source

    def on_cell(self, cell, link):
        now = self.sim.clock
        if isinstance(cell, SyncCell):
            rx = self.receivers[link.link_id]
            lost = rx.resync(cell.vc, cell.sender_sent)
            if lost:
                grant = rx.reissue_after_resync(cell.vc)
                if grant:
                    self._send_credit(link.link_id, cell.vc, grant)
            self.sim.note_delivered(cell)
            return
        if isinstance(cell, CreditCell):
            raise ValueError("sink does not hold credit balances")
        if self.drop_filter is not None and self.drop_filter(cell):
            self.sim.note_dropped(cell, link)
            return
        rx = self.receivers[link.link_id]
        rx.on_received(cell.vc)
        self.delivered_data += 1
        self.sim.note_delivered(cell)
        if self.sim.metrics is not None:
            self.sim.metrics.on_delivery(cell.vc, cell, now)
        grant = rx.on_forwarded(cell.vc)
        if grant:
            self._send_credit(link.link_id, cell.vc, grant)
        if cell.eom:
            source = self.sources.get(cell.vc)
            if source is not None:
                source.notify_burst_delivered()
