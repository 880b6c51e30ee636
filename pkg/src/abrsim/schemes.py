"""Rate-based closed loop: ABR end systems and pluggable switch algorithms.

Sources pace cells at their allowed cell rate (ACR), decay the rate slightly
on every data cell, insert one forward RM cell after every ``nrm`` data
cells, and adjust ACR from returning RM cells.  Switch ports implement the
individual control laws: binary EFCI marking, EPRCA's averaged fair share,
the target-utilization-band scheme, proportional fair-share control, and
backward congestion notification.
"""
from __future__ import annotations

import math
from fractions import Fraction
from typing import Optional

from .engine import Link, Node
from .model import BACKWARD, DATA, FORWARD, RM, Cell, RmPayload, make_forward_rm
from .traffic import SourceModel

QUEUE_LENGTH = "queue_length"
QUEUE_GROWTH = "queue_growth"

# Default control parameters.  The averaging factor and down-pressure factor
# are the published suggestions; the others are tunable artifacts of this
# simulator (every one is a configuration knob).
ALPHA_DEFAULT = 1.0 / 16.0
SW_DPF_DEFAULT = 7.0 / 8.0
RDF_DEFAULT = 4095.0 / 4096.0
NRM_DEFAULT = 32
AIR_DIVISOR_DEFAULT = 256
INITIAL_ACR_DIVISOR_DEFAULT = 10
QUEUE_THRESHOLD_DEFAULT = 100
GROWTH_WINDOW_DEFAULT = 50


def _ceil_ticks(value: float) -> int:
    return int(math.ceil(value))


class SourceState:
    """Per-VC rate state of an ABR source."""

    __slots__ = ("pcr", "mcr", "acr", "air", "rdf", "nrm", "data_since_rm")

    def __init__(self, pcr, mcr=0.0, initial_acr=None, air=None,
                 rdf=RDF_DEFAULT, nrm=NRM_DEFAULT):
        self.pcr = float(pcr)
        self.mcr = float(mcr)
        if not 0 <= self.mcr <= self.pcr:
            raise ValueError("need 0 <= mcr <= pcr")
        if not 0 < rdf < 1:
            raise ValueError("rdf must lie in (0, 1)")
        if nrm < 1:
            raise ValueError("nrm must be >= 1")
        self.air = float(air) if air is not None else self.pcr / AIR_DIVISOR_DEFAULT
        self.rdf = float(rdf)
        self.nrm = int(nrm)
        if initial_acr is None:
            initial_acr = self.pcr / INITIAL_ACR_DIVISOR_DEFAULT
        self.acr = min(self.pcr, max(self.mcr, float(initial_acr)))
        self.data_since_rm = 0

    def on_data_sent(self) -> bool:
        """Decay ACR by RDF; True when the next slot must carry an RM cell."""
        decayed = self.acr * self.rdf
        self.acr = decayed if decayed > self.mcr else self.mcr
        self.data_since_rm += 1
        if self.data_since_rm >= self.nrm:
            self.data_since_rm = 0
            return True
        return False

    def on_backward_rm(self, rm: RmPayload) -> None:
        """Apply returned feedback: ER always binds, AIR only when CI clear."""
        if rm.ci:
            acr = min(self.acr, rm.er)
        else:
            acr = min(self.acr + self.air, rm.er, self.pcr)
        self.acr = acr if acr > self.mcr else self.mcr


def destination_turnaround(last_data_efci: bool, rm: RmPayload) -> RmPayload:
    """Turn a forward RM around: CI accumulates the last data cell's EFCI."""
    if rm.direction != FORWARD:
        raise ValueError("only forward RM cells are turned around")
    rm.direction = BACKWARD
    rm.ci = rm.ci or last_data_efci
    return rm


class AbrSource(Node):
    """Source end system: paces cells at ACR and reacts to backward RMs."""

    def __init__(self, node_id, vc, state: SourceState, model: SourceModel,
                 out_link: Link, becn_mode=False,
                 becn_recovery_base=10_000, becn_recovery_min=500):
        super().__init__(node_id)
        self.vc = vc
        self.state = state
        self.model = model
        self.out_link = out_link
        self.becn_mode = becn_mode
        self.becn_recovery_base = becn_recovery_base
        self.becn_recovery_min = becn_recovery_min
        self._rm_due = False
        self._next_f = 0.0
        self._sleeping = False
        self._last_becn_at = None
        self.data_sent = 0
        self.rm_sent = 0

    def start(self):
        at = self.model.start
        self._next_f = float(at)
        self.sim.schedule_wake(at, self)
        if self.becn_mode:
            self.sim.schedule_timer(at + self._recovery_period(), self,
                                    "recovery")

    # -- emission ------------------------------------------------------------

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
        self._emit(now)
        acr = self.state.acr
        if acr <= 0:
            self._sleeping = True
            return
        self._next_f += 1e6 / acr
        at = _ceil_ticks(self._next_f)
        if at < now:
            at = now
        self.sim.schedule_wake(at, self)

    def _emit(self, now):
        st = self.state
        if self._rm_due and not self.becn_mode:
            cell = make_forward_rm(self.vc, st.acr, st.pcr, emitted_at=now)
            self._rm_due = False
            self.rm_sent += 1
        else:
            eom = self.model.take_cell_flags(now)
            cell = Cell(self.vc, DATA, eom=eom, emitted_at=now)
            if not self.becn_mode:
                self._rm_due = st.on_data_sent()
            self.data_sent += 1
        self.sim.note_emitted(cell)
        if self.sim.metrics is not None:
            self.sim.metrics.on_emit(self.vc, cell)
        self.out_link.offer(cell, now)

    # -- feedback ------------------------------------------------------------

    def on_cell(self, cell, link):
        if cell.kind != RM or cell.rm.direction != BACKWARD:
            raise ValueError(f"source {self.node_id} got unexpected {cell!r}")
        if self.becn_mode:
            self._on_becn()
        else:
            self.state.on_backward_rm(cell.rm)
        self.sim.note_delivered(cell)

    def _on_becn(self):
        st = self.state
        st.acr = max(st.mcr, st.acr / 2.0)
        self._last_becn_at = self.sim.clock

    def _recovery_period(self) -> int:
        # Proportional to the current rate: slow VCs recover sooner.
        st = self.state
        period = self.becn_recovery_base * (st.acr / st.pcr)
        return max(self.becn_recovery_min, _ceil_ticks(period))

    def on_timer(self, tag):
        if tag != "recovery":
            raise ValueError(f"unknown timer {tag!r}")
        now = self.sim.clock
        period = self._recovery_period()
        quiet = (self._last_becn_at is None
                 or now - self._last_becn_at >= period)
        if quiet:
            st = self.state
            st.acr = min(st.pcr, st.acr * 2.0)
        self.sim.schedule_timer(now + self._recovery_period(), self, "recovery")

    def notify_burst_delivered(self):
        now = self.sim.clock
        self.model.on_burst_delivered(now)
        if self._sleeping:
            self._sleeping = False
            ready = self.model.next_ready(now)
            if ready is not None:
                self._next_f = float(ready)
                self.sim.schedule_wake(ready, self)


class AbrDestination(Node):
    """Destination end system: records deliveries and turns RM cells around."""

    def __init__(self, node_id):
        super().__init__(node_id)
        self.last_efci = {}
        self.backward_out = {}   # vc -> Link toward the source
        self.sources = {}        # vc -> AbrSource, for closed-loop bursts
        self.delivered_data = 0

    def add_vc(self, vc, backward_link: Link, source: Optional[AbrSource] = None):
        self.backward_out[vc] = backward_link
        if source is not None:
            self.sources[vc] = source

    def on_cell(self, cell, link):
        now = self.sim.clock
        if cell.kind == DATA:
            self.last_efci[cell.vc] = cell.efci
            self.delivered_data += 1
            self.sim.note_delivered(cell)
            if self.sim.metrics is not None:
                self.sim.metrics.on_delivery(cell.vc, cell, now)
            if cell.eom:
                source = self.sources.get(cell.vc)
                if source is not None:
                    source.notify_burst_delivered()
            return
        rm = cell.rm
        if rm.direction == FORWARD:
            destination_turnaround(self.last_efci.get(cell.vc, False), rm)
            self.backward_out[cell.vc].offer(cell, now)
        else:
            raise ValueError("destination received a backward RM cell")


# --------------------------------------------------------------------------
# Switch port algorithms.


class EfciPrcaPort:
    """Binary feedback: set EFCI on data cells while the port is congested.

    The detector is either an absolute queue threshold or queue growth over
    the last K processed cells.  ``forced_marking`` superimposes an
    independent per-cell marking probability (test mode for the beat-down
    reproduction); it needs the simulation's seeded RNG.
    """

    kind = "efci_prca"

    def __init__(self, queue_threshold=QUEUE_THRESHOLD_DEFAULT,
                 detector=QUEUE_LENGTH, growth_window=GROWTH_WINDOW_DEFAULT,
                 forced_marking=0.0, rng=None):
        if detector not in (QUEUE_LENGTH, QUEUE_GROWTH):
            raise ValueError(f"unknown congestion detector {detector!r}")
        self.queue_threshold = queue_threshold
        self.detector = detector
        self.growth_window = growth_window
        self.forced_marking = forced_marking
        self.rng = rng
        self._cells_in_window = 0
        self._last_queue_len = 0
        self._growing = False

    def congested(self, occupancy: int) -> bool:
        if self.detector == QUEUE_LENGTH:
            return occupancy > self.queue_threshold
        return self._growing

    def on_forward_data(self, cell, occupancy: int) -> Cell:
        if self.detector == QUEUE_GROWTH:
            self._cells_in_window += 1
            if self._cells_in_window >= self.growth_window:
                self._growing = occupancy > self._last_queue_len
                self._last_queue_len = occupancy
                self._cells_in_window = 0
        if self.congested(occupancy):
            cell.mark_efci()
        if self.forced_marking and self.rng.random() < self.forced_marking:
            cell.mark_efci()
        return cell

    def on_backward_rm(self, rm, occupancy: int) -> None:
        pass

    def on_cell_input(self, vc) -> None:
        pass


class EprcaPort(EfciPrcaPort):
    """EPRCA: exponentially averaged CCR sets the fair share for ER cuts."""

    kind = "eprca"

    def __init__(self, queue_threshold=QUEUE_THRESHOLD_DEFAULT,
                 alpha=ALPHA_DEFAULT, sw_dpf=SW_DPF_DEFAULT,
                 detector=QUEUE_LENGTH, growth_window=GROWTH_WINDOW_DEFAULT,
                 ci_threshold=None, macr_init=0.0,
                 forced_marking=0.0, rng=None):
        super().__init__(queue_threshold, detector, growth_window,
                         forced_marking, rng)
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < sw_dpf < 1:
            raise ValueError("sw_dpf must lie in (0, 1)")
        self.alpha = alpha
        self.sw_dpf = sw_dpf
        self.ci_threshold = (queue_threshold if ci_threshold is None
                             else ci_threshold)
        self.macr = float(macr_init)

    def on_backward_rm(self, rm, occupancy: int) -> None:
        self.macr = (1.0 - self.alpha) * self.macr + self.alpha * rm.ccr
        if self.congested(occupancy):
            fair = self.sw_dpf * self.macr
            if rm.ccr > fair:
                rm.bound_er(fair)
        if occupancy > self.ci_threshold:
            rm.ci = True


class OsuPort:
    """Target-utilization-band control from measured input rate.

    Every averaging interval the port computes the load factor
    z = input rate / target rate and the fair share target/active-count.
    Returning RM cells are bounded using the VC's declared current rate:
    far from z = 1 every VC scales by 1/z; inside the band overloading VCs
    are pushed down harder (divide by z/(1-delta)) and underloading VCs are
    let up (divide by z/(1+delta)), which drains the spread toward the fair
    share while holding the load near target.  Count-based mode additionally
    offers everyone below the fair share the fair share itself, regardless
    of load.
    """

    kind = "osu"

    def __init__(self, link_rate, target_util=0.90, interval=1000,
                 delta=0.1, count_based=False):
        if not 0 < delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 < target_util < 1:
            raise ValueError("target utilization must lie in (0, 1)")
        if interval < 1:
            raise ValueError("averaging interval must be >= 1 tick")
        self.target_rate = float(target_util) * float(link_rate)
        self.interval = int(interval)
        self.delta = float(delta)
        self.count_based = count_based
        self.measured_input = 0
        self.active_vcs = set()
        self.z: Optional[float] = None
        self.fair_share: Optional[float] = None
        self.n_active = 0

    def on_cell_input(self, vc) -> None:
        self.measured_input += 1
        self.active_vcs.add(vc)

    def on_forward_data(self, cell, occupancy: int) -> Cell:
        return cell

    def end_interval(self) -> None:
        input_rate = self.measured_input * 1e6 / self.interval
        self.z = input_rate / self.target_rate
        self.n_active = len(self.active_vcs)
        self.fair_share = self.target_rate / max(1, self.n_active)
        self.measured_input = 0
        self.active_vcs.clear()

    def feedback(self, rm, vc_rate=None) -> None:
        """Bound the ER of a returning RM cell from the last interval's z."""
        if self.z is None:
            return
        rate = float(rm.ccr if vc_rate is None else vc_rate)
        z = self.z
        fair = self.fair_share
        if self.count_based and rate <= fair:
            rm.bound_er(fair)
            return
        if z <= 1e-9:
            return  # no measured load; nothing to scale against
        low, high = 1.0 - self.delta, 1.0 + self.delta
        if z < low or z > high:
            bound = rate / z
        elif rate > fair:
            bound = rate / (z / low)
        else:
            bound = rate / (z / high)
        rm.bound_er(bound)

    def on_backward_rm(self, rm, occupancy: int) -> None:
        self.feedback(rm)


class CapcPort:
    """Proportional control of a single per-port fair share.

    Underload (z < 1) multiplies the share by min(ERU, 1 + (1-z)*Rup);
    overload by max(ERF, 1 - (z-1)*Rdn).  The share is the highest rate the
    port grants any VC; CI is set while the queue sits above threshold.
    """

    kind = "capc"

    def __init__(self, link_rate, n_vcs=1, target_util=0.90, interval=1000,
                 rup=0.06, rdn=0.5, eru=1.5, erf=0.5,
                 queue_threshold=QUEUE_THRESHOLD_DEFAULT):
        self.target_rate = float(target_util) * float(link_rate)
        self.interval = int(interval)
        self.rup = float(rup)
        self.rdn = float(rdn)
        self.eru = float(eru)
        self.erf = float(erf)
        self.queue_threshold = queue_threshold
        self.fair_share = self.target_rate / max(1, n_vcs)
        self.measured_input = 0
        self.z: Optional[float] = None

    def on_cell_input(self, vc) -> None:
        self.measured_input += 1

    def on_forward_data(self, cell, occupancy: int) -> Cell:
        return cell

    def update_fair_share(self, z: float) -> None:
        if z < 0:
            raise ValueError("load factor cannot be negative")
        if z < 1.0:
            factor = min(self.eru, 1.0 + (1.0 - z) * self.rup)
        else:
            factor = max(self.erf, 1.0 - (z - 1.0) * self.rdn)
        self.fair_share *= factor

    def end_interval(self) -> None:
        input_rate = self.measured_input * 1e6 / self.interval
        self.z = input_rate / self.target_rate
        self.measured_input = 0
        self.update_fair_share(self.z)

    def on_backward_rm(self, rm, occupancy: int) -> None:
        rm.bound_er(self.fair_share)
        if occupancy > self.queue_threshold:
            rm.ci = True


class BecnPort:
    """Backward notification: one RM toward the source per congested spacing."""

    kind = "becn"

    def __init__(self, queue_threshold=QUEUE_THRESHOLD_DEFAULT, min_gap=0):
        self.queue_threshold = queue_threshold
        self.min_gap = min_gap
        self.last_becn_sent = {}

    def should_notify(self, vc, occupancy: int, now: int) -> bool:
        if occupancy <= self.queue_threshold:
            return False
        last = self.last_becn_sent.get(vc)
        if last is not None and now - last < self.min_gap:
            return False
        self.last_becn_sent[vc] = now
        return True

    def on_forward_data(self, cell, occupancy: int) -> Cell:
        return cell

    def on_backward_rm(self, rm, occupancy: int) -> None:
        pass

    def on_cell_input(self, vc) -> None:
        pass


class RateSwitch(Node):
    """Switch running one control algorithm instance per forward port."""

    def __init__(self, node_id):
        super().__init__(node_id)
        self.forward_out = {}   # vc -> Link
        self.backward_out = {}  # vc -> Link
        self.ports = {}         # link_id -> port algorithm state

    def add_vc(self, vc, forward_link: Link, backward_link: Optional[Link]):
        self.forward_out[vc] = forward_link
        if backward_link is not None:
            self.backward_out[vc] = backward_link

    def set_port(self, link_id, port) -> None:
        self.ports[link_id] = port
        interval = getattr(port, "interval", None)
        if interval:
            self.sim.schedule_timer(self.sim.clock + interval, self,
                                    ("interval", link_id))

    def on_timer(self, tag):
        what, link_id = tag
        if what != "interval":
            raise ValueError(f"unknown timer {tag!r}")
        port = self.ports[link_id]
        port.end_interval()
        self.sim.schedule_timer(self.sim.clock + port.interval, self, tag)

    def on_cell(self, cell, in_link):
        now = self.sim.clock
        if cell.kind == RM and cell.rm.direction == BACKWARD:
            out = self.backward_out[cell.vc]
            fwd = self.forward_out.get(cell.vc)
            if fwd is not None:
                port = self.ports.get(fwd.link_id)
                if port is not None:
                    occupancy = fwd.queue.refresh(now)
                    port.on_backward_rm(cell.rm, occupancy)
            out.offer(cell, now)
            return
        out = self.forward_out[cell.vc]
        port = self.ports.get(out.link_id)
        if port is None:
            out.offer(cell, now)
            return
        port.on_cell_input(cell.vc)
        if cell.kind == DATA:
            occupancy = out.queue.refresh(now)
            port.on_forward_data(cell, occupancy)
            if isinstance(port, BecnPort) and port.should_notify(
                    cell.vc, occupancy, now):
                self._send_becn(cell.vc, out, now)
        out.offer(cell, now)

    def _send_becn(self, vc, congested_link: Link, now: int) -> None:
        rm = RmPayload(BACKWARD, er=float(congested_link.rate), ccr=0.0)
        becn = Cell(vc, RM, rm=rm, emitted_at=now)
        self.sim.note_emitted(becn)
        self.backward_out[vc].offer(becn, now)
