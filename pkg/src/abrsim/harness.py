"""Scenario construction, metric collection, and experiment I/O.

A scenario is described by a line-oriented key=value text format with one
section per link/vc plus scenario-wide sections (grammar in the README).
Topologies may be spelled out link by link or produced by the named
generators ``parking_lot(n)`` and ``figure3``.  Running a scenario yields a
RunReport whose headline numbers are all recomputable from the emitted CSV.
"""
from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

from . import credit as credit_mod
from . import schemes as schemes_mod
from .engine import Link, Simulator
from .fairness import AllocationProblem, fairness_index, max_min
from .model import DATA, cells_per_second, to_mbps
from .traffic import (BurstySource, EarlyPacketDiscard, PersistentSource,
                      Policer, SourceModel, StaggeredSource, TrafficContract)

SCHEMES = ("efci_prca", "eprca", "osu", "osu_count", "capc", "becn",
           "credit_static", "credit_adaptive")

CSV_SCHEMA = "abrsim-metrics-v1"
CSV_COLUMNS = ("time", "vc", "throughput", "acr", "queue_max", "dropped",
               "efci_fraction", "fairness_index")

CDV_ALPHA_DEFAULT = 0.01
METRIC_INTERVAL_DEFAULT = 10_000


class ConfigError(ValueError):
    """A scenario description failed validation; carries field context."""

    def __init__(self, section, key, message):
        self.section = section
        self.key = key
        where = f"[{section}]" + (f" {key}" if key else "")
        super().__init__(f"{where}: {message}")


class IoError(OSError):
    """Report or CSV output could not be written."""


@dataclass
class LinkSpec:
    id: str
    src: str
    dst: str
    rate: Fraction          # cells per second
    delay: int              # ticks


@dataclass
class VcSpec:
    id: str
    route: List[str]                      # forward link ids, in order
    model: dict = field(default_factory=lambda: {"kind": "persistent"})
    pcr: Optional[Fraction] = None        # default: min link rate on route
    mcr: Fraction = Fraction(0)
    scr: Optional[Fraction] = None
    mbs: Optional[int] = None
    cdvt: int = 0
    police: Optional[str] = None          # None | "drop" | "tag"
    demand: Optional[Fraction] = None     # oracle demand cap
    initial_acr: Optional[Fraction] = None
    packet_len: int = 30


@dataclass
class ScenarioConfig:
    scheme: str
    duration: int
    links: List[LinkSpec]
    vcs: List[VcSpec]
    seed: int = 0
    metric_interval: int = METRIC_INTERVAL_DEFAULT
    queue_capacity: Optional[int] = None
    queue_policy: str = "taildrop"        # or "epd:<threshold>"
    audit: bool = True
    cdv_alpha: float = CDV_ALPHA_DEFAULT
    source_params: dict = field(default_factory=dict)
    scheme_params: dict = field(default_factory=dict)
    raw: Optional[dict] = None            # section -> {key: str}, for echo

    def validate(self):
        if self.scheme not in SCHEMES:
            raise ConfigError("scenario", "scheme",
                              f"unknown scheme {self.scheme!r}")
        if self.duration <= 0:
            raise ConfigError("scenario", "duration_us",
                              "duration must be positive")
        if self.metric_interval <= 0:
            raise ConfigError("scenario", "metric_interval_us",
                              "metric interval must be positive")
        if not self.links:
            raise ConfigError("topology", None, "no links defined")
        if not self.vcs:
            raise ConfigError("topology", None, "no vcs defined")
        by_id = {}
        for link in self.links:
            if link.id in by_id:
                raise ConfigError(f"link {link.id}", None, "duplicate link id")
            if link.rate <= 0:
                raise ConfigError(f"link {link.id}", "rate",
                                  "rate must be positive")
            if link.delay < 0:
                raise ConfigError(f"link {link.id}", "delay_us",
                                  "delay must be >= 0")
            by_id[link.id] = link
        seen_vc = set()
        for vc in self.vcs:
            sect = f"vc {vc.id}"
            if vc.id in seen_vc:
                raise ConfigError(sect, None, "duplicate vc id")
            seen_vc.add(vc.id)
            if not vc.route:
                raise ConfigError(sect, "route", "route is empty")
            for lid in vc.route:
                if lid not in by_id:
                    raise ConfigError(sect, "route",
                                      f"unknown link {lid!r}")
            for a, b in zip(vc.route, vc.route[1:]):
                if by_id[a].dst != by_id[b].src:
                    raise ConfigError(
                        sect, "route",
                        f"links {a} and {b} do not connect "
                        f"({by_id[a].dst} vs {by_id[b].src})")
        return self


# --------------------------------------------------------------------------
# Topology generators.


def build_parking_lot(n_switches: int, link_rate=None, link_delay: int = 100):
    """n switches in series; VC 1 enters at switch 1, VC i at switch i-1;
    every VC leaves over the final link behind the last switch."""
    if n_switches < 2:
        raise ConfigError("topology", "generator",
                          "parking_lot needs at least 2 switches")
    rate = Fraction(link_rate) if link_rate is not None \
        else cells_per_second(150)
    links = []
    for i in range(1, n_switches):
        links.append(LinkSpec(f"L{i}", f"SW{i}", f"SW{i + 1}", rate,
                              link_delay))
    links.append(LinkSpec(f"L{n_switches}", f"SW{n_switches}", "SINK", rate,
                          link_delay))
    vcs = []
    for i in range(1, n_switches + 1):
        entry = 1 if i == 1 else i - 1
        access = LinkSpec(f"A{i}", f"S{i}", f"SW{entry}", rate, link_delay)
        links.append(access)
        route = [access.id] + [f"L{j}" for j in range(entry, n_switches + 1)]
        vcs.append(VcSpec(id=f"VC{i}", route=route))
    return links, vcs


def build_figure3(link_delay: int = 100):
    """The worked max-min example: three 150 Mbps backbone links, S1-S3
    sharing the first, S3+S4 the second, S4 alone on the third."""
    rate = cells_per_second(150)
    links = [
        LinkSpec("L1", "SW1", "SW2", rate, link_delay),
        LinkSpec("L2", "SW2", "SW3", rate, link_delay),
        LinkSpec("L3", "SW3", "SW4", rate, link_delay),
        LinkSpec("A1", "S1", "SW1", rate, link_delay),
        LinkSpec("A2", "S2", "SW1", rate, link_delay),
        LinkSpec("A3", "S3", "SW1", rate, link_delay),
        LinkSpec("A4", "S4", "SW2", rate, link_delay),
        LinkSpec("X1", "SW2", "D1", rate, link_delay),
        LinkSpec("X2", "SW2", "D2", rate, link_delay),
        LinkSpec("X3", "SW3", "D3", rate, link_delay),
        LinkSpec("X4", "SW4", "D4", rate, link_delay),
    ]
    vcs = [
        VcSpec(id="S1", route=["A1", "L1", "X1"]),
        VcSpec(id="S2", route=["A2", "L1", "X2"]),
        VcSpec(id="S3", route=["A3", "L1", "L2", "X3"]),
        VcSpec(id="S4", route=["A4", "L2", "L3", "X4"]),
    ]
    return links, vcs


def build_single_bottleneck(n_vcs: int, link_rate=None, link_delay: int = 100):
    """n VCs with private access links contending for one shared exit link."""
    if n_vcs < 1:
        raise ConfigError("topology", "generator",
                          "bottleneck needs at least 1 vc")
    rate = Fraction(link_rate) if link_rate is not None \
        else cells_per_second(150)
    links = [LinkSpec("L1", "SW1", "SINK", rate, link_delay)]
    vcs = []
    for i in range(1, n_vcs + 1):
        access = LinkSpec(f"A{i}", f"S{i}", "SW1", rate, link_delay)
        links.append(access)
        vcs.append(VcSpec(id=f"VC{i}", route=[access.id, "L1"]))
    return links, vcs


GENERATORS = {"parking_lot": build_parking_lot, "figure3": build_figure3,
              "bottleneck": build_single_bottleneck}


def allocation_problem(config: ScenarioConfig) -> AllocationProblem:
    """Oracle view of a scenario: every forward link, per-VC demand caps at
    min(pcr, declared demand)."""
    links = tuple((l.id, l.rate) for l in config.links)
    by_id = {l.id: l for l in config.links}
    vcs = []
    demands = []
    for vc in config.vcs:
        vcs.append((vc.id, frozenset(vc.route)))
        pcr = vc.pcr if vc.pcr is not None \
            else min(by_id[l].rate for l in vc.route)
        cap = pcr if vc.demand is None else min(pcr, vc.demand)
        demands.append((vc.id, cap))
    return AllocationProblem(links=links, vcs=tuple(vcs),
                             demands=tuple(demands))


# --------------------------------------------------------------------------
# Metrics.


@dataclass
class MetricsLog:
    """Per-interval rows plus per-VC aggregates of one simulation run."""

    interval: int
    duration: int
    oracle: Dict[str, float]
    rows: list = field(default_factory=list)        # CSV_COLUMNS tuples
    link_rows: list = field(default_factory=list)   # (time, link, sent, qmax)
    vc_stats: dict = field(default_factory=dict)
    burst_responses: dict = field(default_factory=dict)
    conservation: list = field(default_factory=list)

    def headline(self) -> dict:
        return headline_from_rows(self.rows, self.oracle, self.duration)

    def to_csv(self) -> str:
        out = io.StringIO()
        emit_csv(self, out)
        return out.getvalue()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(log: MetricsLog, destination) -> None:
    """Write the schema line, header, then one row per (interval, vc)."""
    try:
        destination.write(f"# {CSV_SCHEMA}\n")
        destination.write(",".join(CSV_COLUMNS) + "\n")
        for row in log.rows:
            destination.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def parse_metrics_csv(text: str):
    """Inverse of emit_csv: returns rows with typed values."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError("missing schema line")
    schema = lines[0].lstrip("# ").strip()
    if schema != CSV_SCHEMA:
        raise ValueError(f"unsupported schema {schema!r}")
    header = tuple(lines[1].split(","))
    if header != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {header!r}")
    rows = []
    for ln in lines[2:]:
        t, vc, thr, acr, qmax, dropped, efci, fi = ln.split(",")
        rows.append((int(t), vc, float(thr),
                     float(acr) if acr else None, int(qmax), int(dropped),
                     float(efci) if efci else None,
                     float(fi) if fi else None))
    return rows


def headline_from_rows(rows, oracle: Dict[str, float], duration: int) -> dict:
    """Headline metrics derived purely from CSV rows (and the oracle)."""
    steady_start = duration - duration // 4
    steady = {}
    total_loss = 0
    max_queue = 0
    time_to_90 = {vc: None for vc in oracle}
    for t, vc, thr, acr, qmax, dropped, _efci, _fi in rows:
        total_loss += dropped
        if qmax > max_queue:
            max_queue = qmax
        if t > steady_start:
            steady.setdefault(vc, []).append(thr)
        ramp_value = acr if acr is not None else thr
        if time_to_90.get(vc) is None and oracle.get(vc) \
                and ramp_value >= 0.9 * oracle[vc]:
            time_to_90[vc] = t
    steady_thr = {vc: sum(vals) / len(vals) for vc, vals in steady.items()}
    fi = None
    if steady_thr and all(oracle.get(vc, 0) > 0 for vc in steady_thr) \
            and any(v > 0 for v in steady_thr.values()):
        fi = fairness_index(steady_thr,
                            {vc: oracle[vc] for vc in steady_thr})
    return {
        "steady_fairness": fi,
        "steady_throughput": steady_thr,
        "total_loss": total_loss,
        "max_queue": max_queue,
        "time_to_90": time_to_90,
    }


class _VcTracker:
    __slots__ = ("emitted", "emitted_clp", "delivered", "delivered_ivl",
                 "efci_ivl", "efci_total", "dropped", "dropped_ivl",
                 "dropped_clp", "delays", "delay_min", "delay_max",
                 "delay_sum", "burst_starts", "in_burst")

    def __init__(self):
        self.emitted = 0
        self.emitted_clp = 0
        self.delivered = 0
        self.delivered_ivl = 0
        self.efci_ivl = 0
        self.efci_total = 0
        self.dropped = 0
        self.dropped_ivl = 0
        self.dropped_clp = 0
        self.delays = {}
        self.delay_min = None
        self.delay_max = 0
        self.delay_sum = 0
        self.burst_starts = []
        self.in_burst = False


class MetricsCollector:
    """Timer-driven sampler building the MetricsLog of one run."""

    def __init__(self, sim: Simulator, config: ScenarioConfig,
                 oracle: Dict[str, float], sources: dict, route_links: dict):
        self.sim = sim
        self.config = config
        self.interval = config.metric_interval
        self.oracle = oracle
        self.sources = sources
        self.route_links = route_links
        self.trackers = {vc.id: _VcTracker() for vc in config.vcs}
        self.log = MetricsLog(interval=self.interval,
                              duration=config.duration, oracle=dict(oracle))
        self.log.burst_responses = {vc.id: [] for vc in config.vcs}
        self._last_flush = 0
        self._link_sent = {}
        sim.metrics = self
        sim.register_timer_owner("__metrics__", self)
        sim.schedule_timer(min(self.interval, config.duration), self, "flush")

    # -- hooks called from nodes/engine -------------------------------------

    def on_emit(self, vc, cell) -> None:
        tr = self.trackers[vc]
        tr.emitted += 1
        if getattr(cell, "clp", False):
            tr.emitted_clp += 1
        if cell.kind == DATA and not tr.in_burst:
            tr.in_burst = True
            tr.burst_starts.append(cell.emitted_at)
        if cell.kind == DATA and cell.eom:
            tr.in_burst = False

    def on_delivery(self, vc, cell, now: int) -> None:
        tr = self.trackers[vc]
        tr.delivered += 1
        tr.delivered_ivl += 1
        if cell.efci:
            tr.efci_ivl += 1
            tr.efci_total += 1
        delay = now - cell.emitted_at
        tr.delays[delay] = tr.delays.get(delay, 0) + 1
        tr.delay_sum += delay
        if tr.delay_min is None or delay < tr.delay_min:
            tr.delay_min = delay
        if delay > tr.delay_max:
            tr.delay_max = delay
        if cell.eom and tr.burst_starts:
            start = tr.burst_starts.pop(0)
            self.log.burst_responses[vc].append(now - start)

    def on_drop(self, cell, where) -> None:
        vc = getattr(cell, "vc", None)
        tr = self.trackers.get(vc)
        if tr is None:
            return
        tr.dropped += 1
        tr.dropped_ivl += 1
        if getattr(cell, "clp", False):
            tr.dropped_clp += 1

    # -- sampling ------------------------------------------------------------

    def on_timer(self, tag):
        now = self.sim.clock
        self._flush(now)
        nxt = now + self.interval
        if nxt <= self.config.duration:
            self.sim.schedule_timer(nxt, self, "flush")

    def _flush(self, now: int) -> None:
        window = now - self._last_flush
        if window <= 0:
            return
        self._last_flush = now
        marks = {}
        for lid, link in self.sim.links.items():
            marks[lid] = link.queue.take_watermark()
            sent = link.queue.sent
            delta = sent - self._link_sent.get(lid, 0)
            self._link_sent[lid] = sent
            if not str(lid).endswith("~"):
                self.log.link_rows.append((now, lid, delta, marks[lid]))
        throughput = {}
        for vc_id, tr in self.trackers.items():
            throughput[vc_id] = tr.delivered_ivl * 1e6 / window
        fi = None
        if all(self.oracle.get(vc, 0) > 0 for vc in throughput) \
                and any(v > 0 for v in throughput.values()):
            fi = fairness_index(throughput, self.oracle)
        for vc_id, tr in self.trackers.items():
            source = self.sources.get(vc_id)
            acr = None
            if source is not None and hasattr(source, "state"):
                acr = source.state.acr
            qmax = max((marks[l] for l in self.route_links[vc_id]), default=0)
            efci = (tr.efci_ivl / tr.delivered_ivl
                    if tr.delivered_ivl else None)
            self.log.rows.append((now, vc_id, throughput[vc_id], acr, qmax,
                                  tr.dropped_ivl, efci, fi))
            tr.delivered_ivl = 0
            tr.efci_ivl = 0
            tr.dropped_ivl = 0
        if self.config.audit:
            self.log.conservation.append((now,
                                          self.sim.conservation_balance()))

    def finalize(self, end: int) -> MetricsLog:
        self._flush(end)
        alpha = self.config.cdv_alpha
        for vc_id, tr in self.trackers.items():
            stats = {
                "emitted": tr.emitted,
                "delivered": tr.delivered,
                "dropped": tr.dropped,
                "efci_fraction": (tr.efci_total / tr.delivered
                                  if tr.delivered else None),
                "clr": (tr.dropped / tr.emitted) if tr.emitted else None,
                "clr_clp1": (tr.dropped_clp / tr.emitted_clp
                             if tr.emitted_clp else None),
                "ctd_mean": (tr.delay_sum / tr.delivered
                             if tr.delivered else None),
                "ctd_max": tr.delay_max if tr.delivered else None,
                "cdv_p2p": _cdv_peak_to_peak(tr, alpha),
            }
            self.log.vc_stats[vc_id] = stats
        return self.log


def _cdv_peak_to_peak(tr: _VcTracker, alpha: float):
    """(1 - alpha)-percentile of transfer delay minus its minimum."""
    if not tr.delivered:
        return None
    target = math.ceil((1.0 - alpha) * tr.delivered)
    seen = 0
    for delay in sorted(tr.delays):
        seen += tr.delays[delay]
        if seen >= target:
            return delay - tr.delay_min
    return tr.delay_max - tr.delay_min

# --------------------------------------------------------------------------
# Network assembly.


def _reverse_id(link_id: str) -> str:
    return f"{link_id}~"


def _make_policy(config: ScenarioConfig):
    policy = config.queue_policy
    if policy == "taildrop":
        return None  # engine default
    if policy.startswith("epd:"):
        try:
            threshold = int(policy.split(":", 1)[1])
        except ValueError:
            raise ConfigError("scenario", "queue_policy",
                              f"bad epd threshold in {policy!r}")
        return lambda: EarlyPacketDiscard(threshold, config.queue_capacity)
    raise ConfigError("scenario", "queue_policy",
                      f"unknown policy {policy!r}")


def _make_model(vc: VcSpec) -> SourceModel:
    spec = vc.model
    kind = spec.get("kind", "persistent")
    if kind == "persistent":
        return PersistentSource(packet_len=vc.packet_len)
    if kind == "staggered":
        return StaggeredSource(start=spec.get("start", 0),
                               packet_len=vc.packet_len)
    if kind == "bursty":
        return BurstySource(burst_len=spec.get("burst", 100),
                            idle=spec.get("idle", 10_000),
                            loop=spec.get("loop", "open"),
                            start=spec.get("start", 0))
    raise ConfigError(f"vc {vc.id}", "source", f"unknown model {kind!r}")


def _vc_pcr(vc: VcSpec, by_id) -> Fraction:
    if vc.pcr is not None:
        return vc.pcr
    return min(by_id[l].rate for l in vc.route)


class _BuiltScenario:
    def __init__(self, sim, collector, sources, sinks, switches):
        self.sim = sim
        self.collector = collector
        self.sources = sources
        self.sinks = sinks
        self.switches = switches


def build_simulation(config: ScenarioConfig) -> _BuiltScenario:
    config.validate()
    import random
    rng = random.Random(config.seed)
    sim = Simulator()
    by_id = {l.id: l for l in config.links}
    rate_based = config.scheme not in ("credit_static", "credit_adaptive")

    source_node_of = {}
    dest_node_of = {}
    switch_nodes = []
    seen = set()
    for vc in config.vcs:
        src = by_id[vc.route[0]].src
        dst = by_id[vc.route[-1]].dst
        if src in seen and src not in source_node_of.values():
            raise ConfigError(f"vc {vc.id}", "route",
                              f"source node {src} is also a switch")
        source_node_of[vc.id] = src
        dest_node_of[vc.id] = dst
        for lid in vc.route[:-1]:
            node = by_id[lid].dst
            if node not in seen:
                switch_nodes.append(node)
            seen.add(node)
    dest_nodes = sorted({d for d in dest_node_of.values()}, key=str)
    switch_nodes = [n for n in dict.fromkeys(switch_nodes)
                    if n not in dest_nodes]

    switches = {}
    sinks = {}
    for name in switch_nodes:
        cls = schemes_mod.RateSwitch if rate_based else credit_mod.CreditSwitch
        switches[name] = sim.add_node(cls(name))
    for name in dest_nodes:
        cls = schemes_mod.AbrDestination if rate_based else credit_mod.CreditSink
        sinks[name] = sim.add_node(cls(name))

    # Sources get placeholder node objects after links exist; create link
    # objects first (forward links plus mirrors used by returning cells).
    policy_factory = _make_policy(config)
    links = {}
    for spec in config.links:
        policy = policy_factory() if policy_factory else None
        capacity = config.queue_capacity if policy is None else None
        links[spec.id] = Link(spec.id, spec.rate, spec.delay,
                              src=spec.src, dst=spec.dst,
                              capacity=capacity, drop_policy=policy)
    needed_reverse = set()
    for vc in config.vcs:
        for lid in vc.route:
            needed_reverse.add(lid)
    for lid in sorted(needed_reverse, key=str):
        spec = by_id[lid]
        rid = _reverse_id(lid)
        links[rid] = Link(rid, spec.rate, spec.delay,
                          src=spec.dst, dst=spec.src)

    sources = {}
    sparams = config.source_params
    for vc in config.vcs:
        pcr = _vc_pcr(vc, by_id)
        model = _make_model(vc)
        access = links[vc.route[0]]
        name = source_node_of[vc.id]
        if rate_based:
            air_div = sparams.get("air_divisor", 256)
            acr0 = vc.initial_acr if vc.initial_acr is not None else \
                pcr / sparams.get("initial_acr_divisor", 10)
            state = schemes_mod.SourceState(
                pcr=float(pcr), mcr=float(vc.mcr), initial_acr=float(acr0),
                air=float(pcr) / air_div,
                rdf=sparams.get("rdf", schemes_mod.RDF_DEFAULT),
                nrm=sparams.get("nrm", schemes_mod.NRM_DEFAULT))
            sp = config.scheme_params
            node = schemes_mod.AbrSource(
                name, vc.id, state, model, access,
                becn_mode=(config.scheme == "becn"),
                becn_recovery_base=sp.get("recovery_base_us", 10_000),
                becn_recovery_min=sp.get("recovery_min_us", 500))
        else:
            node = credit_mod.CreditSource(name, vc.id, model, float(pcr),
                                           access)
        sources[vc.id] = sim.add_node(node)

    for link in links.values():
        sim.add_link(link)

    if rate_based:
        _wire_rate_scheme(sim, config, by_id, links, sources, sinks,
                          switches, source_node_of, dest_node_of, rng)
    else:
        _wire_credit_scheme(sim, config, by_id, links, sources, sinks,
                            switches, dest_node_of)

    oracle = {vc: float(rate)
              for vc, rate in max_min(allocation_problem(config)).items()}
    route_links = {vc.id: list(vc.route) for vc in config.vcs}
    collector = MetricsCollector(sim, config, oracle, sources, route_links)

    for source in sources.values():
        source.start()
    return _BuiltScenario(sim, collector, sources, sinks, switches)


def _node_seq(vc: VcSpec, by_id) -> List[str]:
    seq = [by_id[vc.route[0]].src]
    for lid in vc.route:
        seq.append(by_id[lid].dst)
    return seq


def _make_port(config: ScenarioConfig, link: Link, n_vcs: int, rng):
    sp = config.scheme_params
    scheme = config.scheme
    if scheme == "efci_prca":
        return schemes_mod.EfciPrcaPort(
            queue_threshold=sp.get("queue_threshold", 100),
            detector=sp.get("detector", schemes_mod.QUEUE_LENGTH),
            growth_window=sp.get("growth_window", 50),
            forced_marking=sp.get("forced_marking", 0.0), rng=rng)
    if scheme == "eprca":
        return schemes_mod.EprcaPort(
            queue_threshold=sp.get("queue_threshold", 100),
            alpha=sp.get("alpha", schemes_mod.ALPHA_DEFAULT),
            sw_dpf=sp.get("sw_dpf", schemes_mod.SW_DPF_DEFAULT),
            detector=sp.get("detector", schemes_mod.QUEUE_LENGTH),
            growth_window=sp.get("growth_window", 50),
            ci_threshold=sp.get("ci_threshold"),
            macr_init=sp.get("macr_init", 0.0),
            forced_marking=sp.get("forced_marking", 0.0), rng=rng)
    if scheme in ("osu", "osu_count"):
        return schemes_mod.OsuPort(
            link_rate=float(link.rate),
            target_util=sp.get("target_util", 0.90),
            interval=sp.get("interval_us", 1000),
            delta=sp.get("delta", 0.1),
            count_based=(scheme == "osu_count"))
    if scheme == "capc":
        return schemes_mod.CapcPort(
            link_rate=float(link.rate), n_vcs=n_vcs,
            target_util=sp.get("target_util", 0.90),
            interval=sp.get("interval_us", 1000),
            rup=sp.get("rup", 0.06), rdn=sp.get("rdn", 0.5),
            eru=sp.get("eru", 1.5), erf=sp.get("erf", 0.5),
            queue_threshold=sp.get("queue_threshold", 100))
    if scheme == "becn":
        return schemes_mod.BecnPort(
            queue_threshold=sp.get("queue_threshold", 100),
            min_gap=sp.get("min_gap_us", 2 * link.delay))
    raise ConfigError("scenario", "scheme", f"no port for {scheme!r}")


def _wire_rate_scheme(sim, config, by_id, links, sources, sinks, switches,
                      source_node_of, dest_node_of, rng):
    port_vcs = {}
    for vc in config.vcs:
        nodes = _node_seq(vc, by_id)
        route = vc.route
        for i, node_name in enumerate(nodes[1:-1], start=1):
            sw = switches[node_name]
            fwd = links[route[i]]
            back = links[_reverse_id(route[i - 1])]
            sw.add_vc(vc.id, fwd, back)
            port_vcs.setdefault((node_name, route[i]), set()).add(vc.id)
        sink = sinks[nodes[-1]]
        sink.add_vc(vc.id, links[_reverse_id(route[-1])], sources[vc.id])
        source = sources[vc.id]
        if vc.police:
            entry = switches[nodes[1]]
            contract = TrafficContract(pcr=_vc_pcr(vc, by_id), scr=vc.scr,
                                       mcr=vc.mcr, mbs=vc.mbs, cdvt=vc.cdvt)
            if not hasattr(entry, "policers"):
                entry.policers = {}
            entry.policers[vc.id] = Policer(contract, vc.police)
    for (node_name, link_id), vcset in sorted(port_vcs.items(),
                                              key=lambda kv: str(kv[0])):
        sw = switches[node_name]
        if link_id not in sw.ports:
            sw.set_port(link_id,
                        _make_port(config, links[link_id], len(vcset), rng))


def _wire_credit_scheme(sim, config, by_id, links, sources, sinks, switches,
                        dest_node_of):
    sp = config.scheme_params
    n2 = sp.get("n2", credit_mod.N2_DEFAULT)
    min_grant = sp.get("min_grant", credit_mod.MIN_GRANT_DEFAULT)
    adaptive = config.scheme == "credit_adaptive"
    free_credits = bool(sp.get("credit_cells_free", False))

    # Per (receiving node, link): vcs and their static allocations.
    recv_alloc = {}
    for vc in config.vcs:
        for lid in vc.route:
            link = links[lid]
            size = sp.get("static_credit",
                          credit_mod.static_credit_size(link))
            recv_alloc.setdefault(lid, []).append((vc.id, size))

    def node_of(name):
        if name in switches:
            return switches[name]
        if name in sinks:
            return sinks[name]
        return None

    # Receivers (downstream end of each forward link).
    for lid, entries in sorted(recv_alloc.items(), key=lambda kv: str(kv[0])):
        link = links[lid]
        node = node_of(link.dst)
        total = sum(size for _, size in entries)
        rx = node.add_in_link(link, links[_reverse_id(lid)], total, n2=n2)
        node.credit_cells_free = free_credits
        for vc_id, size in entries:
            rx.register(vc_id, size)
        if adaptive and hasattr(node, "enable_adaptive"):
            period = sp.get("adapt_period_us", 8 * link.delay)
            node.enable_adaptive(lid, period, min_grant)

    # Transmitters (upstream end of each forward link).
    for vc in config.vcs:
        nodes = _node_seq(vc, by_id)
        route = vc.route
        source = sources[vc.id]
        access = links[route[0]]
        tx = source.transmitters.get(access.link_id) \
            or source.add_out_link(access)
        size = dict(recv_alloc[route[0]])[vc.id]
        tx.register(vc.id, size)
        source.credit_cells_free = free_credits
        if sp.get("resync_period_us") is not None:
            source.resync_period = sp["resync_period_us"]
        elif sp.get("resync", True):
            source.resync_period = 100 * 2 * access.delay
        for i, node_name in enumerate(nodes[1:-1], start=1):
            sw = switches[node_name]
            out = links[route[i]]
            tx = sw.transmitters.get(out.link_id) or sw.add_out_link(out)
            size = dict(recv_alloc[route[i]])[vc.id]
            tx.register(vc.id, size)
            sw.register_vc(vc.id, links[route[i - 1]], out)
        sink = sinks[nodes[-1]]
        sink.add_vc(vc.id, links[route[-1]], sources[vc.id])
    for node in list(switches.values()) + list(sinks.values()):
        sim.register_cell_holder(node)
    for source in sources.values():
        sim.register_cell_holder(source)


# --------------------------------------------------------------------------
# Reports and the run driver.


@dataclass
class RunReport:
    config_text: str
    headline: dict
    log: MetricsLog

    def csv(self) -> str:
        return self.log.to_csv()

    def render(self) -> str:
        lines = ["run report", "=" * 60]
        h = self.headline
        fi = h["steady_fairness"]
        lines.append(f"steady-state fairness index: "
                     f"{fi if fi is not None else 'n/a'}")
        lines.append(f"total loss: {h['total_loss']} cells")
        lines.append(f"max queue: {h['max_queue']} cells")
        lines.append("time to 90% of fair rate (us):")
        for vc, t in h["time_to_90"].items():
            lines.append(f"  {vc}: {t if t is not None else 'not reached'}")
        lines.append("per-vc steady throughput (cells/s) vs oracle:")
        for vc, thr in h["steady_throughput"].items():
            lines.append(f"  {vc}: {thr:.1f} vs {self.log.oracle[vc]:.1f}")
        lines.append("per-vc aggregates:")
        for vc, st in self.log.vc_stats.items():
            ctd = st["ctd_mean"]
            lines.append(
                f"  {vc}: emitted={st['emitted']} delivered={st['delivered']}"
                f" dropped={st['dropped']}"
                f" clr={st['clr'] if st['clr'] is not None else 'n/a'}"
                f" ctd_mean={f'{ctd:.1f}us' if ctd is not None else 'n/a'}"
                f" ctd_max={st['ctd_max']}"
                f" cdv_p2p={st['cdv_p2p']}")
        responses = {vc: rs for vc, rs in self.log.burst_responses.items()
                     if rs}
        if responses:
            lines.append("burst response times (us):")
            for vc, rs in responses.items():
                lines.append(f"  {vc}: n={len(rs)} mean={sum(rs) / len(rs):.0f}"
                             f" max={max(rs)}")
        lines.append("")
        lines.append("--- configuration echo ---")
        lines.append(self.config_text)
        return "\n".join(lines)


def run_scenario(config: ScenarioConfig) -> RunReport:
    """Build and run one scenario to its configured duration."""
    built = build_simulation(config)
    built.sim.run_until(config.duration)
    log = built.collector.finalize(config.duration)
    text = config_to_text(config)
    return RunReport(config_text=text, headline=log.headline(), log=log)

# --------------------------------------------------------------------------
# Configuration text format.
#
# Line-oriented key = value pairs under [section] headers; '#' starts a
# comment.  Sections: [scenario], [topology] (generator) or repeated
# [link <id>] sections, repeated [vc <id>] sections, [sources], [scheme].
# The full grammar is documented in the README.

_GENERATOR_RE = re.compile(r"^(\w+)\s*(?:\((.*)\))?$")
_SOURCE_RE = re.compile(r"^(\w+)\s*(?:\((.*)\))?$")


def parse_raw(text: str) -> dict:
    """Text -> {section: {key: value-string}}; keeps section order."""
    raw: Dict[str, dict] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section in raw:
                raise ConfigError(section, None,
                                  f"duplicate section (line {lineno})")
            raw[section] = {}
            continue
        if section is None or "=" not in line:
            raise ConfigError(section or "?", None,
                              f"cannot parse line {lineno}: {line!r}")
        key, value = line.split("=", 1)
        raw[section][key.strip()] = value.strip()
    return raw


def _conv(section, key, value, kind):
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is Fraction:
            return Fraction(value)
        if kind is bool:
            if value.lower() in ("on", "true", "1", "yes"):
                return True
            if value.lower() in ("off", "false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(section, key, str(exc)) from None
    return value


def _auto(value: str):
    """Best-effort typed value for free-form scheme parameters."""
    for kind in (int, float):
        try:
            return kind(value)
        except ValueError:
            pass
    if value.lower() in ("on", "true", "yes"):
        return True
    if value.lower() in ("off", "false", "no"):
        return False
    return value


def _parse_source(section, value: str) -> dict:
    m = _SOURCE_RE.match(value)
    if not m:
        raise ConfigError(section, "source", f"cannot parse {value!r}")
    kind, args = m.group(1), m.group(2)
    args = [a.strip() for a in args.split(",")] if args else []
    if kind == "persistent":
        return {"kind": "persistent"}
    if kind == "staggered":
        if len(args) != 1:
            raise ConfigError(section, "source",
                              "staggered needs (start_us)")
        return {"kind": "staggered",
                "start": _conv(section, "source", args[0], int)}
    if kind == "bursty":
        if len(args) not in (3, 4):
            raise ConfigError(section, "source",
                              "bursty needs (burst,idle_us,open|closed[,start_us])")
        spec = {"kind": "bursty",
                "burst": _conv(section, "source", args[0], int),
                "idle": _conv(section, "source", args[1], int),
                "loop": args[2]}
        if args[2] not in ("open", "closed"):
            raise ConfigError(section, "source",
                              f"loop must be open|closed, not {args[2]!r}")
        if len(args) == 4:
            spec["start"] = _conv(section, "source", args[3], int)
        return spec
    raise ConfigError(section, "source", f"unknown source kind {kind!r}")


def _render_source(model: dict) -> str:
    kind = model.get("kind", "persistent")
    if kind == "persistent":
        return "persistent"
    if kind == "staggered":
        return f"staggered({model.get('start', 0)})"
    if kind == "bursty":
        base = (f"bursty({model['burst']},{model['idle']},"
                f"{model.get('loop', 'open')}")
        if model.get("start"):
            return base + f",{model['start']})"
        return base + ")"
    raise ValueError(f"unknown model {kind!r}")


_VC_RATE_KEYS = {"pcr_mbps": "pcr", "mcr_mbps": "mcr", "scr_mbps": "scr",
                 "demand_mbps": "demand", "initial_acr_mbps": "initial_acr"}


def _apply_vc_keys(vc: VcSpec, section: str, entries: dict) -> None:
    for key, value in entries.items():
        if key == "route":
            vc.route = [p.strip() for p in value.split(",") if p.strip()]
        elif key == "source":
            vc.model = _parse_source(section, value)
        elif key in _VC_RATE_KEYS:
            if value == "":
                continue
            setattr(vc, _VC_RATE_KEYS[key],
                    cells_per_second(_conv(section, key, value, Fraction)))
        elif key == "mbs":
            vc.mbs = _conv(section, key, value, int)
        elif key == "cdvt_us":
            vc.cdvt = _conv(section, key, value, int)
        elif key == "police":
            if value not in ("drop", "tag", "off"):
                raise ConfigError(section, key,
                                  "police must be drop|tag|off")
            vc.police = None if value == "off" else value
        elif key == "packet_len":
            vc.packet_len = _conv(section, key, value, int)
        else:
            raise ConfigError(section, key, "unknown key")


def config_from_raw(raw: dict) -> ScenarioConfig:
    if "scenario" not in raw:
        raise ConfigError("scenario", None, "missing [scenario] section")
    sc = dict(raw["scenario"])
    scheme = sc.pop("scheme", None)
    if scheme is None:
        raise ConfigError("scenario", "scheme", "required")
    duration = _conv("scenario", "duration_us",
                     sc.pop("duration_us", "0"), int)
    seed = _conv("scenario", "seed", sc.pop("seed", "0"), int)
    interval = _conv("scenario", "metric_interval_us",
                     sc.pop("metric_interval_us",
                            str(METRIC_INTERVAL_DEFAULT)), int)
    capacity_s = sc.pop("queue_capacity", "unbounded")
    capacity = None if capacity_s == "unbounded" \
        else _conv("scenario", "queue_capacity", capacity_s, int)
    policy = sc.pop("queue_policy", "taildrop")
    audit = _conv("scenario", "audit", sc.pop("audit", "on"), bool)
    cdv_alpha = _conv("scenario", "cdv_alpha",
                      sc.pop("cdv_alpha", str(CDV_ALPHA_DEFAULT)), float)
    if sc:
        raise ConfigError("scenario", next(iter(sc)), "unknown key")

    links: List[LinkSpec] = []
    vcs: List[VcSpec] = []
    if "topology" in raw:
        topo = dict(raw["topology"])
        gen = topo.pop("generator", None)
        if gen is None:
            raise ConfigError("topology", "generator", "required")
        m = _GENERATOR_RE.match(gen)
        if not m or m.group(1) not in GENERATORS:
            raise ConfigError("topology", "generator",
                              f"unknown generator {gen!r}")
        name, args = m.group(1), m.group(2)
        rate = cells_per_second(_conv("topology", "link_rate_mbps",
                                      topo.pop("link_rate_mbps", "150"),
                                      Fraction))
        delay = _conv("topology", "link_delay_us",
                      topo.pop("link_delay_us", "100"), int)
        if topo:
            raise ConfigError("topology", next(iter(topo)), "unknown key")
        if name == "parking_lot":
            if not args:
                raise ConfigError("topology", "generator",
                                  "parking_lot needs (n)")
            n = _conv("topology", "generator", args.strip(), int)
            links, vcs = build_parking_lot(n, rate, delay)
        else:
            links, vcs = build_figure3(delay)

    vc_by_id = {vc.id: vc for vc in vcs}
    for section, entries in raw.items():
        if section.startswith("link "):
            lid = section[5:].strip()
            e = dict(entries)
            try:
                src, dst = e.pop("from"), e.pop("to")
            except KeyError as exc:
                raise ConfigError(section, str(exc), "required") from None
            if "rate_cells_per_s" in e:
                rate = Fraction(_conv(section, "rate_cells_per_s",
                                      e.pop("rate_cells_per_s"), Fraction))
            else:
                rate = cells_per_second(_conv(section, "rate_mbps",
                                              e.pop("rate_mbps", "150"),
                                              Fraction))
            delay = _conv(section, "delay_us", e.pop("delay_us", "100"), int)
            if e:
                raise ConfigError(section, next(iter(e)), "unknown key")
            links.append(LinkSpec(lid, src, dst, rate, delay))
        elif section.startswith("vc "):
            vid = section[3:].strip()
            if vid in vc_by_id:
                _apply_vc_keys(vc_by_id[vid], section, entries)
            else:
                vc = VcSpec(id=vid, route=[])
                _apply_vc_keys(vc, section, entries)
                vcs.append(vc)
                vc_by_id[vid] = vc
        elif section in ("scenario", "topology", "sources", "scheme"):
            continue
        else:
            raise ConfigError(section, None, "unknown section")

    source_params = {k: _auto(v) for k, v in raw.get("sources", {}).items()}
    scheme_params = {k: _auto(v) for k, v in raw.get("scheme", {}).items()}
    config = ScenarioConfig(
        scheme=scheme, duration=duration, links=links, vcs=vcs, seed=seed,
        metric_interval=interval, queue_capacity=capacity,
        queue_policy=policy, audit=audit, cdv_alpha=cdv_alpha,
        source_params=source_params, scheme_params=scheme_params, raw=raw)
    return config.validate()


def config_from_text(text: str) -> ScenarioConfig:
    return config_from_raw(parse_raw(text))


def config_to_text(config: ScenarioConfig) -> str:
    """Canonical serialization: topology is always written out explicitly,
    so reloading reproduces the identical simulation."""
    out = ["[scenario]",
           f"scheme = {config.scheme}",
           f"duration_us = {config.duration}",
           f"seed = {config.seed}",
           f"metric_interval_us = {config.metric_interval}",
           "queue_capacity = " + ("unbounded" if config.queue_capacity is None
                                  else str(config.queue_capacity)),
           f"queue_policy = {config.queue_policy}",
           f"audit = {'on' if config.audit else 'off'}",
           f"cdv_alpha = {config.cdv_alpha}",
           ""]
    for link in config.links:
        out += [f"[link {link.id}]",
                f"from = {link.src}",
                f"to = {link.dst}",
                f"rate_cells_per_s = {link.rate}",
                f"delay_us = {link.delay}",
                ""]
    for vc in config.vcs:
        out += [f"[vc {vc.id}]",
                "route = " + ",".join(vc.route),
                f"source = {_render_source(vc.model)}"]
        if vc.pcr is not None:
            out.append(f"pcr_mbps = {to_mbps(vc.pcr)}")
        if vc.mcr:
            out.append(f"mcr_mbps = {to_mbps(vc.mcr)}")
        if vc.scr is not None:
            out.append(f"scr_mbps = {to_mbps(vc.scr)}")
        if vc.mbs is not None:
            out.append(f"mbs = {vc.mbs}")
        if vc.cdvt:
            out.append(f"cdvt_us = {vc.cdvt}")
        if vc.police:
            out.append(f"police = {vc.police}")
        if vc.demand is not None:
            out.append(f"demand_mbps = {to_mbps(vc.demand)}")
        if vc.initial_acr is not None:
            out.append(f"initial_acr_mbps = {to_mbps(vc.initial_acr)}")
        if vc.packet_len != 30:
            out.append(f"packet_len = {vc.packet_len}")
        out.append("")
    if config.source_params:
        out.append("[sources]")
        out += [f"{k} = {v}" for k, v in config.source_params.items()]
        out.append("")
    if config.scheme_params:
        out.append("[scheme]")
        out += [f"{k} = {v}" for k, v in config.scheme_params.items()]
        out.append("")
    return "\n".join(out)


def oracle_vector(config_or_text) -> Dict[str, Fraction]:
    """Max-min allocation of a scenario/topology description."""
    config = config_or_text
    if isinstance(config, str):
        config = config_from_text(config)
    return max_min(allocation_problem(config))
