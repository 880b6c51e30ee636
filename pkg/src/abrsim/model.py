"""Shared domain vocabulary: cells, RM payloads, traffic contracts, VC routes.

Rates are exact rationals (cells per second) so that conformance checks and
link scheduling stay integer-exact; simulated time is an integer number of
microsecond ticks.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

RateLike = Union[int, float, Fraction]

# 48 bytes payload + 5 bytes header, in bits.  Used for Mbps <-> cells/s.
CELL_BITS = (48 + 5) * 8

DATA = "data"
RM = "rm"

FORWARD = "forward"
BACKWARD = "backward"


class InvalidContract(ValueError):
    """A traffic contract violates its own parameter constraints."""


def cells_per_second(mbps: RateLike) -> Fraction:
    """Convert a line rate in Mbps to cells per second (424-bit cells)."""
    return Fraction(mbps) * 1_000_000 / CELL_BITS


def to_mbps(rate: RateLike) -> Fraction:
    """Convert cells per second back to Mbps."""
    return Fraction(rate) * CELL_BITS / 1_000_000


class RmPayload:
    """Resource-management fields carried by an RM cell.

    Switches may lower ``er`` and raise ``ci``; they never move either the
    other way.
    """

    __slots__ = ("direction", "er", "ccr", "ci", "reduced")

    def __init__(self, direction, er, ccr, ci=False, reduced=False):
        if er < 0 or ccr < 0:
            raise ValueError("er and ccr must be non-negative")
        self.direction = direction
        self.er = er
        self.ccr = ccr
        self.ci = ci
        self.reduced = reduced

    def bound_er(self, limit) -> None:
        """Lower the explicit rate to ``limit``; never raises it."""
        if limit < self.er:
            self.er = limit

    def __repr__(self):
        return (f"RmPayload({self.direction}, er={self.er}, ccr={self.ccr}, "
                f"ci={self.ci}, reduced={self.reduced})")


class Cell:
    """One fixed-size cell: either user data or a resource-management cell."""

    __slots__ = ("vc", "kind", "efci", "clp", "eom", "rm", "emitted_at")

    def __init__(self, vc, kind=DATA, efci=False, clp=False, eom=False,
                 rm: Optional[RmPayload] = None, emitted_at: int = 0):
        if (rm is not None) != (kind == RM):
            raise ValueError("rm payload present iff kind is RM")
        self.vc = vc
        self.kind = kind
        self.efci = efci
        self.clp = clp
        self.eom = eom
        self.rm = rm
        self.emitted_at = emitted_at

    def mark_efci(self) -> None:
        """Set the congestion bit.  There is deliberately no way to clear it."""
        self.efci = True

    def __repr__(self):
        flags = "".join(f for f, on in
                        (("E", self.efci), ("C", self.clp), ("M", self.eom)) if on)
        return f"Cell(vc={self.vc}, {self.kind}{',' + flags if flags else ''})"


def make_forward_rm(vc, acr, pcr, emitted_at: int = 0) -> Cell:
    """Build the forward RM cell a source emits: ER starts at PCR, CCR at ACR."""
    if not 0 <= acr <= pcr:
        raise ValueError(f"acr {acr} outside [0, pcr={pcr}]")
    payload = RmPayload(FORWARD, er=pcr, ccr=acr)
    return Cell(vc, RM, rm=payload, emitted_at=emitted_at)


def bt_from_mbs(mbs: int, scr: RateLike, pcr: RateLike) -> int:
    """Burst tolerance in whole ticks for a maximum burst of ``mbs`` cells.

    BT = (MBS - 1) * (1/SCR - 1/PCR), rounded down to whole microseconds.
    """
    scr = Fraction(scr)
    pcr = Fraction(pcr)
    if scr <= 0 or scr > pcr:
        raise InvalidContract(f"need 0 < scr <= pcr, got scr={scr}, pcr={pcr}")
    if mbs < 1:
        raise InvalidContract(f"mbs must be >= 1, got {mbs}")
    exact = (mbs - 1) * (Fraction(1_000_000) / scr - Fraction(1_000_000) / pcr)
    return int(exact)  # floor: exact is non-negative


@dataclass(frozen=True)
class TrafficContract:
    """Declared per-VC traffic parameters.

    ``cdvt`` and the derived burst tolerance are in microsecond ticks; the
    burst tolerance is kept as an exact rational so the dual-bucket policer
    admits exactly MBS back-to-back cells.
    """

    pcr: Fraction
    scr: Optional[Fraction] = None
    mcr: Fraction = Fraction(0)
    mbs: Optional[int] = None
    cdvt: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pcr", Fraction(self.pcr))
        object.__setattr__(self, "mcr", Fraction(self.mcr))
        if self.scr is not None:
            object.__setattr__(self, "scr", Fraction(self.scr))
        if self.pcr <= 0:
            raise InvalidContract("pcr must be positive")
        if not 0 <= self.mcr <= self.pcr:
            raise InvalidContract(f"need 0 <= mcr <= pcr, got mcr={self.mcr}")
        if self.scr is not None and not 0 < self.scr <= self.pcr:
            raise InvalidContract(f"need 0 < scr <= pcr, got scr={self.scr}")
        if self.mbs is not None and self.mbs < 1:
            raise InvalidContract("mbs must be >= 1")
        if self.mbs is not None and self.scr is None:
            raise InvalidContract("mbs requires scr")

    @property
    def bt(self) -> Optional[Fraction]:
        """Exact burst tolerance in ticks, when MBS and SCR are declared."""
        if self.mbs is None or self.scr is None:
            return None
        return (self.mbs - 1) * (Fraction(1_000_000) / self.scr
                                 - Fraction(1_000_000) / self.pcr)


@dataclass(frozen=True)
class VcPath:
    """Route of a virtual circuit: entry node, exit node, and switch hops.

    ``hops`` lists (switch id, outgoing link id) pairs in path order; the
    final hop's link carries the cells to the destination.
    """

    vc: object
    source: object
    destination: object
    hops: tuple

    def __post_init__(self):
        if not self.hops:
            raise ValueError("a VC path needs at least one hop")
        object.__setattr__(self, "hops", tuple(self.hops))

    @property
    def link_ids(self):
        return tuple(link for _, link in self.hops)
