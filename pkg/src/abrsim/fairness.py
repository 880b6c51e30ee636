"""Off-line allocation oracles and fairness metrics.

All allocation arithmetic is exact rational: equality tests inside the
water-filling and fair-share iterations never depend on tolerances, and the
worked benchmark vectors come out exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional


class DegenerateOptimal(ValueError):
    """The optimal allocation has a zero entry; normalization is undefined."""


@dataclass(frozen=True)
class AllocationProblem:
    """Links with capacities, VCs with the set of links each traverses.

    ``demands`` caps individual VCs (absent or None = unbounded demand).
    """

    links: tuple          # ((link_id, capacity), ...)
    vcs: tuple            # ((vc_id, frozenset of link_ids), ...)
    demands: tuple = ()   # ((vc_id, cap), ...)

    def __post_init__(self):
        links = tuple((lid, Fraction(cap)) for lid, cap in self.links)
        object.__setattr__(self, "links", links)
        vcs = tuple((vid, frozenset(ls)) for vid, ls in self.vcs)
        object.__setattr__(self, "vcs", vcs)
        demands = tuple((vid, Fraction(cap)) for vid, cap in self.demands)
        object.__setattr__(self, "demands", demands)
        known = {lid for lid, _ in links}
        for lid, cap in links:
            if cap <= 0:
                raise ValueError(f"link {lid} capacity must be positive")
        vc_ids = set()
        for vid, traversed in vcs:
            if vid in vc_ids:
                raise ValueError(f"duplicate vc {vid}")
            vc_ids.add(vid)
            if not traversed:
                raise ValueError(f"vc {vid} traverses no links")
            missing = traversed - known
            if missing:
                raise ValueError(f"vc {vid} references unknown links {missing}")
        for vid, cap in demands:
            if vid not in vc_ids:
                raise ValueError(f"demand cap for unknown vc {vid}")
            if cap < 0:
                raise ValueError(f"demand cap for vc {vid} must be >= 0")

    def demand_map(self) -> Dict[object, Optional[Fraction]]:
        caps = dict(self.demands)
        return {vid: caps.get(vid) for vid, _ in self.vcs}


def max_min(problem: AllocationProblem) -> Dict[object, Fraction]:
    """The unique max-min allocation, honoring per-VC demand caps.

    Repeatedly freezes either the VC whose demand cap binds below the water
    level or every VC on the most-constrained link; ties between equally
    constrained links are broken in ascending link-id order (the result is
    order-independent, the tie-break only fixes the trace).
    """
    remaining = {lid: cap for lid, cap in problem.links}
    on_link = {lid: set() for lid, _ in problem.links}
    routes = {}
    for vid, traversed in problem.vcs:
        routes[vid] = traversed
        for lid in traversed:
            on_link[lid].add(vid)
    demands = problem.demand_map()
    alloc: Dict[object, Fraction] = {}
    unfrozen = set(routes)

    def freeze(vid, amount):
        alloc[vid] = amount
        unfrozen.discard(vid)
        for lid in routes[vid]:
            on_link[lid].discard(vid)
            remaining[lid] -= amount

    while unfrozen:
        levels = [(remaining[lid] / len(users), str(lid), lid)
                  for lid, users in on_link.items() if users]
        if not levels:
            # Every remaining vc is only demand-capped; give each its cap.
            for vid in sorted(unfrozen, key=str):
                freeze(vid, demands[vid] or Fraction(0))
            break
        level, _, lid = min(levels)
        capped = [(demands[vid], str(vid), vid) for vid in unfrozen
                  if demands[vid] is not None and demands[vid] <= level]
        if capped:
            _, _, vid = min(capped)
            freeze(vid, demands[vid])
            continue
        for vid in sorted(on_link[lid], key=str):
            freeze(vid, level)
    return alloc


def fairness_index(actual, optimal) -> float:
    """Jain fairness index of allocations normalized by their optimum.

    Both arguments map vc -> rate (or are equal-length sequences).  Returns
    (sum x)^2 / (n * sum x^2) over x_i = actual_i / optimal_i; 1.0 iff all
    normalized allocations are equal.
    """
    if isinstance(actual, dict):
        keys = list(actual)
        if set(keys) != set(optimal):
            raise ValueError("actual and optimal cover different vc sets")
        pairs = [(actual[k], optimal[k]) for k in keys]
    else:
        if len(actual) != len(optimal):
            raise ValueError("actual and optimal have different lengths")
        pairs = list(zip(actual, optimal))
    if not pairs:
        raise ValueError("empty allocation")
    xs = []
    for a, o in pairs:
        o = Fraction(o)
        if o <= 0:
            raise DegenerateOptimal("optimal allocation must be positive")
        xs.append(Fraction(a) / o)
    total = sum(xs)
    square = sum(x * x for x in xs)
    if square == 0:
        raise ValueError("all allocations are zero; index undefined")
    return float(total * total / (len(xs) * square))


def mit_fair_share(link_bw, vc_rates) -> Fraction:
    """Iterative fair share over one link, after the explicit-rate scheme
    that recomputes the share whenever the set of underloading VCs grows."""
    share, _ = mit_fair_share_rounds(link_bw, vc_rates)
    return share


def mit_fair_share_rounds(link_bw, vc_rates):
    """Returns (fair_share, recomputations).

    Starts from bandwidth / n; VCs with rates strictly below the current
    share are underloading.  Whenever that set grows the share becomes
    (bandwidth - sum of underloading rates) / (number of others), until the
    set and the share are stable.  If every VC underloads, the link is not a
    bottleneck and the last share stands.
    """
    rates = [Fraction(r) for r in vc_rates]
    if not rates:
        raise ValueError("vc_rates must be non-empty")
    bw = Fraction(link_bw)
    if bw <= 0:
        raise ValueError("link bandwidth must be positive")
    n = len(rates)
    share = bw / n
    under = {i for i, r in enumerate(rates) if r < share}
    rounds = 0
    while True:
        if len(under) == n:
            return share, rounds
        new_share = (bw - sum(rates[i] for i in under)) / (n - len(under))
        if new_share != share:
            rounds += 1
            share = new_share
        grown = {i for i, r in enumerate(rates) if r < share}
        if grown == under:
            return share, rounds
        under = grown


def beat_down_probability(p: float, hops: int) -> float:
    """Probability a cell is marked at least once over ``hops`` independent
    per-hop markings of probability ``p``: 1 - (1 - p)**hops."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if hops < 1:
        raise ValueError("hops must be a positive integer")
    return 1.0 - (1.0 - p) ** hops
