"""Road-network geometry for spatially embedded nets.

A road network is a star of straight legs joining a hub to a set of exit
points.  Leg positions are discretised into integer zones; a car colour
``(f, p, t, ...)`` reads "entered from exit f, currently p zones from the
hub, heading for exit t", with ``f == hub`` once the car has passed the
hub and drives outward on t's leg.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import SpatialError


def _euclid(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass
class RoadNetwork:
    points: dict[str, tuple[float, float]]
    hub: str
    exits: tuple[str, ...]
    zones_per_unit: float = 1.0
    closeness_radius: float = 2.0

    def __post_init__(self):
        self.exits = tuple(self.exits)
        self.points = {k: (float(x), float(y)) for k, (x, y) in self.points.items()}
        if self.hub not in self.points:
            raise SpatialError(f"hub {self.hub!r} has no coordinates")
        if len(set(self.exits)) != len(self.exits):
            raise SpatialError("duplicate exits")
        if self.hub in self.exits:
            raise SpatialError("hub cannot be an exit")
        if not self.exits:
            raise SpatialError("need at least one exit to form a route")
        if self.zones_per_unit <= 0:
            raise SpatialError("zones_per_unit must be positive")
        if self.closeness_radius < 0:
            raise SpatialError("closeness_radius must be non-negative")
        self._legs: dict[str, float] = {}
        self._starts: dict[str, int] = {}
        for e in self.exits:
            if e not in self.points:
                raise SpatialError(f"exit {e!r} has no coordinates")
            d = _euclid(self.points[e], self.points[self.hub])
            if d <= 0:
                raise SpatialError(f"exit {e!r} coincides with the hub")
            self._legs[e] = d
            self._starts[e] = max(1, round(d * self.zones_per_unit))

    @classmethod
    def default(cls, zones_per_unit: float = 1.0, closeness_radius: float = 2.0) -> "RoadNetwork":
        """Three-exit star: two exits on a straight road and one on a side
        road meeting it at the hub."""
        return cls(
            points={"A": (0.0, 0.0), "B": (100.0, 0.0), "C": (60.0, 20.0), "T": (60.0, 0.0)},
            hub="T",
            exits=("A", "B", "C"),
            zones_per_unit=zones_per_unit,
            closeness_radius=closeness_radius,
        )

    # -- structure ---------------------------------------------------------

    def leg_length(self, exit: str) -> float:
        try:
            return self._legs[exit]
        except KeyError:
            raise SpatialError(f"unknown exit {exit!r}") from None

    def start_zone(self, exit: str) -> int:
        """Zone index at which a car entering from ``exit`` starts; zone 0
        is the hub."""
        try:
            return self._starts[exit]
        except KeyError:
            raise SpatialError(f"unknown exit {exit!r}") from None

    @property
    def max_zone(self) -> int:
        return max(self._starts.values())

    def is_route(self, f: str, t: str) -> bool:
        """True when (f, t) describes a leg a car can occupy: inbound from
        exit f towards exit t (possibly back out the same road), or
        outbound (f is the hub)."""
        if t not in self._starts:
            return False
        return f == self.hub or f in self._starts

    def _check_car(self, f: str, p: int, t: str) -> None:
        if not self.is_route(f, t):
            raise SpatialError(f"({f!r}, {t!r}) is not a route")
        limit = self.start_zone(t) if f == self.hub else self.start_zone(f)
        if not 0 <= p <= limit:
            raise SpatialError(f"zone {p} out of range 0..{limit} for leg {f!r}->{t!r}")

    # -- geometry ----------------------------------------------------------

    def position(self, f: str, p: int, t: str) -> tuple[float, float]:
        """Cartesian position of a car colour (f, p, t)."""
        self._check_car(f, p, t)
        leg = t if f == self.hub else f
        frac = p / self.start_zone(leg)
        hx, hy = self.points[self.hub]
        ex, ey = self.points[leg]
        return (hx + (ex - hx) * frac, hy + (ey - hy) * frac)

    def remaining_zones(self, f: str, p: int, t: str) -> int:
        """Zones still to cross before reaching exit t."""
        self._check_car(f, p, t)
        if f == self.hub:
            return self.start_zone(t) - p
        return p + self.start_zone(t)

    def remaining(self, f: str, p: int, t: str) -> float:
        """Distance still to drive before reaching exit t."""
        self._check_car(f, p, t)
        if f == self.hub:
            return (1 - p / self.start_zone(t)) * self.leg_length(t)
        return p / self.start_zone(f) * self.leg_length(f) + self.leg_length(t)

    def eta(self, f: str, p: int, t: str, v: float) -> float:
        """Remaining driving time at constant speed v."""
        if v <= 0:
            raise SpatialError("speed must be positive")
        return self.remaining(f, p, t) / v

    def is_close(self, f1: str, p1: int, t1: str, f2: str, p2: int, t2: str) -> bool:
        """True when the two car colours sit within the closeness radius."""
        return _euclid(self.position(f1, p1, t1), self.position(f2, p2, t2)) <= self.closeness_radius

    def car_positions(self, cars: Sequence[tuple]) -> list[tuple[float, float]]:
        """Positions for car colour tuples whose first three components are
        (f, p, t); extra components are ignored."""
        return [self.position(c[0], c[1], c[2]) for c in cars]


# ---------------------------------------------------------------------------
# Proximity graph and bubbles.

@dataclass(frozen=True)
class Bubble:
    """Maximal group of cars pairwise linked by closeness."""

    nodes: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.nodes)


def proximity_graph(rn: RoadNetwork, cars: Sequence[tuple]) -> dict[int, set[int]]:
    """Undirected closeness graph over car indices 0..len(cars)-1."""
    pos = rn.car_positions(cars)
    adj: dict[int, set[int]] = {i: set() for i in range(len(cars))}
    for i in range(len(pos)):
        for j in range(i + 1, len(pos)):
            if _euclid(pos[i], pos[j]) <= rn.closeness_radius:
                adj[i].add(j)
                adj[j].add(i)
    return adj


def bubbles(adj: Mapping[int, Iterable[int]], k: int) -> list[Bubble]:
    """Connected components of size >= k, each with sorted members, ordered
    by smallest member.  A bubble needs at least two cars."""
    if k < 2:
        raise SpatialError("a bubble needs at least two cars (k >= 2)")
    seen: set[int] = set()
    out: list[Bubble] = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        stack = [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    comp.append(nb)
                    stack.append(nb)
        if len(comp) >= k:
            out.append(Bubble(tuple(sorted(comp))))
    out.sort(key=lambda b: b.nodes[0])
    return out


# ---------------------------------------------------------------------------
# Guard bindings.  Guard enumeration ranges over whole colour domains, so
# the registered predicates must stay total: colour combinations that do
# not describe a placeable car make IsClose false instead of raising, and
# ETA falls back to plain arithmetic.

def _g_is_route(rn: RoadNetwork, f: str, t: str) -> bool:
    return rn.is_route(f, t)


def _g_start(rn: RoadNetwork, t: str) -> int:
    return rn.start_zone(t)


def _g_is_close(rn: RoadNetwork, f1, p1, t1, f2, p2, t2) -> bool:
    for f, p, t in ((f1, p1, t1), (f2, p2, t2)):
        if not rn.is_route(f, t):
            return False
        limit = rn.start_zone(t) if f == rn.hub else rn.start_zone(f)
        if not 0 <= p <= limit:
            return False
    return rn.is_close(f1, p1, t1, f2, p2, t2)


def _g_eta(rn: RoadNetwork, f, p, t, v) -> float:
    if f == rn.hub:
        dist = (1 - p / rn.start_zone(t)) * rn.leg_length(t)
    else:
        dist = p / rn.start_zone(f) * rn.leg_length(f) + rn.leg_length(t)
    return dist / v


class _Memo:
    """Memoised binding of a pure module-level function to a road network.
    The cache is dropped wholesale past its cap (long simulation batches
    would otherwise grow it without bound) and on pickling, so the wrapper
    stays process-safe."""

    __slots__ = ("fn", "rn", "cache")
    CAP = 1 << 19

    def __init__(self, fn: Any, rn: RoadNetwork):
        self.fn = fn
        self.rn = rn
        self.cache: dict[tuple, Any] = {}

    def __call__(self, *args):
        cache = self.cache
        got = cache.get(args, cache)
        if got is cache:
            got = self.fn(self.rn, *args)
            if len(cache) >= self.CAP:
                cache.clear()
            cache[args] = got
        return got

    def __getstate__(self):
        return (self.fn, self.rn)

    def __setstate__(self, state):
        self.fn, self.rn = state
        self.cache = {}


def guard_functions(rn: RoadNetwork) -> dict[str, Any]:
    """Function table a net references from guards and rate expressions.
    Guard enumeration asks the same geometric questions over and over, so
    each function memoises per argument tuple."""
    return {
        "IsRoute": _Memo(_g_is_route, rn),
        "START": _Memo(_g_start, rn),
        "IsClose": _Memo(_g_is_close, rn),
        "ETA": _Memo(_g_eta, rn),
    }
