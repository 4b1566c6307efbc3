"""Message relay across a network dead spot.

Cars enter the road network at an exit, drive zone by zone towards the
hub and out to their destination exit, and carry messages created on
board.  A message is delivered when its car leaves the network, or when
it hops to a nearby car that will reach an exit sooner.  An optional
fraction of cars has satellite uplink and delivers carried messages from
anywhere.

Net interface: place K holds idle cars, place L holds undelivered message
capacity, place Z holds active cars coloured (f, p, t, v, m) - origin
leg, zone, destination exit, speed, carried messages - with a trailing
satellite flag s when the uplink variant is on.
"""
from __future__ import annotations

import math
from bisect import insort
from dataclasses import dataclass, replace
from functools import partial
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import expr, sim
from .errors import DeadspotError
from .net import (
    DOT,
    AtomDomain,
    DotDomain,
    InputArc,
    IntDomain,
    Marking,
    Net,
    OutputArc,
    Place,
    TransitionDef,
    TupleDomain,
)
from .spatial import RoadNetwork, guard_functions

_RESERVED_VARS = frozenset(
    ["f", "p", "t", "v", "m", "s", "f'", "p'", "t'", "v'", "m'", "s'"]
)


@dataclass(frozen=True)
class DeadspotParams:
    max_cars: int = 10
    max_messages: int = 20
    zone_resolution: float = 1.0
    speeds: tuple[int, ...] = (80, 100, 120)
    ent_rate: float = 1.0
    ext_rate: float = 1.0
    adv_coeff: float = 0.04
    cre_rate: float = 3.0
    jmp_rate: float = 5.0
    sat_rate: float = 10.0
    closeness_radius: float = 2.0
    satellites_per_10: int = 0
    jmp_enabled: bool = True
    arrival_scale: float = 1.0
    routes: tuple[tuple[str, str], ...] | None = None
    network: RoadNetwork | None = None

    def __post_init__(self):
        object.__setattr__(self, "speeds", tuple(self.speeds))
        if self.routes is not None:
            object.__setattr__(self, "routes", tuple((f, t) for f, t in self.routes))

    def validate(self) -> None:
        if self.max_cars < 1:
            raise DeadspotError("max_cars must be >= 1")
        if self.max_messages < 0:
            raise DeadspotError("max_messages must be >= 0")
        if not self.speeds:
            raise DeadspotError("need at least one speed")
        for v in self.speeds:
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise DeadspotError(f"speeds must be positive integers, got {v!r}")
        if len(set(self.speeds)) != len(self.speeds):
            raise DeadspotError("duplicate speeds")
        for name in ("ent_rate", "ext_rate", "adv_coeff", "cre_rate", "jmp_rate", "sat_rate", "arrival_scale"):
            if getattr(self, name) <= 0:
                raise DeadspotError(f"{name} must be positive")
        if self.zone_resolution <= 0:
            raise DeadspotError("zone_resolution must be positive")
        if self.closeness_radius < 0:
            raise DeadspotError("closeness_radius must be non-negative")
        if not isinstance(self.satellites_per_10, int) or not 0 <= self.satellites_per_10 <= 10:
            raise DeadspotError("satellites_per_10 must be an integer in 0..10")
        rn = road_network(self)
        if self.routes is not None:
            if not self.routes:
                raise DeadspotError("routes list cannot be empty")
            for f, t in self.routes:
                if f not in rn.exits or t not in rn.exits or f == t:
                    raise DeadspotError(f"invalid route ({f!r}, {t!r})")
        for point in rn.points:
            if point in _RESERVED_VARS:
                raise DeadspotError(f"point name {point!r} collides with a binding variable")

    @property
    def satellite_variant(self) -> bool:
        return self.satellites_per_10 > 0


def road_network(params: DeadspotParams) -> RoadNetwork:
    base = params.network if params.network is not None else RoadNetwork.default()
    return RoadNetwork(
        points=dict(base.points),
        hub=base.hub,
        exits=base.exits,
        zones_per_unit=params.zone_resolution,
        closeness_radius=params.closeness_radius,
    )


def _route_ok(allowed: frozenset, f: str, t: str) -> bool:
    return (f, t) in allowed


def expected_exit_delay(rn: RoadNetwork, adv_coeff: float, f: str, p: int, t: str, v: int) -> float:
    """Mean time for a car at (f, p, t) to reach its exit on its own: one
    exponential zone hop at rate adv_coeff * v per remaining zone."""
    return rn.remaining_zones(f, p, t) / (adv_coeff * v)


def build(params: DeadspotParams) -> tuple[Net, Marking]:
    """Construct the relay net and its initial marking (all cars idle in
    K, all message capacity in L, no cars on the road)."""
    params.validate()
    rn = road_network(params)
    hub = rn.hub
    sat = params.satellite_variant

    exit_dom = AtomDomain("exit", rn.exits)
    entry_dom = AtomDomain("entry", rn.exits + (hub,))
    zone_dom = IntDomain.from_range("zone", 0, rn.max_zone)
    speed_dom = IntDomain("speed", sorted(params.speeds))
    msg_dom = IntDomain.from_range("msg", 0, params.max_messages)
    comps: list = [entry_dom, zone_dom, exit_dom, speed_dom, msg_dom]
    if sat:
        comps.append(IntDomain.from_range("flag", 0, 1))
    car_dom = TupleDomain("car", comps)

    places = (
        Place("K", DotDomain()),
        Place("L", DotDomain()),
        Place("Z", car_dom),
    )

    base_vars = ("f", "p", "t", "v", "m") + (("s",) if sat else ())
    primed_vars = tuple(v + "'" for v in base_vars)
    tup = "(" + ", ".join(base_vars) + ")"

    def with_sat(expr_text: str, svar: str = "s") -> str:
        # rebuild an output tuple text with the satellite flag appended
        return expr_text[:-1] + f", {svar})" if sat else expr_text

    ent_guard = f"IsRoute(f, t) and f != {hub} and p == START(f) and m == 0"
    if params.routes is not None:
        ent_guard += " and RouteOK(f, t)"
    ent_rate = "ENTR"
    if sat:
        ent_guard += " and (s == 1 or SATFRAC < 1) and (s == 0 or SATFRAC > 0)"
        ent_rate = "ENTR * (s * SATFRAC + (1 - s) * (1 - SATFRAC))"
    ent_free = [("f", "exit"), ("t", "exit"), ("v", "speed"), ("p", "zone"), ("m", "msg")]
    if sat:
        ent_free.append(("s", "flag"))

    transitions = [
        TransitionDef(
            name="ent",
            inputs=(InputArc("K", None, 1),),
            outputs=(OutputArc("Z", expr.parse(with_sat("(f, p, t, v, m)"))),),
            guard=expr.parse(ent_guard),
            rate=expr.parse(ent_rate),
            free=tuple(ent_free),
        ),
        TransitionDef(
            name="ext",
            inputs=(InputArc("Z", base_vars),),
            outputs=(OutputArc("K", expr.parse("1")), OutputArc("L", expr.parse("m"))),
            guard=expr.parse(f"IsRoute(f, t) and f == {hub} and p == START(t)"),
            rate=expr.parse("EXTR"),
        ),
        TransitionDef(
            name="adv",
            inputs=(InputArc("Z", base_vars),),
            outputs=(OutputArc("Z", expr.parse(with_sat("(f', p', t, v, m)"))),),
            guard=expr.parse(
                # the last inbound hop lands on the hub leg directly, so a
                # route f -> t takes exactly START(f) + START(t) hops and
                # inbound zone 0 is never occupied
                f"IsRoute(f, t) and ((f != {hub} and p > 1 and p' == p - 1 and f' == f)"
                f" or (f != {hub} and p == 1 and p' == 0 and f' == {hub})"
                f" or (f == {hub} and p != START(t) and f' == f and p' == p + 1))"
            ),
            rate=expr.parse("ADVC * v"),
            tags=frozenset({"spatial"}),
            free=(("f'", "entry"), ("p'", "zone")),
        ),
        TransitionDef(
            name="cre",
            inputs=(InputArc("Z", base_vars), InputArc("L", None, 1)),
            outputs=(OutputArc("Z", expr.parse(with_sat("(f, p, t, v, m + 1)"))),),
            guard=expr.TRUE,
            rate=expr.parse("CRER"),
        ),
    ]
    if params.jmp_enabled:
        transitions.append(
            TransitionDef(
                name="jmp",
                inputs=(InputArc("Z", base_vars), InputArc("Z", primed_vars)),
                outputs=(
                    OutputArc("Z", expr.parse(with_sat("(f, p, t, v, m + m')"))),
                    OutputArc("Z", expr.parse(with_sat("(f', p', t', v', 0)", "s'"))),
                ),
                guard=expr.parse(
                    "IsClose(f, p, t, f', p', t') and ETA(f, p, t, v) < ETA(f', p', t', v')"
                ),
                rate=expr.parse("JMPR"),
            )
        )
    if sat:
        transitions.append(
            TransitionDef(
                name="sat",
                inputs=(InputArc("Z", base_vars),),
                outputs=(
                    OutputArc("Z", expr.parse("(f, p, t, v, 0, s)")),
                    OutputArc("L", expr.parse("m")),
                ),
                guard=expr.parse("s == 1 and m >= 1"),
                rate=expr.parse("SATR"),
            )
        )

    constants: dict[str, Any] = {name: name for name in rn.points}
    constants.update(
        ENTR=params.ent_rate * params.arrival_scale,
        EXTR=params.ext_rate,
        ADVC=params.adv_coeff,
        CRER=params.cre_rate,
        JMPR=params.jmp_rate,
        SATR=params.sat_rate,
        SATFRAC=params.satellites_per_10 / 10,
    )
    functions = guard_functions(rn)
    if params.routes is not None:
        functions["RouteOK"] = partial(_route_ok, frozenset(params.routes))

    net = Net(
        name="deadspot",
        places=places,
        transitions=tuple(transitions),
        constants=constants,
        functions=functions,
        spatial=rn,
    )
    net.validate()
    init = Marking()
    init.add("K", DOT, params.max_cars)
    if params.max_messages:
        init.add("L", DOT, params.max_messages)
    return net, init


# ---------------------------------------------------------------------------
# Annotators.

class ConservationChecker:
    """O(1) per-event invariant check: cars in K plus cars on the road
    stay at max_cars; message capacity in L plus carried messages stay at
    max_messages."""

    def __init__(self, params: DeadspotParams):
        self.params = params
        self.sum_m = 0

    def begin(self, view: sim.EngineView) -> None:
        self.sum_m = sum(
            c * colour[4] for colour, c in view.tokens("Z").items()
        )
        self._cars_k = view.counter("K")
        self._cars_z = view.counter("Z")
        self._msgs_l = view.counter("L")
        self._mix: dict[str, int] = {}
        self._check(view)

    def on_event(self, view: sim.EngineView, time: float, transition: str, binding: tuple) -> tuple:
        if transition == "cre":
            self.sum_m += 1
        elif transition == "ext" or transition == "sat":
            i = self._mix.get(transition)
            if i is None:
                i = next(j for j, (name, _) in enumerate(binding) if name == "m")
                self._mix[transition] = i
            self.sum_m -= binding[i][1]
        self._check(view)
        return ()

    def _check(self, view: sim.EngineView) -> None:
        cars = self._cars_k() + self._cars_z()
        if cars != self.params.max_cars:
            raise DeadspotError(f"car conservation violated: K + |Z| = {cars}, expected {self.params.max_cars}")
        msgs = self._msgs_l() + self.sum_m
        if msgs != self.params.max_messages:
            raise DeadspotError(f"message conservation violated: L + sum(m) = {msgs}, expected {self.params.max_messages}")


class MessageTracker:
    """Annotator giving cars and messages stable identities.

    Tokens of equal colour are interchangeable, so the tracker always
    picks the car with the smallest id among a colour class; annotations
    are therefore deterministic for a given event sequence.

    Per event it emits a tuple of entries:
    ("entered", car), ("moved", car), ("created", msg, colour, expected),
    ("jumped", msgs, donor_colour, receiver_colour),
    ("delivered", msgs, colour, "exit"|"satellite"), ("exited", car).
    """

    def __init__(self, params: DeadspotParams, check_conservation: bool = True):
        self.params = params
        self.rn = road_network(params)
        self.check_conservation = check_conservation
        self.sat = params.satellite_variant

    def begin(self, view: sim.EngineView) -> None:
        self.next_car = 0
        self.next_msg = 0
        self.sum_m = 0
        self.msgs_of: dict[int, list[int]] = {}
        self.by_colour: dict[tuple, list[int]] = {}
        self._ix: dict[str, tuple] = {}
        self._cars_k = view.counter("K")
        self._cars_z = view.counter("Z")
        self._msgs_l = view.counter("L")
        for colour in sorted(view.tokens("Z")):
            for _ in range(view.tokens("Z")[colour]):
                car = self._new_car(colour)
                for _m in range(colour[4]):
                    self.msgs_of[car].append(self._new_msg())
                self.sum_m += colour[4]
        if self.check_conservation:
            self._conserve(view)

    def _new_car(self, colour: tuple) -> int:
        # ids are handed out in increasing order, so append keeps lists sorted
        car = self.next_car
        self.next_car += 1
        self.msgs_of[car] = []
        self.by_colour.setdefault(colour, []).append(car)
        return car

    def _new_msg(self) -> int:
        m = self.next_msg
        self.next_msg += 1
        return m

    def _take(self, colour: tuple) -> int:
        cars = self.by_colour.get(colour)
        if not cars:
            raise DeadspotError(f"no tracked car of colour {colour!r}")
        car = cars.pop(0)
        if not cars:
            del self.by_colour[colour]
        return car

    def _put(self, car: int, colour: tuple) -> None:
        cars = self.by_colour.get(colour)
        if cars is None:
            self.by_colour[colour] = [car]
        else:
            insort(cars, car)

    def _colour(self, b: Mapping[str, Any], primed: bool = False) -> tuple:
        suffix = "'" if primed else ""
        parts = [b["f" + suffix], b["p" + suffix], b["t" + suffix], b["v" + suffix], b["m" + suffix]]
        if self.sat:
            parts.append(b["s" + suffix])
        return tuple(parts)

    def _slots(self, transition: str, binding: tuple) -> tuple:
        """Positions of the colour fields inside a binding tuple.

        Binding entries are name-sorted and the name set per transition is
        fixed by the net, so the index map is computed once per transition.
        Returns (base, primed) index tuples; primed covers whichever primed
        fields the transition binds, in base field order.
        """
        pos = {name: i for i, (name, _) in enumerate(binding)}
        names = ("f", "p", "t", "v", "m", "s") if self.sat else ("f", "p", "t", "v", "m")
        base = tuple(pos[n] for n in names)
        primed = tuple(pos[n + "'"] for n in names if n + "'" in pos)
        ix = (base, primed)
        self._ix[transition] = ix
        return ix

    def on_event(self, view: sim.EngineView, time: float, transition: str, binding: tuple) -> tuple:
        ix = self._ix.get(transition)
        if ix is None:
            ix = self._slots(transition, binding)
        base = ix[0]
        if len(base) == 5:
            b0, b1, b2, b3, b4 = base
            colour = (binding[b0][1], binding[b1][1], binding[b2][1], binding[b3][1], binding[b4][1])
        else:
            colour = tuple(binding[i][1] for i in base)
        out: list[tuple] = []
        if transition == "adv":
            new = (binding[ix[1][0]][1], binding[ix[1][1]][1]) + colour[2:]
            car = self._take(colour)
            self._put(car, new)
            out.append(("moved", car))
        elif transition == "ent":
            out.append(("entered", self._new_car(colour)))
        elif transition == "cre":
            new = colour[:4] + (colour[4] + 1,) + colour[5:]
            car = self._take(colour)
            msg = self._new_msg()
            self.msgs_of[car].append(msg)
            self.sum_m += 1
            self._put(car, new)
            expected = expected_exit_delay(
                self.rn, self.params.adv_coeff, new[0], new[1], new[2], new[3]
            )
            out.append(("created", msg, new, expected))
        elif transition == "ext":
            car = self._take(colour)
            moved = self.msgs_of.pop(car)
            if len(moved) != colour[4]:
                raise DeadspotError(f"car {car} carries {len(moved)} tracked messages, colour says {colour[4]}")
            if moved:
                self.sum_m -= len(moved)
                out.append(("delivered", tuple(moved), colour, "exit"))
            out.append(("exited", car))
        elif transition == "jmp":
            receiver_old = colour
            donor_old = tuple(binding[i][1] for i in ix[1])
            r_eta = self.rn.eta(receiver_old[0], receiver_old[1], receiver_old[2], receiver_old[3])
            d_eta = self.rn.eta(donor_old[0], donor_old[1], donor_old[2], donor_old[3])
            if not r_eta < d_eta:
                raise DeadspotError(
                    f"jump moved messages the wrong way: receiver eta {r_eta} >= donor eta {d_eta}"
                )
            receiver = self._take(receiver_old)
            donor = self._take(donor_old)
            moved = self.msgs_of[donor]
            if len(moved) != donor_old[4]:
                raise DeadspotError(f"car {donor} carries {len(moved)} tracked messages, colour says {donor_old[4]}")
            self.msgs_of[donor] = []
            self.msgs_of[receiver].extend(moved)
            receiver_new = receiver_old[:4] + (receiver_old[4] + donor_old[4],) + receiver_old[5:]
            donor_new = donor_old[:4] + (0,) + donor_old[5:]
            self._put(receiver, receiver_new)
            self._put(donor, donor_new)
            out.append(("jumped", tuple(moved), donor_old, receiver_old))
        elif transition == "sat":
            car = self._take(colour)
            moved = self.msgs_of[car]
            if len(moved) != colour[4]:
                raise DeadspotError(f"car {car} carries {len(moved)} tracked messages, colour says {colour[4]}")
            self.msgs_of[car] = []
            self.sum_m -= len(moved)
            self._put(car, colour[:4] + (0,) + colour[5:])
            out.append(("delivered", tuple(moved), colour, "satellite"))
        else:
            raise DeadspotError(f"unexpected transition {transition!r} in a relay trace")
        if self.check_conservation:
            self._conserve(view)
        return tuple(out)

    def _conserve(self, view: sim.EngineView) -> None:
        cars = self._cars_k() + self._cars_z()
        if cars != self.params.max_cars:
            raise DeadspotError(f"car conservation violated: K + |Z| = {cars}, expected {self.params.max_cars}")
        msgs = self._msgs_l() + self.sum_m
        if msgs != self.params.max_messages:
            raise DeadspotError(f"message conservation violated: L + sum(m) = {msgs}, expected {self.params.max_messages}")


def tracker_factory(params: DeadspotParams, check_conservation: bool = True) -> Callable[[], MessageTracker]:
    return partial(MessageTracker, params, check_conservation)


def conservation_factory(params: DeadspotParams) -> Callable[[], ConservationChecker]:
    return partial(ConservationChecker, params)


def _annotator_factory(params: DeadspotParams, track: bool | str):
    if not track:
        return None
    if track == "conserve":
        return conservation_factory(params)
    return tracker_factory(params)


def simulate_deadspot(
    params: DeadspotParams,
    horizon: float,
    seed: int,
    *,
    collect: bool = True,
    track: bool | str = True,
    audit: bool = False,
) -> sim.Trace:
    net, init = build(params)
    factory = _annotator_factory(params, track)
    annotator = factory() if factory is not None else None
    return sim.simulate(net, init, horizon, seed, collect=collect, annotator=annotator, audit=audit)


def run_deadspot_batch(
    params: DeadspotParams,
    *,
    runs: int,
    horizon: float,
    base_seed: int = 0,
    jobs: int = 1,
    collect: bool = True,
    track: bool | str = True,
    reduce: Callable[[sim.Trace], Any] | None = None,
) -> list:
    net, init = build(params)
    factory = _annotator_factory(params, track)
    return sim.run_many(
        net,
        init,
        runs=runs,
        horizon=horizon,
        base_seed=base_seed,
        jobs=jobs,
        collect=collect,
        annotator_factory=factory,
        reduce=reduce,
    )


# ---------------------------------------------------------------------------
# Delivery analysis.

@dataclass
class DeliveryRecord:
    msg: int
    created: float
    creator: tuple  # car colour right after creation
    expected: float  # mean solo time to the creator's exit
    delivered: float | None = None
    mode: str | None = None  # "exit" | "satellite" | None while undelivered
    jumps: int = 0

    @property
    def delay(self) -> float | None:
        if self.delivered is None:
            return None
        return self.delivered - self.created


def message_records(trace: sim.Trace) -> list[DeliveryRecord]:
    """Reconstruct per-message delivery records from trace annotations."""
    if trace.net_name != "deadspot":
        raise DeadspotError(f"trace of net {trace.net_name!r} is not a relay trace")
    records: dict[int, DeliveryRecord] = {}
    for ev in trace.events:
        for ann in ev.annotations:
            kind = ann[0]
            if kind == "created":
                _, msg, colour, expected = ann
                records[msg] = DeliveryRecord(msg, ev.time, colour, expected)
            elif kind == "jumped":
                for msg in ann[1]:
                    if msg in records:
                        records[msg].jumps += 1
            elif kind == "delivered":
                for msg in ann[1]:
                    if msg in records:
                        records[msg].delivered = ev.time
                        records[msg].mode = ann[3]
    return [records[k] for k in sorted(records)]


def _per_trace_records(trace: sim.Trace) -> tuple[list[DeliveryRecord], list[DeliveryRecord]]:
    recs = message_records(trace)
    done = [r for r in recs if r.delivered is not None]
    return recs, done


def delivery_metrics(traces: sim.Trace | Sequence[sim.Trace]) -> dict[str, Any]:
    """Aggregate delivery statistics over one or more runs.

    Delays pool delivered messages across runs; messages still in flight
    at the end of a run are censored - counted and reported, never mixed
    into delay statistics.  The confidence interval is a normal interval
    over per-run mean delays.
    """
    if isinstance(traces, sim.Trace):
        traces = [traces]
    if not traces:
        raise DeadspotError("no traces given")
    created = delivered = censored = jumps = 0
    delays: list[float] = []
    expecteds: list[float] = []
    half = 0
    run_means: list[float] = []
    for trace in traces:
        recs, done = _per_trace_records(trace)
        created += len(recs)
        delivered += len(done)
        censored += len(recs) - len(done)
        jumps += sum(r.jumps for r in recs)
        if done:
            run_means.append(float(np.mean([r.delay for r in done])))
        for r in done:
            delays.append(r.delay)
            expecteds.append(r.expected)
            if r.delay < 0.5 * r.expected:
                half += 1
    out: dict[str, Any] = {
        "runs": len(traces),
        "created": created,
        "delivered": delivered,
        "censored": censored,
        "jumps": jumps,
    }
    if delays:
        out["mean_delay"] = float(np.mean(delays))
        out["mean_expected"] = float(np.mean(expecteds))
        out["improvement_ratio"] = float(np.mean(expecteds) / np.mean(delays))
        out["half_time_fraction"] = half / len(delays)
    else:
        out["mean_delay"] = math.nan
        out["mean_expected"] = math.nan
        out["improvement_ratio"] = math.nan
        out["half_time_fraction"] = math.nan
    if len(run_means) > 1:
        m = float(np.mean(run_means))
        se = float(np.std(run_means, ddof=1)) / math.sqrt(len(run_means))
        out["mean_delay_ci"] = (m - 1.96 * se, m + 1.96 * se)
    return out


def jump_transfers(trace: sim.Trace) -> list[tuple[float, tuple, tuple, tuple]]:
    """(time, donor colour, receiver colour, moved message ids) per jump."""
    out = []
    for ev in trace.events:
        for ann in ev.annotations:
            if ann[0] == "jumped":
                out.append((ev.time, ann[2], ann[3], ann[1]))
    return out


# -- per-trace metric functions for sweeps ----------------------------------

def _m_mean_delay(trace: sim.Trace) -> float:
    _, done = _per_trace_records(trace)
    return float(np.mean([r.delay for r in done])) if done else math.nan


def _m_delivered(trace: sim.Trace) -> float:
    return float(len(_per_trace_records(trace)[1]))


def _m_created(trace: sim.Trace) -> float:
    return float(len(_per_trace_records(trace)[0]))


def _m_censored(trace: sim.Trace) -> float:
    recs, done = _per_trace_records(trace)
    return float(len(recs) - len(done))


def _m_half_time_fraction(trace: sim.Trace) -> float:
    _, done = _per_trace_records(trace)
    if not done:
        return math.nan
    return sum(1 for r in done if r.delay < 0.5 * r.expected) / len(done)


def _m_improvement_ratio(trace: sim.Trace) -> float:
    _, done = _per_trace_records(trace)
    if not done:
        return math.nan
    return float(np.mean([r.expected for r in done]) / np.mean([r.delay for r in done]))


def _m_jumps(trace: sim.Trace) -> float:
    return float(sum(1 for ev in trace.events if ev.transition == "jmp"))


def _m_events(trace: sim.Trace) -> float:
    return float(trace.n_events)


def _m_mean_cars(trace: sim.Trace) -> float:
    z = trace.initial_marking.count("Z")
    last = 0.0
    area = 0.0
    for ev in trace.events:
        area += z * (ev.time - last)
        last = ev.time
        if ev.transition == "ent":
            z += 1
        elif ev.transition == "ext":
            z -= 1
    area += z * (trace.final_time - last)
    return area / trace.final_time if trace.final_time > 0 else math.nan


METRICS: dict[str, Callable[[sim.Trace], float]] = {
    "mean_delay": _m_mean_delay,
    "delivered": _m_delivered,
    "created": _m_created,
    "censored": _m_censored,
    "half_time_fraction": _m_half_time_fraction,
    "improvement_ratio": _m_improvement_ratio,
    "jumps": _m_jumps,
    "events": _m_events,
    "mean_cars": _m_mean_cars,
}


# ---------------------------------------------------------------------------
# Jump protocol benefit.

def _delay_and_half(trace: sim.Trace) -> tuple[float, float]:
    return _m_mean_delay(trace), _m_half_time_fraction(trace)


@dataclass
class BenefitResult:
    pairs: int  # pairs where both arms delivered at least one message
    dropped: int
    mean_delay_jmp: float
    mean_delay_nojmp: float
    diff_mean: float  # nojmp minus jmp; positive means jumps help
    diff_ci95: tuple[float, float]
    t_stat: float
    p_value: float  # one-sided, H1: jmp delay < nojmp delay
    half_time_fraction: float
    half_time_ci95: tuple[float, float]

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def protocol_benefit(
    params: DeadspotParams,
    *,
    pairs: int,
    horizon: float,
    base_seed: int = 0,
    jobs: int = 1,
) -> BenefitResult:
    """Paired comparison of mean delivery delay with jumps on and off.

    Each seed runs once per arm, so the arms share arrival and creation
    randomness; per-run mean delays are differenced pair by pair, which
    cancels most of the between-run variance.
    """
    if pairs < 2:
        raise DeadspotError("need at least 2 pairs")
    on = run_deadspot_batch(
        replace(params, jmp_enabled=True),
        runs=pairs, horizon=horizon, base_seed=base_seed, jobs=jobs,
        reduce=_delay_and_half,
    )
    off = run_deadspot_batch(
        replace(params, jmp_enabled=False),
        runs=pairs, horizon=horizon, base_seed=base_seed, jobs=jobs,
        reduce=_delay_and_half,
    )
    d_on = np.array([r[0] for r in on])
    d_off = np.array([r[0] for r in off])
    usable = ~(np.isnan(d_on) | np.isnan(d_off))
    n = int(usable.sum())
    if n < 2:
        raise DeadspotError("fewer than 2 pairs delivered any message in both arms")
    diff = d_off[usable] - d_on[usable]
    se = float(diff.std(ddof=1)) / math.sqrt(n)
    t_stat = float(diff.mean()) / se if se > 0 else math.inf
    p_value = float(stats.t.sf(t_stat, n - 1))
    half = np.array([r[1] for r in on])
    half = half[~np.isnan(half)]
    h_se = float(half.std(ddof=1)) / math.sqrt(len(half)) if len(half) > 1 else math.nan
    return BenefitResult(
        pairs=n,
        dropped=pairs - n,
        mean_delay_jmp=float(d_on[usable].mean()),
        mean_delay_nojmp=float(d_off[usable].mean()),
        diff_mean=float(diff.mean()),
        diff_ci95=(float(diff.mean() - 1.96 * se), float(diff.mean() + 1.96 * se)),
        t_stat=t_stat,
        p_value=p_value,
        half_time_fraction=float(half.mean()) if len(half) else math.nan,
        half_time_ci95=(
            (float(half.mean() - 1.96 * h_se), float(half.mean() + 1.96 * h_se))
            if len(half) > 1 else (math.nan, math.nan)
        ),
    )


# ---------------------------------------------------------------------------
# Satellite sweep.

def fit_line(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line fit; returns (slope, intercept, r_squared)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 2:
        raise DeadspotError("need at least two points to fit a line")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def _slope_t(xs: Sequence[float], ys: Sequence[float]) -> float:
    """t statistic of the regression slope against zero."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n = x.size
    if n < 3:
        raise DeadspotError("need at least three points for a slope test")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0:
        raise DeadspotError("slope test needs varying x values")
    s2 = float(np.sum(resid**2)) / (n - 2)
    se = math.sqrt(s2 / sxx)
    if se == 0:
        return math.inf if slope > 0 else -math.inf if slope < 0 else 0.0
    return float(slope / se)


@dataclass
class SatelliteFit:
    slope: float
    intercept: float
    r2: float


@dataclass
class SatelliteSweepResult:
    rows: list[dict]  # one per satellite level, n = 0 baseline first
    fit: SatelliteFit  # speed-up factor against n over the swept levels
    baseline_mean_delay: float
    t_stat: float  # run-level regression of mean delay on n
    slope_negative: bool  # t_stat below -1.645 (one-sided 95%)


def satellite_sweep(
    params: DeadspotParams,
    n_values: Sequence[int],
    *,
    runs: int,
    horizon: float,
    base_seed: int = 0,
    jobs: int = 1,
) -> SatelliteSweepResult:
    """Measure how message delay shrinks as more cars get satellite
    uplink.  ``n_values`` are satellites-per-10 levels; a no-satellite
    baseline is always run first and defines the speed-up factor
    baseline_delay / delay(n)."""
    levels = list(n_values)
    if not levels:
        raise DeadspotError("n_values cannot be empty")
    if any(not isinstance(n, int) or isinstance(n, bool) or not 1 <= n <= 9 for n in levels):
        raise DeadspotError("satellite levels must be integers in 1..9")
    if len(set(levels)) != len(levels):
        raise DeadspotError("duplicate satellite levels")
    if runs < 30:
        raise DeadspotError("need at least 30 runs per level")
    rows: list[dict] = []
    run_points: list[tuple[int, float]] = []
    means: dict[int, float] = {}
    for idx, n in enumerate([0] + levels):
        cell = replace(params, satellites_per_10=n)
        traces = run_deadspot_batch(
            cell,
            runs=runs,
            horizon=horizon,
            base_seed=base_seed + idx * runs,
            jobs=jobs,
        )
        per_run = [_m_mean_delay(tr) for tr in traces]
        per_run = [d for d in per_run if not math.isnan(d)]
        summary = delivery_metrics(traces)
        mean = float(np.mean(per_run)) if per_run else math.nan
        means[n] = mean
        rows.append(
            {
                "n": n,
                "runs": runs,
                "mean_delay": mean,
                "delivered": summary["delivered"],
                "created": summary["created"],
                "censored": summary["censored"],
                "jumps": summary["jumps"],
            }
        )
        run_points.extend((n, d) for d in per_run)
    baseline = means[0]
    if math.isnan(baseline):
        raise DeadspotError("baseline produced no deliveries; extend the horizon")
    for row in rows:
        row["factor"] = baseline / row["mean_delay"] if row["mean_delay"] > 0 else math.nan
    pts = [(n, baseline / means[n]) for n in levels if means[n] > 0]
    if len(pts) < 2:
        raise DeadspotError("too few levels with deliveries to fit a line")
    slope, intercept, r2 = fit_line([p[0] for p in pts], [p[1] for p in pts])
    t = _slope_t([p[0] for p in run_points], [p[1] for p in run_points])
    return SatelliteSweepResult(
        rows=rows,
        fit=SatelliteFit(slope, intercept, r2),
        baseline_mean_delay=baseline,
        t_stat=t,
        slope_negative=t < -1.645,
    )


# ---------------------------------------------------------------------------
# Scenario files.

def params_to_json(params: DeadspotParams) -> dict:
    doc: dict[str, Any] = {
        "max_cars": params.max_cars,
        "max_messages": params.max_messages,
        "zone_resolution": params.zone_resolution,
        "speeds": list(params.speeds),
        "ent_rate": params.ent_rate,
        "ext_rate": params.ext_rate,
        "adv_coeff": params.adv_coeff,
        "cre_rate": params.cre_rate,
        "jmp_rate": params.jmp_rate,
        "sat_rate": params.sat_rate,
        "closeness_radius": params.closeness_radius,
        "satellites_per_10": params.satellites_per_10,
        "jmp_enabled": params.jmp_enabled,
        "arrival_scale": params.arrival_scale,
    }
    if params.routes is not None:
        doc["routes"] = [list(r) for r in params.routes]
    if params.network is not None:
        doc["network"] = {
            "points": {k: list(v) for k, v in params.network.points.items()},
            "hub": params.network.hub,
            "exits": list(params.network.exits),
        }
    return doc


def params_from_json(doc: Mapping) -> DeadspotParams:
    known = {
        "max_cars", "max_messages", "zone_resolution", "speeds", "ent_rate",
        "ext_rate", "adv_coeff", "cre_rate", "jmp_rate", "sat_rate",
        "closeness_radius", "satellites_per_10", "jmp_enabled",
        "arrival_scale", "routes", "network",
    }
    unknown = set(doc) - known
    if unknown:
        raise DeadspotError(f"unknown scenario fields: {sorted(unknown)}")
    kw: dict[str, Any] = {k: doc[k] for k in doc if k not in ("routes", "network", "speeds")}
    if "speeds" in doc:
        kw["speeds"] = tuple(doc["speeds"])
    if "routes" in doc and doc["routes"] is not None:
        kw["routes"] = tuple((f, t) for f, t in doc["routes"])
    if "network" in doc and doc["network"] is not None:
        nd = doc["network"]
        kw["network"] = RoadNetwork(
            points={k: tuple(v) for k, v in nd["points"].items()},
            hub=nd["hub"],
            exits=tuple(nd["exits"]),
        )
    params = DeadspotParams(**kw)
    params.validate()
    return params
