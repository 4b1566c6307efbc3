"""Coloured stochastic Petri net data model.

A net is a set of typed places, a set of rate-annotated transitions and a
constants table.  Markings are finite multisets of colour values per place
and live outside the net so the same net can be analysed from several
initial markings.
"""
from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, NamedTuple

from . import expr
from .errors import NetError

DOT = "dot"


def norm_value(value: Any) -> Any:
    """Normalise a colour value: tuples (and tuple subclasses) become plain
    tuples so equal tokens hash and sort identically."""
    if type(value) is tuple:
        for v in value:
            if isinstance(v, tuple):
                return tuple(norm_value(v) for v in value)
        return value
    if isinstance(value, tuple):
        return tuple(norm_value(v) for v in value)
    return value


class Domain:
    """Finite ordered colour domain."""

    name: str

    def values(self) -> Iterator[Any]:
        raise NotImplementedError

    def __contains__(self, value: Any) -> bool:
        raise NotImplementedError

    def size(self) -> int:
        raise NotImplementedError


class AtomDomain(Domain):
    def __init__(self, name: str, values: Iterable[str]):
        vals = tuple(values)
        if not vals:
            raise NetError(f"domain {name!r} is empty")
        if len(set(vals)) != len(vals):
            raise NetError(f"domain {name!r} has duplicate values")
        if not all(isinstance(v, str) for v in vals):
            raise NetError(f"domain {name!r} expects string atoms")
        self.name = name
        self._values = vals
        self._set = frozenset(vals)

    def values(self) -> Iterator[str]:
        return iter(self._values)

    def __contains__(self, value: Any) -> bool:
        return value in self._set

    def size(self) -> int:
        return len(self._values)


class IntDomain(Domain):
    def __init__(self, name: str, values: Iterable[int]):
        vals = tuple(values)
        if not vals:
            raise NetError(f"domain {name!r} is empty")
        if len(set(vals)) != len(vals):
            raise NetError(f"domain {name!r} has duplicate values")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
            raise NetError(f"domain {name!r} expects integers")
        self.name = name
        self._values = vals
        self._set = frozenset(vals)

    @classmethod
    def from_range(cls, name: str, lo: int, hi: int) -> "IntDomain":
        if hi < lo:
            raise NetError(f"domain {name!r}: empty range {lo}..{hi}")
        return cls(name, range(lo, hi + 1))

    def values(self) -> Iterator[int]:
        return iter(self._values)

    def __contains__(self, value: Any) -> bool:
        return value in self._set

    def size(self) -> int:
        return len(self._values)


class TupleDomain(Domain):
    """Cartesian product of component domains; values are plain tuples."""

    def __init__(self, name: str, components: Iterable[Domain]):
        comps = tuple(components)
        if not comps:
            raise NetError(f"domain {name!r} has no components")
        self.name = name
        self.components = comps

    def values(self) -> Iterator[tuple]:
        return itertools.product(*(c.values() for c in self.components))

    def __contains__(self, value: Any) -> bool:
        if not isinstance(value, tuple) or len(value) != len(self.components):
            return False
        return all(v in c for v, c in zip(value, self.components))

    def size(self) -> int:
        n = 1
        for c in self.components:
            n *= c.size()
        return n


class DotDomain(Domain):
    """Single anonymous token colour."""

    def __init__(self, name: str = DOT):
        self.name = name

    def values(self) -> Iterator[str]:
        return iter((DOT,))

    def __contains__(self, value: Any) -> bool:
        return value == DOT

    def size(self) -> int:
        return 1


@dataclass(frozen=True)
class Place:
    name: str
    domain: Domain

    @property
    def is_dot(self) -> bool:
        return isinstance(self.domain, DotDomain)


@dataclass(frozen=True)
class InputArc:
    """Input arc: a variable pattern over a coloured place, or a constant
    token count drawn from a dot place."""

    place: str
    pattern: tuple[str, ...] | None = None
    count: int = 1


@dataclass(frozen=True)
class OutputArc:
    """Output arc: ``expr`` evaluates to a colour value for coloured places
    and to a non-negative token count for dot places."""

    place: str
    expr: expr.Node


@dataclass(frozen=True)
class TransitionDef:
    name: str
    inputs: tuple[InputArc, ...]
    outputs: tuple[OutputArc, ...]
    guard: expr.Node
    rate: expr.Node
    tags: frozenset[str] = frozenset()
    free: tuple[tuple[str, str], ...] = ()  # (variable, domain name)


class CarToken(NamedTuple):
    """Convenience view of a car colour (origin leg, zone, exit, speed,
    carried message count)."""

    f: str
    p: int
    t: str
    v: int
    m: int


@dataclass
class Net:
    name: str
    places: tuple[Place, ...]
    transitions: tuple[TransitionDef, ...]
    constants: dict[str, Any] = field(default_factory=dict)
    functions: dict[str, Callable] = field(default_factory=dict)
    spatial: Any = None  # RoadNetwork when the net has geometric context

    def __post_init__(self):
        self._place_by_name = {p.name: p for p in self.places}
        self._trans_by_name = {t.name: t for t in self.transitions}
        self._domains: dict[str, Domain] | None = None

    def place(self, name: str) -> Place:
        try:
            return self._place_by_name[name]
        except KeyError:
            raise NetError(f"unknown place {name!r}") from None

    def transition(self, name: str) -> TransitionDef:
        try:
            return self._trans_by_name[name]
        except KeyError:
            raise NetError(f"unknown transition {name!r}") from None

    def has_place(self, name: str) -> bool:
        return name in self._place_by_name

    def domains_by_name(self) -> dict[str, Domain]:
        if self._domains is not None:
            return self._domains
        out: dict[str, Domain] = {}
        for p in self.places:
            stack = [p.domain]
            while stack:
                d = stack.pop()
                if d.name not in out:
                    out[d.name] = d
                    if isinstance(d, TupleDomain):
                        stack.extend(d.components)
        self._domains = out
        return out

    def validate(self) -> None:
        """Check structural well-formedness; raises NetError on failure."""
        names = [p.name for p in self.places]
        if len(set(names)) != len(names):
            raise NetError("duplicate place names")
        tnames = [t.name for t in self.transitions]
        if len(set(tnames)) != len(tnames):
            raise NetError("duplicate transition names")
        if set(names) & set(tnames):
            raise NetError("a place and a transition share a name")
        domains = self.domains_by_name()
        for t in self.transitions:
            bound: set[str] = set()
            for arc in t.inputs:
                place = self.place(arc.place)
                if place.is_dot:
                    if arc.pattern is not None:
                        raise NetError(f"{t.name}: dot place {arc.place!r} takes a count, not a pattern")
                    if arc.count < 1:
                        raise NetError(f"{t.name}: input count from {arc.place!r} must be >= 1")
                else:
                    if arc.pattern is None:
                        raise NetError(f"{t.name}: coloured place {arc.place!r} needs a variable pattern")
                    dom = place.domain
                    if isinstance(dom, TupleDomain):
                        if len(arc.pattern) != len(dom.components):
                            raise NetError(
                                f"{t.name}: pattern arity {len(arc.pattern)} does not match "
                                f"domain {dom.name!r}"
                            )
                    elif len(arc.pattern) != 1:
                        raise NetError(f"{t.name}: scalar place {arc.place!r} takes a single variable")
                    bound.update(arc.pattern)
            free_names = set()
            for var, dname in t.free:
                if dname not in domains:
                    raise NetError(f"{t.name}: free variable {var!r} uses unknown domain {dname!r}")
                if var in bound or var in free_names:
                    raise NetError(f"{t.name}: variable {var!r} declared twice")
                free_names.add(var)
            known = bound | free_names | set(self.constants)
            for label, node in (("guard", t.guard), ("rate", t.rate)):
                for v in expr.free_vars(node):
                    if v not in known:
                        raise NetError(f"{t.name}: {label} references unbound variable {v!r}")
            for arc in t.outputs:
                self.place(arc.place)
                for v in expr.free_vars(arc.expr):
                    if v not in known:
                        raise NetError(f"{t.name}: output to {arc.place!r} references unbound {v!r}")


class Marking:
    """Finite multiset of colour values per place.

    Markings are single-owner mutable values; analysis code copies before
    mutating.  For dot places the multiset degenerates to a count of DOT
    tokens.
    """

    __slots__ = ("_counts",)

    def __init__(self, counts: Mapping[str, Mapping[Any, int]] | None = None):
        self._counts: dict[str, Counter] = {}
        if counts:
            for place, bag in counts.items():
                c = Counter()
                for value, k in bag.items():
                    if k < 0:
                        raise NetError(f"negative count for {value!r} at {place!r}")
                    if k:
                        c[norm_value(value)] += k
                self._counts[place] = c

    @classmethod
    def empty(cls) -> "Marking":
        return cls()

    def add(self, place: str, value: Any, k: int = 1) -> None:
        if k < 0:
            raise NetError("cannot add a negative number of tokens")
        if k == 0:
            return
        self._counts.setdefault(place, Counter())[norm_value(value)] += k

    def remove(self, place: str, value: Any, k: int = 1) -> None:
        if k < 0:
            raise NetError("cannot remove a negative number of tokens")
        if k == 0:
            return
        value = norm_value(value)
        bag = self._counts.get(place)
        have = bag[value] if bag else 0
        if have < k:
            raise NetError(f"cannot remove {k} x {value!r} from {place!r} (have {have})")
        bag[value] -= k
        if bag[value] == 0:
            del bag[value]

    def count(self, place: str) -> int:
        bag = self._counts.get(place)
        return sum(bag.values()) if bag else 0

    def count_of(self, place: str, value: Any) -> int:
        bag = self._counts.get(place)
        return bag.get(norm_value(value), 0) if bag else 0

    def tokens(self, place: str) -> Counter:
        return Counter(self._counts.get(place) or {})

    def places(self) -> list[str]:
        return sorted(p for p, bag in self._counts.items() if bag)

    def copy(self) -> "Marking":
        m = Marking()
        m._counts = {p: Counter(bag) for p, bag in self._counts.items() if bag}
        return m

    def key(self) -> tuple:
        """Canonical hashable encoding: places sorted by name, token bags
        sorted by value."""
        return tuple(
            (place, tuple(sorted(bag.items())))
            for place, bag in sorted(self._counts.items())
            if bag
        )

    def validate(self, net: Net) -> None:
        for place, bag in self._counts.items():
            p = net.place(place)
            for value, k in bag.items():
                if k < 0:
                    raise NetError(f"negative token count at {place!r}")
                if value not in p.domain:
                    raise NetError(f"value {value!r} outside domain of place {place!r}")

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, Marking):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __repr__(self) -> str:
        parts = []
        for place, bag in sorted(self._counts.items()):
            if not bag:
                continue
            if set(bag) == {DOT}:
                parts.append(f"{place}={bag[DOT]}")
            else:
                inner = ", ".join(
                    f"{v!r}x{k}" if k > 1 else f"{v!r}" for v, k in sorted(bag.items())
                )
                parts.append(f"{place}={{{inner}}}")
        return f"Marking({'; '.join(parts)})"


def add_bound_place(net: Net, transition: str, n: int, init: Marking) -> tuple[Net, Marking]:
    """Return a copy of the net where ``transition`` can fire at most ``n``
    more times, enforced by a fresh dot place wired as an extra input.

    The companion marking is ``init`` extended with ``n`` tokens on the new
    place.  Applying the closure twice leaves the tighter bound in force.
    """
    if n < 1:
        raise NetError("bound must be >= 1")
    t = net.transition(transition)
    base = f"p_{transition}"
    name = base
    k = 2
    while net.has_place(name):
        name = f"{base}_{k}"
        k += 1
    place = Place(name, DotDomain())
    new_t = replace(t, inputs=t.inputs + (InputArc(name, None, 1),))
    transitions = tuple(new_t if x.name == transition else x for x in net.transitions)
    new_net = Net(
        name=net.name,
        places=net.places + (place,),
        transitions=transitions,
        constants=dict(net.constants),
        functions=dict(net.functions),
        spatial=net.spatial,
    )
    new_init = init.copy()
    new_init.add(name, DOT, n)
    return new_net, new_init


# ---------------------------------------------------------------------------
# JSON round trip.  Guards, rates and output expressions are stored as text
# in the expression language; registered functions are supplied by the
# caller at load time.

def net_to_json(net: Net, init: Marking | None = None) -> dict:
    domains = net.domains_by_name()
    ddoc: dict[str, Any] = {}
    for name, dom in sorted(domains.items()):
        if isinstance(dom, DotDomain):
            ddoc[name] = {"kind": "dot"}
        elif isinstance(dom, AtomDomain):
            ddoc[name] = {"kind": "atoms", "values": list(dom.values())}
        elif isinstance(dom, IntDomain):
            ddoc[name] = {"kind": "ints", "values": list(dom.values())}
        elif isinstance(dom, TupleDomain):
            ddoc[name] = {"kind": "tuple", "components": [c.name for c in dom.components]}
        else:
            raise NetError(f"cannot serialise domain {name!r}")
    doc: dict[str, Any] = {
        "name": net.name,
        "domains": ddoc,
        "places": [{"name": p.name, "domain": p.domain.name} for p in net.places],
        "transitions": [],
        "constants": dict(sorted(net.constants.items())),
    }
    for t in net.transitions:
        tdoc: dict[str, Any] = {
            "name": t.name,
            "guard": expr.to_text(t.guard),
            "rate": expr.to_text(t.rate),
            "inputs": [],
            "outputs": [{"place": a.place, "expr": expr.to_text(a.expr)} for a in t.outputs],
        }
        for a in t.inputs:
            if a.pattern is None:
                tdoc["inputs"].append({"place": a.place, "count": a.count})
            else:
                tdoc["inputs"].append({"place": a.place, "vars": list(a.pattern)})
        if t.tags:
            tdoc["tags"] = sorted(t.tags)
        if t.free:
            tdoc["free"] = {v: d for v, d in t.free}
        doc["transitions"].append(tdoc)
    if init is not None:
        idoc: dict[str, Any] = {}
        for place in init.places():
            p = net.place(place)
            if p.is_dot:
                idoc[place] = init.count(place)
            else:
                idoc[place] = [
                    [list(v) if isinstance(v, tuple) else v, k]
                    for v, k in sorted(init.tokens(place).items())
                ]
        doc["initial"] = idoc
    return doc


def net_from_json(doc: Mapping, functions: Mapping[str, Callable] | None = None) -> tuple[Net, Marking | None]:
    domains: dict[str, Domain] = {}

    def build_domain(name: str) -> Domain:
        if name in domains:
            return domains[name]
        spec = doc["domains"].get(name)
        if spec is None:
            raise NetError(f"undeclared domain {name!r}")
        kind = spec.get("kind")
        if kind == "dot":
            d: Domain = DotDomain(name)
        elif kind == "atoms":
            d = AtomDomain(name, spec["values"])
        elif kind == "ints":
            d = IntDomain(name, spec["values"])
        elif kind == "range":
            d = IntDomain.from_range(name, spec["lo"], spec["hi"])
        elif kind == "tuple":
            d = TupleDomain(name, [build_domain(c) for c in spec["components"]])
        else:
            raise NetError(f"unknown domain kind {kind!r} for {name!r}")
        domains[name] = d
        return d

    places = tuple(Place(p["name"], build_domain(p["domain"])) for p in doc["places"])
    transitions = []
    for tdoc in doc["transitions"]:
        inputs = []
        for a in tdoc.get("inputs", ()):
            if "vars" in a:
                inputs.append(InputArc(a["place"], tuple(a["vars"])))
            else:
                inputs.append(InputArc(a["place"], None, int(a.get("count", 1))))
        outputs = tuple(OutputArc(a["place"], expr.parse(a["expr"])) for a in tdoc.get("outputs", ()))
        transitions.append(
            TransitionDef(
                name=tdoc["name"],
                inputs=tuple(inputs),
                outputs=outputs,
                guard=expr.parse(tdoc.get("guard", "true")),
                rate=expr.parse(tdoc["rate"]),
                tags=frozenset(tdoc.get("tags", ())),
                free=tuple((v, d) for v, d in sorted(tdoc.get("free", {}).items())),
            )
        )
    net = Net(
        name=doc.get("name", "net"),
        places=places,
        transitions=tuple(transitions),
        constants=dict(doc.get("constants", {})),
        functions=dict(functions or {}),
    )
    net.validate()
    init = None
    if "initial" in doc:
        init = Marking()
        for place, spec in doc["initial"].items():
            p = net.place(place)
            if p.is_dot:
                init.add(place, DOT, int(spec))
            else:
                for value, k in spec:
                    if isinstance(value, list):
                        value = tuple(value)
                    init.add(place, value, int(k))
        init.validate(net)
    return net, init


def load_net(path: str | Path, functions: Mapping[str, Callable] | None = None) -> tuple[Net, Marking | None]:
    with open(path, "r", encoding="utf-8") as fh:
        return net_from_json(json.load(fh), functions)


def save_net(net: Net, path: str | Path, init: Marking | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net_to_json(net, init), fh, indent=2, sort_keys=True)
        fh.write("\n")
