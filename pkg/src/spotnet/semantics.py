"""Execution semantics for coloured stochastic nets.

The shared primitive is ``resolved_firings``: given a transition and one
concrete colour per coloured input arc, it enumerates the guard-satisfying
variable bindings, each with its rate, token demands and token additions.
Every consumer (enabled-set computation, unfolding, the simulator's
incremental caches) is a thin driver around it, so they cannot disagree on
what a binding means.

Each distinct binding is one exponential race entry: token multiplicity
beyond what the binding consumes does not scale its rate.
"""
from __future__ import annotations

import os
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, NamedTuple

import numpy as np

from . import expr
from .errors import ConfigError, NetError
from .net import (
    DOT,
    Domain,
    DotDomain,
    InputArc,
    Marking,
    Net,
    OutputArc,
    Place,
    TransitionDef,
    norm_value,
)

DEFAULT_STATE_LIMIT = 10**6
STATE_LIMIT_ENV = "CASTEL_STATE_LIMIT"


def state_limit(explicit: int | None = None) -> int:
    """Exploration budget: explicit argument, else the CASTEL_STATE_LIMIT
    environment variable, else a million."""
    if explicit is not None:
        if explicit < 1:
            raise ConfigError("state limit must be >= 1")
        return explicit
    raw = os.environ.get(STATE_LIMIT_ENV)
    if raw is None or raw == "":
        return DEFAULT_STATE_LIMIT
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{STATE_LIMIT_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{STATE_LIMIT_ENV} must be >= 1, got {value}")
    return value


class ResolvedFiring(NamedTuple):
    binding: tuple[tuple[str, Any], ...]  # sorted by variable name
    rate: float
    demands: tuple[tuple[str, Any, int], ...]  # (place, value, count)
    adds: tuple[tuple[str, Any, int], ...]


class EnabledFiring(NamedTuple):
    transition: str
    binding: tuple[tuple[str, Any], ...]
    rate: float
    demands: tuple[tuple[str, Any, int], ...]
    adds: tuple[tuple[str, Any, int], ...]


def coloured_arcs(net: Net, t: TransitionDef) -> list[InputArc]:
    return [a for a in t.inputs if not net.place(a.place).is_dot]


def dot_arcs(net: Net, t: TransitionDef) -> list[InputArc]:
    return [a for a in t.inputs if net.place(a.place).is_dot]


def _bind_patterns(net: Net, t: TransitionDef, chosen: tuple) -> dict[str, Any] | None:
    """Unify arc patterns with the chosen token values; None on mismatch."""
    env: dict[str, Any] = {}
    ci = 0
    for arc in t.inputs:
        if net.place(arc.place).is_dot:
            continue
        value = chosen[ci]
        ci += 1
        parts = value if isinstance(value, tuple) else (value,)
        if len(parts) != len(arc.pattern):
            raise NetError(f"{t.name}: token {value!r} does not fit pattern of {arc.place!r}")
        for var, part in zip(arc.pattern, parts):
            if var in env:
                if env[var] != part:
                    return None
            else:
                env[var] = part
    return env


def _expand_free(
    guard: expr.Node,
    env: dict[str, Any],
    constants: Mapping[str, Any],
    functions: Mapping[str, Callable],
    free: tuple[tuple[str, str], ...],
    var_domains: dict[str, Domain],
    budget: list[int],
    limit: int,
) -> list[dict[str, Any]]:
    branches = expr.propagate(guard, env, constants, functions, var_domains)
    out: list[dict[str, Any]] = []
    for benv in branches:
        pending = [v for v, _ in free if v not in benv]
        if not pending:
            out.append(benv)
            continue
        var = pending[0]
        for val in var_domains[var].values():
            budget[0] += 1
            if budget[0] > limit:
                raise NetError(
                    f"binding enumeration exceeded the state limit of {limit} "
                    f"(raise it via {STATE_LIMIT_ENV} or limit=)"
                )
            out.extend(
                _expand_free(
                    guard, {**benv, var: val}, constants, functions, free, var_domains, budget, limit
                )
            )
    return out


def resolved_firings(
    net: Net, t: TransitionDef, chosen: tuple, limit: int | None = None
) -> list[ResolvedFiring]:
    """All guard-satisfying bindings of ``t`` given one concrete colour per
    coloured input arc (in arc order).  Availability of tokens is the
    caller's concern; demands here only say what a firing would consume.

    A binding whose coloured output falls outside the target domain (or
    whose dot output count is negative) is not a firing at all.
    """
    env0 = _bind_patterns(net, t, chosen)
    if env0 is None:
        return []
    lim = limit if limit is not None else DEFAULT_STATE_LIMIT
    domains = net.domains_by_name()
    var_domains = {v: domains[d] for v, d in t.free}
    envs = _expand_free(
        t.guard, env0, net.constants, net.functions, t.free, var_domains, [0], lim
    )
    base_demand: Counter = Counter()
    ci = 0
    for arc in t.inputs:
        if net.place(arc.place).is_dot:
            base_demand[(arc.place, DOT)] += arc.count
        else:
            base_demand[(arc.place, norm_value(chosen[ci]))] += 1
            ci += 1
    demands = tuple(
        (pl, val, k) for (pl, val), k in sorted(base_demand.items(), key=lambda kv: (kv[0][0], repr(kv[0][1])))
    )
    out: list[ResolvedFiring] = []
    seen: set[tuple] = set()
    for env in envs:
        binding = tuple(sorted(env.items()))
        if binding in seen:
            continue
        seen.add(binding)
        scope = expr.chain_env(env, net.constants)
        if expr.evaluate(t.guard, scope, net.functions) is not True:
            continue
        rate = expr.evaluate(t.rate, scope, net.functions)
        if isinstance(rate, bool) or not isinstance(rate, (int, float)):
            raise NetError(f"{t.name}: rate is not a number for binding {binding}")
        rate = float(rate)
        if not np.isfinite(rate) or rate <= 0:
            raise NetError(f"{t.name}: rate {rate} must be positive and finite (binding {binding})")
        add_counter: Counter = Counter()
        ok = True
        for arc in t.outputs:
            place = net.place(arc.place)
            val = expr.evaluate(arc.expr, scope, net.functions)
            if place.is_dot:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise NetError(f"{t.name}: output count for {arc.place!r} must be an integer")
                if val < 0:
                    ok = False
                    break
                if val:
                    add_counter[(arc.place, DOT)] += val
            else:
                val = norm_value(val)
                if val not in place.domain:
                    ok = False
                    break
                add_counter[(arc.place, val)] += 1
        if not ok:
            continue
        adds = tuple(
            (pl, val, k)
            for (pl, val), k in sorted(add_counter.items(), key=lambda kv: (kv[0][0], repr(kv[0][1])))
        )
        out.append(ResolvedFiring(binding, rate, demands, adds))
    return out


# ---------------------------------------------------------------------------
# Compiled fast path.  For a transition whose arc patterns bind every
# variable (no free variables, no repeated pattern variables) the guard,
# rate and output expressions reduce to plain functions of the chosen
# colours.  The simulator uses these to fill its caches; resolved_firings
# stays the reference implementation and the audit cross-check.

class _Uncompilable(Exception):
    pass


class _SrcCompiler:
    """Renders an expression tree to Python source.  Variables map to
    parameter names; constants and registered functions become default
    arguments bound at compile time."""

    def __init__(self, names: Mapping[str, str], constants: Mapping[str, Any], functions: Mapping[str, Callable]):
        self.names = names
        self.constants = constants
        self.functions = functions
        self.pool: dict[str, Any] = {}
        self._ckeys: dict[str, str] = {}
        self._fkeys: dict[str, str] = {}

    def _const_ref(self, name: str) -> str:
        key = self._ckeys.get(name)
        if key is None:
            key = f"_k{len(self.pool)}"
            self.pool[key] = self.constants[name]
            self._ckeys[name] = key
        return key

    def _func_ref(self, name: str) -> str:
        key = self._fkeys.get(name)
        if key is None:
            key = f"_f{len(self.pool)}"
            self.pool[key] = self.functions[name]
            self._fkeys[name] = key
        return key

    def render(self, node: expr.Node) -> str:
        if isinstance(node, expr.Const):
            v = node.value
            if v is True:
                return "True"
            if v is False:
                return "False"
            if isinstance(v, (int, float, str)):
                return repr(v)
            if isinstance(v, tuple) and all(
                isinstance(x, (bool, int, float, str)) for x in v
            ):
                return repr(v)
            raise _Uncompilable
        if isinstance(node, expr.Var):
            name = node.name
            mapped = self.names.get(name)
            if mapped is not None:
                return mapped
            if name in self.constants:
                return self._const_ref(name)
            raise _Uncompilable
        if isinstance(node, expr.Call):
            if node.func not in self.functions:
                raise _Uncompilable
            f = self._func_ref(node.func)
            return f"{f}({', '.join(self.render(a) for a in node.args)})"
        if isinstance(node, expr.TupleExpr):
            inner = ", ".join(self.render(a) for a in node.items)
            if len(node.items) == 1:
                inner += ","
            return f"({inner})"
        if isinstance(node, expr.Unary):
            if node.op == "not":
                return f"(not {self.render(node.operand)})"
            return f"(-{self.render(node.operand)})"
        if isinstance(node, expr.Binary):
            return f"({self.render(node.left)} {node.op} {self.render(node.right)})"
        raise _Uncompilable


def _compile_expr(
    node: expr.Node,
    params: list[str],
    names: Mapping[str, str],
    constants: Mapping[str, Any],
    functions: Mapping[str, Callable],
) -> Callable:
    c = _SrcCompiler(names, constants, functions)
    body = c.render(node)
    pieces = list(params) + [f"{k}={k}" for k in c.pool]
    src = "lambda " + ", ".join(pieces) + ": " + body
    return eval(src, dict(c.pool))  # noqa: S307 - source assembled from the validated tree


class CompiledTransition:
    __slots__ = (
        "tname",
        "patterns",
        "slot_used",
        "guard_fn",
        "rate_fn",
        "outs",
        "binding_names",
        "dot_demand",
        "free_plan",
        "prefilter",
    )

    def __init__(self, tname, patterns, slot_used, guard_fn, rate_fn, outs, binding_names, dot_demand, free_plan=None, prefilter=None):
        self.tname = tname
        self.patterns = patterns  # per coloured arc: its variable tuple
        self.slot_used = slot_used  # per arc: part indices feeding guard and rate
        self.guard_fn = guard_fn
        self.rate_fn = rate_fn
        self.outs = outs  # (place name, is_dot, domain, fn over all parts)
        self.binding_names = binding_names  # (variable, flat part index), name-sorted
        self.dot_demand = dot_demand  # merged ((place, count), ...)
        # (free domains, per-branch value functions); when set, guard_fn,
        # rate_fn and outs take the pattern parts followed by the free values
        self.free_plan = free_plan
        # two-arc transitions whose guard starts with ``F(vars...) and ...``
        # where F draws variables from both arcs: (F, ((arc, part), ...) per
        # argument).  guard_fn then covers only the remaining conjuncts; a
        # falsy F value disables the binding outright, which lets the
        # simulator screen colour pairs by their projected arguments alone.
        self.prefilter = prefilter


def _and_conjuncts(node: expr.Node) -> list[expr.Node]:
    """The guard's top-level conjuncts in evaluation order."""
    out: list[expr.Node] = []
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, expr.Binary) and n.op == "and":
            stack.append(n.right)
            stack.append(n.left)
        else:
            out.append(n)
    return out


def _guard_branches(node: expr.Node, cap: int = 32) -> list[list[expr.Node]] | None:
    """The guard as a union of conjunct lists, distributing ``and`` over
    ``or``; None when the expansion would exceed ``cap`` branches."""
    if isinstance(node, expr.Binary) and node.op in ("and", "or"):
        left = _guard_branches(node.left, cap)
        right = _guard_branches(node.right, cap)
        if left is None or right is None:
            return None
        if node.op == "or":
            if len(left) + len(right) > cap:
                return None
            return left + right
        if len(left) * len(right) > cap:
            return None
        return [a + b for a in left for b in right]
    return [[node]]


def _pin_free_vars(
    t: TransitionDef, flat: list[str], constants: Mapping[str, Any]
) -> list[tuple[expr.Node, ...]] | None:
    """Per guard branch, one defining expression for every free variable,
    extracted from equality conjuncts over the pattern variables; None when
    some branch leaves a free variable unpinned."""
    free_names = tuple(v for v, _ in t.free)
    branches = _guard_branches(t.guard)
    if branches is None:
        return None
    known = set(flat) | set(constants)
    plans: list[tuple[expr.Node, ...]] = []
    for conj in branches:
        defs: dict[str, expr.Node] = {}
        for c in conj:
            if not (isinstance(c, expr.Binary) and c.op == "=="):
                continue
            for var, rhs in ((c.left, c.right), (c.right, c.left)):
                if (
                    isinstance(var, expr.Var)
                    and var.name in free_names
                    and var.name not in defs
                    and expr.free_vars(rhs) <= known
                ):
                    defs[var.name] = rhs
                    break
        if any(n not in defs for n in free_names):
            return None
        plans.append(tuple(defs[n] for n in free_names))
    return plans


def compile_transition(net: Net, t: TransitionDef) -> CompiledTransition | None:
    """Compiled form of ``t``, or None when the transition needs the
    generic path (repeated pattern variables, a free variable no guard
    branch pins to a pattern expression, or an unsupported construct)."""
    patterns = tuple(a.pattern for a in coloured_arcs(net, t))
    flat: list[str] = []
    for pat in patterns:
        flat.extend(pat)
    if len(set(flat)) != len(flat):
        return None
    free_names = tuple(v for v, _ in t.free)
    if set(free_names) & set(flat):
        return None
    anames = {v: f"_a{i}" for i, v in enumerate(flat)}
    try:
        if free_names:
            prefilter = None
            domains = net.domains_by_name()
            try:
                free_doms = tuple(domains[d] for _, d in t.free)
            except KeyError:
                return None
            plans = _pin_free_vars(t, flat, net.constants)
            if plans is None:
                return None
            branch_fns = tuple(
                tuple(
                    _compile_expr(d, [anames[v] for v in flat], anames, net.constants, net.functions)
                    for d in plan
                )
                for plan in plans
            )
            free_plan = (free_doms, branch_fns)
            enames = dict(anames)
            for i, v in enumerate(free_names):
                enames[v] = f"_b{i}"
            eparams = [enames[v] for v in list(flat) + list(free_names)]
            guard_fn = _compile_expr(t.guard, eparams, enames, net.constants, net.functions)
            rate_fn = _compile_expr(t.rate, eparams, enames, net.constants, net.functions)
            out_names, out_params = enames, eparams
            slot_used = tuple(tuple(range(len(pat))) for pat in patterns)
            allnames = list(flat) + list(free_names)
        else:
            free_plan = None
            guard_node = t.guard
            prefilter = None
            if len(patterns) == 2:
                head, *rest = _and_conjuncts(t.guard)
                if (
                    isinstance(head, expr.Call)
                    and head.func in net.functions
                    and head.args
                    and all(isinstance(a, expr.Var) and a.name in flat for a in head.args)
                ):
                    n0 = len(patterns[0])
                    plan = []
                    for a in head.args:
                        fi = flat.index(a.name)
                        plan.append((0, fi) if fi < n0 else (1, fi - n0))
                    if {s for s, _ in plan} == {0, 1}:
                        guard_node = expr.TRUE
                        for c in rest:
                            guard_node = c if guard_node is expr.TRUE else expr.Binary("and", guard_node, c)
                        prefilter = (net.functions[head.func], tuple(plan))
            wanted = expr.free_vars(guard_node) | expr.free_vars(t.rate)
            used = [v for v in flat if v in wanted]
            unames = {v: f"_u{i}" for i, v in enumerate(used)}
            guard_fn = _compile_expr(
                guard_node, [unames[v] for v in used], unames, net.constants, net.functions
            )
            rate_fn = _compile_expr(
                t.rate, [unames[v] for v in used], unames, net.constants, net.functions
            )
            out_names, out_params = anames, [anames[v] for v in flat]
            slot_used = tuple(
                tuple(i for i, v in enumerate(pat) if v in wanted) for pat in patterns
            )
            allnames = list(flat)
        outs = []
        for arc in t.outputs:
            place = net.place(arc.place)
            fn = _compile_expr(arc.expr, out_params, out_names, net.constants, net.functions)
            outs.append((arc.place, place.is_dot, place.domain, fn))
    except _Uncompilable:
        return None
    binding_names = tuple((v, allnames.index(v)) for v in sorted(allnames))
    dot_bag: Counter = Counter()
    for arc in dot_arcs(net, t):
        dot_bag[arc.place] += arc.count
    dot_demand = tuple(sorted(dot_bag.items()))
    return CompiledTransition(
        t.name, patterns, slot_used, guard_fn, rate_fn, tuple(outs), binding_names,
        dot_demand, free_plan, prefilter,
    )


def _support_products(net: Net, t: TransitionDef, marking: Marking) -> Iterable[tuple]:
    """Cartesian product of the distinct colours present for each coloured
    input arc."""
    supports = []
    for arc in coloured_arcs(net, t):
        bag = marking.tokens(arc.place)
        if not bag:
            return
        supports.append(sorted(bag, key=repr))
    if not supports:
        yield ()
        return
    idx = [0] * len(supports)
    while True:
        yield tuple(s[i] for s, i in zip(supports, idx))
        j = len(idx) - 1
        while j >= 0:
            idx[j] += 1
            if idx[j] < len(supports[j]):
                break
            idx[j] = 0
            j -= 1
        if j < 0:
            return


def _available(marking: Marking, demands: tuple[tuple[str, Any, int], ...]) -> bool:
    return all(marking.count_of(pl, val) >= k for pl, val, k in demands)


def transition_firings(net: Net, t: TransitionDef, marking: Marking) -> list[EnabledFiring]:
    for arc in dot_arcs(net, t):
        if marking.count(arc.place) < arc.count:
            return []
    out = []
    for chosen in _support_products(net, t, marking):
        for rf in resolved_firings(net, t, chosen):
            if _available(marking, rf.demands):
                out.append(EnabledFiring(t.name, rf.binding, rf.rate, rf.demands, rf.adds))
    return out


def enabled_firings(net: Net, marking: Marking) -> list[EnabledFiring]:
    """Every enabled (transition, binding) race entry, sorted by transition
    name then binding."""
    out: list[EnabledFiring] = []
    for t in net.transitions:
        out.extend(transition_firings(net, t, marking))
    out.sort(key=lambda f: (f.transition, f.binding))
    return out


def fire(net: Net, marking: Marking, firing: EnabledFiring) -> Marking:
    """Apply a firing, returning the successor marking."""
    if not _available(marking, firing.demands):
        raise NetError(f"firing {firing.transition}{dict(firing.binding)} is not enabled")
    new = marking.copy()
    for pl, val, k in firing.demands:
        new.remove(pl, val, k)
    for pl, val, k in firing.adds:
        new.add(pl, val, k)
    return new


def total_rate(firings: Iterable[EnabledFiring]) -> float:
    return float(sum(f.rate for f in firings))


# ---------------------------------------------------------------------------
# Structural conflict detection.

@dataclass(frozen=True)
class ConflictSet:
    firings: tuple[EnabledFiring, ...]
    places: frozenset[str]
    players: frozenset[str]


def transition_players(t: TransitionDef) -> frozenset[str]:
    return frozenset(tag.split(":", 1)[1] for tag in t.tags if tag.startswith("player:"))


def detect_conflicts(net: Net, marking: Marking) -> list[ConflictSet]:
    """Group enabled firings that compete for the same tokens.

    Two firings conflict when their combined demand for some colour at
    some place exceeds what the marking holds; conflict sets are the
    connected components of that relation with at least two members.
    """
    firings = enabled_firings(net, marking)
    n = len(firings)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    contested: dict[int, set[str]] = {i: set() for i in range(n)}
    for i in range(n):
        di = dict(((pl, repr(val)), (pl, k)) for pl, val, k in firings[i].demands)
        for j in range(i + 1, n):
            hot = set()
            for pl, val, k in firings[j].demands:
                key = (pl, repr(val))
                if key in di:
                    pl_i, k_i = di[key]
                    if k + k_i > marking.count_of(pl, val):
                        hot.add(pl)
            if hot:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
                contested[i] |= hot
                contested[j] |= hot
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    out = []
    for members in groups.values():
        if len(members) < 2:
            continue
        fs = tuple(firings[i] for i in members)
        places = frozenset().union(*(contested[i] for i in members))
        players = frozenset().union(
            *(transition_players(net.transition(f.transition)) for f in fs)
        )
        out.append(ConflictSet(fs, places, players))
    out.sort(key=lambda c: (c.firings[0].transition, c.firings[0].binding))
    return out


# ---------------------------------------------------------------------------
# Unfolding to a basic (uncoloured) net.

@dataclass
class UnfoldResult:
    net: Net
    places: dict[tuple[str, Any], str]  # (coloured place, colour) -> basic place
    fundamentals: dict[tuple[str, tuple], str]  # (transition, binding) -> basic transition


def _basic_place_name(place: str, value: Any) -> str:
    if value == DOT:
        return place
    if isinstance(value, tuple):
        return f"{place}({', '.join(str(v) for v in value)})"
    return f"{place}({value})"


def _fundamental_name(tname: str, binding: tuple[tuple[str, Any], ...]) -> str:
    inner = ",".join(f"{k}={v}" for k, v in binding)
    return f"{tname}[{inner}]"


def unfold(net: Net, limit: int | None = None) -> UnfoldResult:
    """Expand a coloured net into an equivalent basic net: one place per
    (place, colour) pair, one transition per guard-satisfying binding."""
    lim = state_limit(limit)
    place_map: dict[tuple[str, Any], str] = {}
    basic_places: list[Place] = []
    total = 0
    for p in net.places:
        total += p.domain.size()
        if total > lim:
            raise NetError(
                f"unfolded place count exceeds the state limit of {lim} "
                f"(raise it via {STATE_LIMIT_ENV} or limit=)"
            )
        for value in p.domain.values():
            value = norm_value(value)
            name = _basic_place_name(p.name, value)
            place_map[(p.name, value)] = name
            basic_places.append(Place(name, DotDomain()))
    fundamentals: dict[tuple[str, tuple], str] = {}
    basic_transitions: list[TransitionDef] = []
    for t in net.transitions:
        carcs = coloured_arcs(net, t)
        combos = 1
        for arc in carcs:
            combos *= net.place(arc.place).domain.size()
        if combos > lim:
            raise NetError(
                f"transition {t.name!r} has {combos} colour combinations, over the "
                f"state limit of {lim} (raise it via {STATE_LIMIT_ENV} or limit=)"
            )
        budget = [0]
        doms = [net.place(a.place).domain for a in carcs]

        def rec(prefix: tuple) -> None:
            if len(prefix) == len(doms):
                budget[0] += 1
                if budget[0] > lim:
                    raise NetError(
                        f"unfolding {t.name!r} exceeded the state limit of {lim} "
                        f"(raise it via {STATE_LIMIT_ENV} or limit=)"
                    )
                for rf in resolved_firings(net, t, prefix, limit=lim):
                    key = (t.name, rf.binding)
                    if key in fundamentals:
                        continue
                    name = _fundamental_name(t.name, rf.binding)
                    fundamentals[key] = name
                    inputs = tuple(
                        InputArc(place_map[(pl, val)], None, k) for pl, val, k in rf.demands
                    )
                    outputs = tuple(
                        OutputArc(place_map[(pl, val)], expr.Const(k)) for pl, val, k in rf.adds
                    )
                    basic_transitions.append(
                        TransitionDef(
                            name=name,
                            inputs=inputs,
                            outputs=outputs,
                            guard=expr.TRUE,
                            rate=expr.Const(rf.rate),
                            tags=t.tags,
                        )
                    )
                return
            for value in doms[len(prefix)].values():
                rec(prefix + (norm_value(value),))

        rec(())
    basic = Net(
        name=f"{net.name}_unfolded",
        places=tuple(basic_places),
        transitions=tuple(basic_transitions),
        constants={},
        functions={},
        spatial=net.spatial,
    )
    basic.validate()
    return UnfoldResult(basic, place_map, fundamentals)


def unfolded_marking(net: Net, marking: Marking, uf: UnfoldResult) -> Marking:
    out = Marking()
    for place in marking.places():
        for value, k in marking.tokens(place).items():
            try:
                basic = uf.places[(place, value)]
            except KeyError:
                raise NetError(f"token {value!r} at {place!r} is outside the unfolded domains") from None
            out.add(basic, DOT, k)
    return out


# ---------------------------------------------------------------------------
# Reachability and CTMC export.

@dataclass
class ReachGraph:
    states: list[Marking]
    index: dict[tuple, int]
    edges: list[tuple[int, int, str, tuple, float]]  # (src, dst, transition, binding, rate)
    initial: int = 0

    @property
    def n(self) -> int:
        return len(self.states)


def reachability(net: Net, init: Marking, limit: int | None = None) -> ReachGraph:
    """Breadth-first state space exploration from ``init``."""
    lim = state_limit(limit)
    init.validate(net)
    start = init.copy()
    states = [start]
    index = {start.key(): 0}
    edges: list[tuple[int, int, str, tuple, float]] = []
    queue: deque[int] = deque([0])
    while queue:
        i = queue.popleft()
        m = states[i]
        for f in enabled_firings(net, m):
            m2 = fire(net, m, f)
            key = m2.key()
            j = index.get(key)
            if j is None:
                if len(states) >= lim:
                    raise NetError(
                        f"reachable state space exceeds the limit of {lim} states "
                        f"with {len(queue) + 1} states still unexplored "
                        f"(raise it via {STATE_LIMIT_ENV} or limit=)"
                    )
                j = len(states)
                index[key] = j
                states.append(m2)
                queue.append(j)
            edges.append((i, j, f.transition, f.binding, f.rate))
    return ReachGraph(states, index, edges)


@dataclass
class Ctmc:
    """Sparse rate matrix with state labels.  Self-loop edges are dropped:
    a firing that does not change the marking is invisible in continuous
    time."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    exit: np.ndarray  # total off-diagonal rate per state
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    initial: int = 0


def to_ctmc(
    graph: ReachGraph,
    labels: Mapping[str, Callable[[Marking], bool]] | None = None,
) -> Ctmc:
    merged: dict[tuple[int, int], float] = {}
    for src, dst, _t, _b, rate in graph.edges:
        if src == dst:
            continue
        merged[(src, dst)] = merged.get((src, dst), 0.0) + rate
    n = graph.n
    if merged:
        rows = np.array([k[0] for k in merged], dtype=np.int64)
        cols = np.array([k[1] for k in merged], dtype=np.int64)
        vals = np.array(list(merged.values()), dtype=np.float64)
    else:
        rows = np.zeros(0, dtype=np.int64)
        cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0, dtype=np.float64)
    exit = np.zeros(n, dtype=np.float64)
    np.add.at(exit, rows, vals)
    lab = {}
    if labels:
        for name, pred in labels.items():
            lab[name] = np.array([bool(pred(m)) for m in graph.states], dtype=bool)
    return Ctmc(n, rows, cols, vals, exit, lab, graph.initial)


def write_ctmc(ctmc: Ctmc, sta_path: str, tra_path: str) -> None:
    """Write the state list (index and labels) and the transition list
    (row, column, rate) as whitespace-separated text files."""
    names = sorted(ctmc.labels)
    with open(sta_path, "w", encoding="utf-8") as fh:
        fh.write("state " + " ".join(names) + "\n" if names else "state\n")
        for i in range(ctmc.n):
            bits = " ".join(str(int(ctmc.labels[name][i])) for name in names)
            fh.write(f"{i} {bits}".rstrip() + "\n")
    order = np.lexsort((ctmc.cols, ctmc.rows))
    with open(tra_path, "w", encoding="utf-8") as fh:
        fh.write(f"{ctmc.n} {len(ctmc.vals)}\n")
        for k in order:
            fh.write(f"{ctmc.rows[k]} {ctmc.cols[k]} {ctmc.vals[k]!r}\n")


def to_dot(graph: ReachGraph, max_states: int | None = None) -> str:
    """Graphviz rendering of a reachability graph."""
    n = graph.n if max_states is None else min(graph.n, max_states)
    lines = ["digraph reach {", "  rankdir=LR;"]
    for i in range(n):
        shape = "doublecircle" if i == graph.initial else "circle"
        label = repr(graph.states[i]).replace('"', "'")
        lines.append(f'  s{i} [shape={shape}, label="{label}"];')
    for src, dst, t, _b, rate in graph.edges:
        if src < n and dst < n:
            lines.append(f'  s{src} -> s{dst} [label="{t} ({rate:g})"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def unfolding_isomorphic(net: Net, init: Marking, limit: int | None = None) -> bool:
    """Check that the reachability graph of the coloured net and of its
    unfolding coincide: same state count, and identical edge multisets
    under the marking correspondence, matching rates exactly."""
    graph = reachability(net, init, limit)
    uf = unfold(net, limit)
    basic_init = unfolded_marking(net, init, uf)
    basic_graph = reachability(uf.net, basic_init, limit)
    if graph.n != basic_graph.n:
        return False
    phi: list[int] = []
    for m in graph.states:
        key = unfolded_marking(net, m, uf).key()
        j = basic_graph.index.get(key)
        if j is None:
            return False
        phi.append(j)
    if len(set(phi)) != graph.n:
        return False
    coloured = Counter()
    for src, dst, t, binding, rate in graph.edges:
        name = uf.fundamentals.get((t, binding))
        if name is None:
            return False
        coloured[(phi[src], phi[dst], name, rate)] += 1
    basic = Counter()
    for src, dst, t, _b, rate in basic_graph.edges:
        basic[(src, dst, t, rate)] += 1
    return coloured == basic
