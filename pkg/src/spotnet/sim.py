"""Stochastic simulation of coloured nets.

The engine keeps the enabled race entries incrementally instead of
re-enumerating bindings after every firing.  Colours are interned to
integers and each transition gets a cache strategy by shape:

- no coloured inputs: a constant firing list, gated on dot-place counts;
- one coloured input arc: firings per colour, cached the first time the
  colour is seen;
- two coloured arcs on one place: firings per ordered colour pair;
- anything else: full recompute via the reference semantics whenever an
  involved place changes.

Every cached firing carries the same binding, rate, demands and additions
the reference enumeration would produce; audit mode cross-checks the live
race set against ``semantics.enabled_firings`` after every event.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import struct
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import semantics
from .errors import ExprError, SimError
from .net import DOT, Marking, Net, norm_value
from .errors import NetError

PAIR_SHIFT = 20
PAIR_MASK = (1 << PAIR_SHIFT) - 1

# Successful pair firings are cached per ordered colour pair; past this
# many entries the cache is rebuilt from the live pairs so long batches
# cannot grow it without bound.
PAIR_CACHE_CAP = 1 << 17

# Known-infeasible colour pairs and guard outcomes are memoized too; these
# sets are simply dropped when they grow past their caps (re-warming is a
# dict probe plus one guard evaluation per entry).
FAIL_CACHE_CAP = 1 << 20
GUARD_CACHE_CAP = 1 << 19
OCACHE_CAP = 1 << 17
RAND_BLOCK = 4096

# Distinct projections per side a pair prefilter matrix may hold (16MB at
# worst); projections past the cap are evaluated per probe instead.
PF_ID_CAP = 1 << 12

# How many events may pass between exact recomputations of the running
# rate total (guards against float drift from incremental updates).
TOTAL_REFRESH = 4096


@dataclass(slots=True)
class TraceEvent:
    time: float
    transition: str
    binding: tuple
    annotations: tuple = ()


@dataclass
class Trace:
    net_name: str
    seed: int
    horizon: float
    events: list[TraceEvent]
    n_events: int
    final_time: float
    stopped: str  # "horizon" | "deadlock" | "callback"
    initial_marking: Marking
    final_marking: Marking


class EngineView:
    """Read-only O(1) window onto the engine's current marking."""

    __slots__ = ("_e",)

    def __init__(self, engine: "Engine"):
        self._e = engine

    def count(self, place: str) -> int:
        return self._e._totals[self._e._pindex[place]]

    def counter(self, place: str) -> Callable[[], int]:
        """Zero-argument reader for one place's token count, cheaper than
        repeated count() calls from per-event hooks."""
        totals = self._e._totals
        pi = self._e._pindex[place]
        return lambda: totals[pi]

    def count_of(self, place: str, value: Any) -> int:
        e = self._e
        ci = e._intern.get(norm_value(value))
        if ci is None:
            return 0
        return e._counts[e._pindex[place]].get(ci, 0)

    def tokens(self, place: str) -> Counter:
        e = self._e
        bag = e._counts[e._pindex[place]]
        return Counter({e._values[ci]: n for ci, n in bag.items()})

    def marking(self) -> Marking:
        return self._e._decode_marking()


class _Spec:
    __slots__ = (
        "t", "kind", "pidx", "gates", "active", "const",
        "cache1", "pair_cache", "pair_fail", "live", "live_pairs", "involved",
        "ct", "gcache", "proj", "outs", "crem", "dot_rem", "ocache",
        "pf", "pf_ids", "pf_keys", "pf_cols", "pf_mat", "pf_stride", "pf_rows",
    )

    def __init__(self, t, kind, pidx, gates, involved):
        self.t = t
        self.kind = kind
        self.pidx = pidx  # the coloured arc place for kinds 1 and 2
        self.gates = gates  # ((place index, needed count), ...)
        self.active = False
        self.const = None  # kind 0 firing list, filled lazily
        self.cache1: dict[int, tuple] = {}
        self.pair_cache: dict[int, tuple] = {}
        self.pair_fail: set[int] = set()  # colour pairs known to yield nothing
        self.live: set[int] = set()
        self.live_pairs: set[int] = set()
        self.involved = involved  # place indices that force a kind-3 recompute
        self.ct = None  # CompiledTransition fast path, when applicable
        self.gcache: dict[tuple, float] = {}  # guard+rate by projected colour parts
        self.proj: tuple[list, ...] = ()  # per arc slot: colour int -> projected parts
        self.outs = ()  # (place index, is_dot, domain, fn) per output arc
        self.crem = ()  # place index per coloured input arc
        self.dot_rem = ()  # ((place index, dot colour int, count), ...)
        self.ocache: tuple[dict, ...] = ()  # per output arc: raw value -> colour int, -1 off-domain
        # pair prefilter: truth of the guard's leading function call by
        # projected argument ids, kept in a flat byte matrix (0 unknown,
        # 1 truthy, 2 falsy)
        self.pf = None  # (function, ((arc, part index) per argument, ...))
        self.pf_ids: tuple[dict, dict] = ({}, {})  # side projection -> id
        self.pf_keys: tuple[list, list] = ([], [])  # id -> side projection
        self.pf_cols: tuple[list, list] = ([], [])  # colour int -> id
        self.pf_mat = bytearray()
        self.pf_stride = 0  # allocated columns
        self.pf_rows = 0


class Engine:
    """Reusable simulator for one net and initial marking.

    Binding caches persist across runs; ``run`` resets the marking and
    draws a fresh random stream from the seed.
    """

    def __init__(self, net: Net, init: Marking, *, audit: bool = False):
        net.validate()
        init.validate(net)
        self.net = net
        self.audit = audit
        self._init_marking = init.copy()
        self._pindex = {p.name: i for i, p in enumerate(net.places)}
        self._intern: dict[Any, int] = {}
        self._values: list[Any] = []
        self._counts: list[dict[int, int]] = [dict() for _ in net.places]
        self._totals: list[int] = [0] * len(net.places)
        self._avail: dict[int, tuple] = {}
        self._total = 0.0
        self._next_fid = 0
        self._dot_ci = self._int(DOT)
        self._view = EngineView(self)
        self._specs: list[_Spec] = []
        self._colour_watch: list[list[_Spec]] = [[] for _ in net.places]
        self._gate_watch: list[list[_Spec]] = [[] for _ in net.places]
        for t in net.transitions:
            carcs = semantics.coloured_arcs(net, t)
            darcs = semantics.dot_arcs(net, t)
            gates = tuple((self._pindex[a.place], a.count) for a in darcs)
            if not carcs:
                spec = _Spec(t, 0, -1, gates, ())
            elif len(carcs) == 1:
                spec = _Spec(t, 1, self._pindex[carcs[0].place], gates, ())
            elif len(carcs) == 2 and carcs[0].place == carcs[1].place:
                spec = _Spec(t, 2, self._pindex[carcs[0].place], gates, ())
            else:
                involved = tuple(sorted({self._pindex[a.place] for a in t.inputs}))
                spec = _Spec(t, 3, -1, (), involved)
            if spec.kind in (1, 2):
                ct = semantics.compile_transition(net, t)
                if ct is not None and (spec.kind == 1 or ct.free_plan is None):
                    spec.ct = ct
                    if spec.kind == 2 and ct.prefilter is not None:
                        spec.pf = ct.prefilter
                    spec.proj = tuple([] for _ in ct.patterns)
                    spec.outs = tuple(
                        (self._pindex[pl], is_dot, dom, fn) for pl, is_dot, dom, fn in ct.outs
                    )
                    spec.ocache = tuple({} for _ in ct.outs)
                    spec.crem = tuple(self._pindex[a.place] for a in carcs)
                    spec.dot_rem = tuple(
                        (self._pindex[pl], self._dot_ci, k) for pl, k in ct.dot_demand
                    )
            self._specs.append(spec)
            if spec.kind in (1, 2):
                self._colour_watch[spec.pidx].append(spec)
                for pi, _need in gates:
                    self._gate_watch[pi].append(spec)
            elif spec.kind == 0:
                for pi, _need in gates:
                    self._gate_watch[pi].append(spec)
            else:
                for pi in spec.involved:
                    self._colour_watch[pi].append(spec)
        self._reset()

    # -- interning and encoding -------------------------------------------

    def _int(self, value: Any) -> int:
        ci = self._intern.get(value)
        if ci is None:
            ci = len(self._values)
            if ci >= 1 << PAIR_SHIFT:
                raise SimError("too many distinct colours for the pair cache")
            self._intern[value] = ci
            self._values.append(value)
        return ci

    def _encode(self, tname: str, rf: semantics.ResolvedFiring) -> tuple:
        fid = self._next_fid
        self._next_fid = fid + 1
        rem = tuple((self._pindex[pl], self._int(v), k) for pl, v, k in rf.demands)
        add = tuple((self._pindex[pl], self._int(v), k) for pl, v, k in rf.adds)
        return (fid, rf.rate, rem, add, tname, rf.binding)

    def _fill0(self, spec: _Spec) -> tuple:
        cfs = tuple(
            self._encode(spec.t.name, rf)
            for rf in semantics.resolved_firings(self.net, spec.t, ())
        )
        spec.const = cfs
        return cfs

    def _proj(self, spec: _Spec, slot: int, ci: int) -> tuple:
        plist = spec.proj[slot]
        if len(plist) <= ci:
            plist.extend([None] * (ci + 1 - len(plist)))
        uv = plist[ci]
        if uv is None:
            value = self._values[ci]
            parts = value if isinstance(value, tuple) else (value,)
            if len(parts) != len(spec.ct.patterns[slot]):
                raise NetError(
                    f"{spec.t.name}: token {value!r} does not fit pattern of arc {slot}"
                )
            uv = tuple(parts[i] for i in spec.ct.slot_used[slot])
            plist[ci] = uv
        return uv

    def _pf_colid(self, spec: _Spec, side: int, ci: int) -> int:
        """Prefilter projection id for a colour on one arc side (-2 when
        the id space is exhausted and the call must be evaluated raw)."""
        value = self._values[ci]
        parts = value if isinstance(value, tuple) else (value,)
        if len(parts) != len(spec.ct.patterns[side]):
            raise NetError(
                f"{spec.t.name}: token {value!r} does not fit pattern of arc {side}"
            )
        plan = spec.pf[1]
        key = tuple(parts[k] for s, k in plan if s == side)
        ids = spec.pf_ids[side]
        i = ids.get(key)
        if i is None:
            if len(ids) >= PF_ID_CAP:
                i = -2
            else:
                i = len(ids)
                ids[key] = i
                spec.pf_keys[side].append(key)
                self._pf_grow(spec, side, i + 1)
        cols = spec.pf_cols[side]
        if len(cols) <= ci:
            cols.extend([-1] * (ci + 1 - len(cols)))
        cols[ci] = i
        return i

    def _pf_grow(self, spec: _Spec, side: int, need: int) -> None:
        if side == 0:
            if need > spec.pf_rows:
                new = min(max(64, spec.pf_rows * 2, need), PF_ID_CAP)
                spec.pf_mat.extend(bytes((new - spec.pf_rows) * spec.pf_stride))
                spec.pf_rows = new
        elif need > spec.pf_stride:
            new = min(max(64, spec.pf_stride * 2, need), PF_ID_CAP)
            old = spec.pf_mat
            stride = spec.pf_stride
            mat = bytearray(spec.pf_rows * new)
            for r in range(spec.pf_rows):
                mat[r * new : r * new + stride] = old[r * stride : (r + 1) * stride]
            spec.pf_mat = mat
            spec.pf_stride = new

    def _pf_call(self, spec: _Spec, k0: tuple, k1: tuple):
        fn, plan = spec.pf
        it0 = iter(k0)
        it1 = iter(k1)
        args = [next(it0) if s == 0 else next(it1) for s, _ in plan]
        try:
            return fn(*args)
        except TypeError as e:
            raise ExprError(f"{spec.t.name}: guard evaluation failed: {e}") from None

    def _pf_ok(self, spec: _Spec, a: int, b: int) -> bool:
        cols0, cols1 = spec.pf_cols
        i = cols0[a] if a < len(cols0) else -1
        if i == -1:
            i = self._pf_colid(spec, 0, a)
        j = cols1[b] if b < len(cols1) else -1
        if j == -1:
            j = self._pf_colid(spec, 1, b)
        if i < 0 or j < 0:
            k0 = spec.pf_keys[0][i] if i >= 0 else self._pf_rawkey(spec, 0, a)
            k1 = spec.pf_keys[1][j] if j >= 0 else self._pf_rawkey(spec, 1, b)
            return bool(self._pf_call(spec, k0, k1))
        off = i * spec.pf_stride + j
        v = spec.pf_mat[off]
        if v == 0:
            v = 1 if self._pf_call(spec, spec.pf_keys[0][i], spec.pf_keys[1][j]) else 2
            spec.pf_mat[off] = v
        return v == 1

    def _pf_rawkey(self, spec: _Spec, side: int, ci: int) -> tuple:
        value = self._values[ci]
        parts = value if isinstance(value, tuple) else (value,)
        return tuple(parts[k] for s, k in spec.pf[1] if s == side)

    def _guard_rate(self, spec: _Spec, uv: tuple) -> float:
        """Guard outcome and rate for the projected colour parts: 0.0 when
        the guard does not hold, the (positive) rate otherwise."""
        ct = spec.ct
        try:
            ok = ct.guard_fn(*uv)
        except TypeError as e:
            raise ExprError(f"{spec.t.name}: guard evaluation failed: {e}") from None
        if ok is not True:
            rate = 0.0
        else:
            try:
                r = ct.rate_fn(*uv)
            except TypeError as e:
                raise ExprError(f"{spec.t.name}: rate evaluation failed: {e}") from None
            if isinstance(r, bool) or not isinstance(r, (int, float)):
                raise NetError(f"{spec.t.name}: rate is not a number")
            rate = float(r)
            if not math.isfinite(rate) or rate <= 0:
                raise NetError(f"{spec.t.name}: rate {rate} must be positive and finite")
        if len(spec.gcache) >= GUARD_CACHE_CAP:
            spec.gcache.clear()
        spec.gcache[uv] = rate
        return rate

    def _out_ci(self, spec: _Spec, oi: int, dom, val) -> int:
        """Intern an output value after normalisation and domain check;
        -1 marks a value outside its domain.  Cached per output arc."""
        cache = spec.ocache[oi]
        try:
            co = cache.get(val)
        except TypeError:
            # unhashable output value: no caching, mirror the slow path
            nval = norm_value(val)
            return self._int(nval) if nval in dom else -1
        if co is None:
            nval = norm_value(val)
            co = self._int(nval) if nval in dom else -1
            if len(cache) >= OCACHE_CAP:
                cache.clear()
            cache[val] = co
        return co

    def _make_cf(self, spec: _Spec, rate: float, cis: tuple) -> tuple:
        """Build the single firing for fully-bound colours, or () when an
        output leaves its domain (mirrors the reference enumeration)."""
        ct = spec.ct
        values = self._values
        args: list = []
        for ci in cis:
            v = values[ci]
            if type(v) is tuple:
                args.extend(v)
            else:
                args.append(v)
        adds: list = []
        for oi, (pi, is_dot, dom, fn) in enumerate(spec.outs):
            try:
                val = fn(*args)
            except TypeError as e:
                raise ExprError(f"{spec.t.name}: output evaluation failed: {e}") from None
            if is_dot:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise NetError(f"{spec.t.name}: output count must be an integer")
                if val < 0:
                    return ()
                if val:
                    co = self._dot_ci
                else:
                    continue
            else:
                co = self._out_ci(spec, oi, dom, val)
                if co < 0:
                    return ()
                val = 1
            for e in adds:
                if e[0] == pi and e[1] == co:
                    e[2] += val
                    break
            else:
                adds.append([pi, co, val])
        crem = spec.crem
        if len(cis) == 2:
            a, b = cis
            if a == b and crem[0] == crem[1]:
                rem = ((crem[0], a, 2),) + spec.dot_rem
            else:
                rem = ((crem[0], a, 1), (crem[1], b, 1)) + spec.dot_rem
        else:
            rem = tuple((p, c, 1) for p, c in zip(crem, cis)) + spec.dot_rem
        add = tuple((e[0], e[1], e[2]) for e in adds)
        binding = tuple((name, args[i]) for name, i in ct.binding_names)
        fid = self._next_fid
        self._next_fid = fid + 1
        return ((fid, rate, rem, add, spec.t.name, binding),)

    def _fill1_free(self, spec: _Spec, ci: int) -> tuple:
        """Firings for one colour of a transition whose free variables the
        guard pins: try each branch's candidate values, keep those the full
        guard accepts (one firing per distinct assignment)."""
        ct = spec.ct
        value = self._values[ci]
        parts = value if isinstance(value, tuple) else (value,)
        if len(parts) != len(ct.patterns[0]):
            raise NetError(f"{spec.t.name}: token {value!r} does not fit the arc pattern")
        args = list(parts)
        free_doms, branch_fns = ct.free_plan
        cands: dict[tuple, None] = {}
        for fns in branch_fns:
            try:
                vals = tuple(norm_value(fn(*args)) for fn in fns)
            except TypeError as e:
                raise ExprError(f"{spec.t.name}: guard evaluation failed: {e}") from None
            if vals not in cands and all(v in dom for v, dom in zip(vals, free_doms)):
                cands[vals] = None
        cfs = []
        tname = spec.t.name
        for vals in cands:
            ext = args + list(vals)
            try:
                ok = ct.guard_fn(*ext)
            except TypeError as e:
                raise ExprError(f"{tname}: guard evaluation failed: {e}") from None
            if ok is not True:
                continue
            try:
                r = ct.rate_fn(*ext)
            except TypeError as e:
                raise ExprError(f"{tname}: rate evaluation failed: {e}") from None
            if isinstance(r, bool) or not isinstance(r, (int, float)):
                raise NetError(f"{tname}: rate is not a number")
            rate = float(r)
            if not math.isfinite(rate) or rate <= 0:
                raise NetError(f"{tname}: rate {rate} must be positive and finite")
            adds: list = []
            valid = True
            for oi, (pi, is_dot, dom, fn) in enumerate(spec.outs):
                try:
                    out = fn(*ext)
                except TypeError as e:
                    raise ExprError(f"{tname}: output evaluation failed: {e}") from None
                if is_dot:
                    if isinstance(out, bool) or not isinstance(out, int):
                        raise NetError(f"{tname}: output count must be an integer")
                    if out < 0:
                        valid = False
                        break
                    if not out:
                        continue
                    cj = self._dot_ci
                else:
                    cj = self._out_ci(spec, oi, dom, out)
                    if cj < 0:
                        valid = False
                        break
                    out = 1
                for e in adds:
                    if e[0] == pi and e[1] == cj:
                        e[2] += out
                        break
                else:
                    adds.append([pi, cj, out])
            if not valid:
                continue
            rem = ((spec.crem[0], ci, 1),) + spec.dot_rem
            add = tuple((e[0], e[1], e[2]) for e in adds)
            binding = tuple((name, ext[i]) for name, i in ct.binding_names)
            fid = self._next_fid
            self._next_fid = fid + 1
            cfs.append((fid, rate, rem, add, tname, binding))
        return tuple(cfs)

    def _fill1(self, spec: _Spec, ci: int) -> tuple:
        if spec.ct is None:
            cfs = tuple(
                self._encode(spec.t.name, rf)
                for rf in semantics.resolved_firings(self.net, spec.t, (self._values[ci],))
            )
        elif spec.ct.free_plan is not None:
            cfs = self._fill1_free(spec, ci)
        else:
            uv = self._proj(spec, 0, ci)
            rate = spec.gcache.get(uv)
            if rate is None:
                rate = self._guard_rate(spec, uv)
            cfs = () if rate == 0.0 else self._make_cf(spec, rate, (ci,))
        spec.cache1[ci] = cfs
        return cfs

    def _fill2(self, spec: _Spec, key: int, a: int, b: int) -> tuple:
        if spec.ct is None:
            cfs = tuple(
                self._encode(spec.t.name, rf)
                for rf in semantics.resolved_firings(
                    self.net, spec.t, (self._values[a], self._values[b])
                )
            )
        else:
            uv = self._proj(spec, 0, a) + self._proj(spec, 1, b)
            rate = spec.gcache.get(uv)
            if rate is None:
                rate = self._guard_rate(spec, uv)
            cfs = self._make_cf(spec, rate, (a, b)) if rate != 0.0 else ()
        if cfs:
            pair_cache = spec.pair_cache
            pair_cache[key] = cfs
            if len(pair_cache) > PAIR_CACHE_CAP:
                keep = spec.live_pairs
                spec.pair_cache = {
                    k: v for k, v in pair_cache.items() if k in keep or k == key
                }
        else:
            # infeasible pairs go in a flat set, dropped wholesale at the
            # cap; caching their empty tuples instead would grow without
            # bound across long batches
            fails = spec.pair_fail
            if len(fails) >= FAIL_CACHE_CAP:
                fails.clear()
            fails.add(key)
        return cfs

    # -- marking state -----------------------------------------------------

    def _reset(self) -> None:
        for bag in self._counts:
            bag.clear()
        for i in range(len(self._totals)):
            self._totals[i] = 0
        self._avail.clear()
        self._total = 0.0
        for place in self._init_marking.places():
            pi = self._pindex[place]
            bag = self._counts[pi]
            for value, k in self._init_marking.tokens(place).items():
                bag[self._int(value)] = k
                self._totals[pi] += k
        for spec in self._specs:
            spec.live.clear()
            spec.live_pairs.clear()
            if spec.kind == 3:
                spec.active = True
                self._recompute3(spec)
            else:
                spec.active = all(self._totals[pi] >= need for pi, need in spec.gates)
                if spec.active:
                    self._activate(spec)

    def _decode_marking(self) -> Marking:
        m = Marking()
        for pi, bag in enumerate(self._counts):
            if not bag:
                continue
            name = self.net.places[pi].name
            for ci, n in bag.items():
                m.add(name, self._values[ci], n)
        return m

    # -- cache maintenance -------------------------------------------------

    def _add_cfs(self, spec: _Spec, cfs: tuple) -> None:
        avail = self._avail
        live = spec.live
        total = self._total
        for cf in cfs:
            avail[cf[0]] = cf
            live.add(cf[0])
            total += cf[1]
        self._total = total

    def _remove_cfs(self, spec: _Spec, cfs: tuple) -> None:
        avail = self._avail
        live = spec.live
        total = self._total
        for cf in cfs:
            del avail[cf[0]]
            live.discard(cf[0])
            total -= cf[1]
        self._total = total

    def _activate(self, spec: _Spec) -> None:
        if spec.kind == 0:
            cfs = spec.const if spec.const is not None else self._fill0(spec)
            self._add_cfs(spec, cfs)
        elif spec.kind == 1:
            for ci in self._counts[spec.pidx]:
                cfs = spec.cache1.get(ci)
                if cfs is None:
                    cfs = self._fill1(spec, ci)
                self._add_cfs(spec, cfs)
        elif spec.kind == 2:
            bag = self._counts[spec.pidx]
            cols = list(bag)
            fails = spec.pair_fail
            pf = spec.pf
            for a in cols:
                for b in cols:
                    if a == b and bag[a] < 2:
                        continue
                    if pf is not None and not self._pf_ok(spec, a, b):
                        continue
                    key = a << PAIR_SHIFT | b
                    if key in fails:
                        continue
                    cfs = spec.pair_cache.get(key)
                    if cfs is None:
                        cfs = self._fill2(spec, key, a, b)
                    if cfs:
                        spec.live_pairs.add(key)
                        self._add_cfs(spec, cfs)
        else:
            self._recompute3(spec)

    def _deactivate(self, spec: _Spec) -> None:
        avail = self._avail
        total = self._total
        for fid in spec.live:
            total -= avail[fid][1]
            del avail[fid]
        self._total = total
        spec.live.clear()
        spec.live_pairs.clear()

    def _recompute3(self, spec: _Spec) -> None:
        avail = self._avail
        total = self._total
        for fid in spec.live:
            total -= avail[fid][1]
            del avail[fid]
        spec.live.clear()
        m = self._decode_marking()
        for f in semantics.transition_firings(self.net, spec.t, m):
            fid = self._next_fid
            self._next_fid = fid + 1
            rem = tuple((self._pindex[pl], self._int(v), k) for pl, v, k in f.demands)
            add = tuple((self._pindex[pl], self._int(v), k) for pl, v, k in f.adds)
            cf = (fid, f.rate, rem, add, f.transition, f.binding)
            avail[fid] = cf
            spec.live.add(fid)
            total += f.rate
        self._total = total

    def _upd2(self, spec: _Spec, ci: int, old: int, new: int) -> None:
        if not spec.active:
            return
        pairs = spec.live_pairs
        fails = spec.pair_fail
        cache = spec.pair_cache
        pf = spec.pf
        if old == 0 and new > 0:
            bag = self._counts[spec.pidx]
            if pf is not None:
                if len(bag) > 1:
                    self._upd2_pf(spec, ci, bag)
            else:
                for d in bag:
                    if d == ci:
                        continue
                    for key, a, b in (
                        (ci << PAIR_SHIFT | d, ci, d),
                        (d << PAIR_SHIFT | ci, d, ci),
                    ):
                        if key in fails:
                            continue
                        cfs = cache.get(key)
                        if cfs is None:
                            cfs = self._fill2(spec, key, a, b)
                        if cfs and key not in pairs:
                            pairs.add(key)
                            self._add_cfs(spec, cfs)
        elif old > 0 and new == 0:
            gone = [k for k in pairs if (k >> PAIR_SHIFT) == ci or (k & PAIR_MASK) == ci]
            for key in gone:
                pairs.discard(key)
                self._remove_cfs(spec, cache[key])
        selfkey = ci << PAIR_SHIFT | ci
        if new >= 2 and old < 2:
            if (pf is None or self._pf_ok(spec, ci, ci)) and selfkey not in fails:
                cfs = cache.get(selfkey)
                if cfs is None:
                    cfs = self._fill2(spec, selfkey, ci, ci)
                if cfs and selfkey not in pairs:
                    pairs.add(selfkey)
                    self._add_cfs(spec, cfs)
        elif old >= 2 and new < 2:
            if selfkey in pairs:
                pairs.discard(selfkey)
                self._remove_cfs(spec, cache[selfkey])

    def _upd2_pf(self, spec: _Spec, ci: int, bag: dict) -> None:
        """Pair enumeration for a newly present colour with the prefilter
        matrix probed inline; only screened pairs reach the caches."""
        pairs = spec.live_pairs
        fails = spec.pair_fail
        cache = spec.pair_cache
        cols0, cols1 = spec.pf_cols
        i_ci = cols0[ci] if ci < len(cols0) else -1
        if i_ci == -1:
            i_ci = self._pf_colid(spec, 0, ci)
        j_ci = cols1[ci] if ci < len(cols1) else -1
        if j_ci == -1:
            j_ci = self._pf_colid(spec, 1, ci)
        mat = spec.pf_mat
        stride = spec.pf_stride
        cold = i_ci < 0 or j_ci < 0  # projection ids past the cap
        row_ci = i_ci * stride
        n0 = len(cols0)
        n1 = len(cols1)
        for d in bag:
            if d == ci:
                continue
            if cold:
                v1 = 1 if self._pf_ok(spec, ci, d) else 2
            else:
                j_d = cols1[d] if d < n1 else -1
                v1 = mat[row_ci + j_d] if j_d >= 0 else 0
                if v1 == 0:
                    v1 = 1 if self._pf_ok(spec, ci, d) else 2
                    mat = spec.pf_mat
                    stride = spec.pf_stride
                    row_ci = i_ci * stride
                    n0 = len(cols0)
                    n1 = len(cols1)
            if v1 == 1:
                key = ci << PAIR_SHIFT | d
                if key not in fails:
                    cfs = cache.get(key)
                    if cfs is None:
                        cfs = self._fill2(spec, key, ci, d)
                    if cfs and key not in pairs:
                        pairs.add(key)
                        self._add_cfs(spec, cfs)
            if cold:
                v2 = 1 if self._pf_ok(spec, d, ci) else 2
            else:
                i_d = cols0[d] if d < n0 else -1
                v2 = mat[i_d * stride + j_ci] if i_d >= 0 else 0
                if v2 == 0:
                    v2 = 1 if self._pf_ok(spec, d, ci) else 2
                    mat = spec.pf_mat
                    stride = spec.pf_stride
                    row_ci = i_ci * stride
                    n0 = len(cols0)
                    n1 = len(cols1)
            if v2 == 1:
                key = d << PAIR_SHIFT | ci
                if key not in fails:
                    cfs = cache.get(key)
                    if cfs is None:
                        cfs = self._fill2(spec, key, d, ci)
                    if cfs and key not in pairs:
                        pairs.add(key)
                        self._add_cfs(spec, cfs)

    def _apply(self, cf: tuple) -> None:
        # demand and addition lists are tiny, so merge them by linear scan
        rems = cf[2]
        adds = cf[3]
        if len(rems) == 1 and len(adds) == 1:
            r = rems[0]
            a = adds[0]
            if r[0] == a[0] and r[1] == a[1]:
                delta = [(r[0], r[1], a[2] - r[2])]
            else:
                delta = [(r[0], r[1], -r[2]), (a[0], a[1], a[2])]
        else:
            acc: list[list[int]] = []
            for pi, ci, k in rems:
                for e in acc:
                    if e[0] == pi and e[1] == ci:
                        e[2] -= k
                        break
                else:
                    acc.append([pi, ci, -k])
            for pi, ci, k in adds:
                for e in acc:
                    if e[0] == pi and e[1] == ci:
                        e[2] += k
                        break
                else:
                    acc.append([pi, ci, k])
            delta = [(e[0], e[1], e[2]) for e in acc]
        tchanges: dict[int, int] = {}
        counts = self._counts
        totals = self._totals
        watch = self._colour_watch
        avail = self._avail
        dirty: list[_Spec] = []
        for pi, ci, dk in delta:
            if dk == 0:
                continue
            bag = counts[pi]
            old = bag.get(ci, 0)
            new = old + dk
            if new < 0:
                raise SimError("token count went negative; engine cache is inconsistent")
            if new:
                bag[ci] = new
            else:
                bag.pop(ci, None)
            tchanges[pi] = tchanges.get(pi, 0) + dk
            totals[pi] += dk
            for spec in watch[pi]:
                k = spec.kind
                if k == 1:
                    if spec.active:
                        if old == 0 and new > 0:
                            cfs = spec.cache1.get(ci)
                            if cfs is None:
                                cfs = self._fill1(spec, ci)
                            if cfs:
                                if len(cfs) == 1:
                                    c0 = cfs[0]
                                    avail[c0[0]] = c0
                                    spec.live.add(c0[0])
                                    self._total += c0[1]
                                else:
                                    self._add_cfs(spec, cfs)
                        elif old > 0 and new == 0:
                            cfs = spec.cache1.get(ci)
                            if cfs:
                                if len(cfs) == 1:
                                    c0 = cfs[0]
                                    del avail[c0[0]]
                                    spec.live.discard(c0[0])
                                    self._total -= c0[1]
                                else:
                                    self._remove_cfs(spec, cfs)
                elif k == 2:
                    self._upd2(spec, ci, old, new)
                elif spec not in dirty:
                    dirty.append(spec)
        for pi in tchanges:
            for spec in self._gate_watch[pi]:
                now = all(totals[g] >= need for g, need in spec.gates)
                if now != spec.active:
                    spec.active = now
                    if now:
                        self._activate(spec)
                    else:
                        self._deactivate(spec)
        for spec in dirty:
            self._recompute3(spec)

    def _audit_check(self, cf: tuple) -> None:
        m = self._decode_marking()
        ref = Counter(
            (f.transition, f.binding, f.rate)
            for f in semantics.enabled_firings(self.net, m)
        )
        got = Counter((c[4], c[5], c[1]) for c in self._avail.values())
        if ref != got:
            missing = ref - got
            extra = got - ref
            raise SimError(
                f"race-set audit failed after {cf[4]}{dict(cf[5])}: "
                f"missing={dict(missing)} extra={dict(extra)}"
            )

    # -- simulation --------------------------------------------------------

    def run(
        self,
        horizon: float,
        seed: int,
        *,
        collect: bool = True,
        on_event: Callable[[float, str, tuple], Any] | None = None,
        annotator: Any = None,
    ) -> Trace:
        """Simulate one trajectory until the horizon, a deadlock, or the
        callback returning False."""
        if seed < 0:
            raise SimError("seed must be non-negative")
        if horizon < 0:
            raise SimError("horizon must be non-negative")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        rand = rng.random
        # uniforms are drawn in blocks; a trailing unused remainder is the
        # same for every replay of a seed, so trajectories stay reproducible
        rbuf = rand(RAND_BLOCK).tolist()
        rpos = 0
        self._reset()
        avail = self._avail
        audit = self.audit
        t = 0.0
        events: list[TraceEvent] = []
        n = 0
        stopped = "horizon"
        if annotator is not None and hasattr(annotator, "begin"):
            annotator.begin(self._view)
        refresh = TOTAL_REFRESH
        while True:
            if not avail:
                stopped = "deadlock"
                break
            refresh -= 1
            if refresh < 0 or self._total <= 0.0:
                # periodic exact resum bounds drift from incremental updates
                total = 0.0
                for c in avail.values():
                    total += c[1]
                self._total = total
                refresh = TOTAL_REFRESH
            else:
                total = self._total
            if rpos >= RAND_BLOCK:
                rbuf = rand(RAND_BLOCK).tolist()
                rpos = 0
            u = rbuf[rpos]
            rpos += 1
            while u == 0.0:
                if rpos >= RAND_BLOCK:
                    rbuf = rand(RAND_BLOCK).tolist()
                    rpos = 0
                u = rbuf[rpos]
                rpos += 1
            t2 = t - math.log(1.0 - u) / total
            if t2 > horizon:
                t = horizon
                stopped = "horizon"
                break
            t = t2
            if rpos >= RAND_BLOCK:
                rbuf = rand(RAND_BLOCK).tolist()
                rpos = 0
            x = rbuf[rpos] * total
            rpos += 1
            acc = 0.0
            chosen = None
            for c in avail.values():
                acc += c[1]
                if x < acc:
                    chosen = c
                    break
            if chosen is None:
                chosen = c  # float drift pushed x past the last entry
            self._apply(chosen)
            n += 1
            if audit:
                self._audit_check(chosen)
            ann: tuple = ()
            if annotator is not None:
                ann = annotator.on_event(self._view, t, chosen[4], chosen[5]) or ()
            if collect:
                events.append(TraceEvent(t, chosen[4], chosen[5], ann))
            if on_event is not None and on_event(t, chosen[4], chosen[5]) is False:
                stopped = "callback"
                break
        if annotator is not None and hasattr(annotator, "finish"):
            annotator.finish(self._view, t, stopped)
        return Trace(
            net_name=self.net.name,
            seed=seed,
            horizon=horizon,
            events=events,
            n_events=n,
            final_time=t,
            stopped=stopped,
            initial_marking=self._init_marking.copy(),
            final_marking=self._decode_marking(),
        )


def simulate(
    net: Net,
    init: Marking,
    horizon: float,
    seed: int,
    *,
    collect: bool = True,
    on_event: Callable | None = None,
    annotator: Any = None,
    audit: bool = False,
) -> Trace:
    return Engine(net, init, audit=audit).run(
        horizon, seed, collect=collect, on_event=on_event, annotator=annotator
    )


# ---------------------------------------------------------------------------
# Batches.  Run r gets seed base_seed + r, so a batch is reproducible and
# independent of the worker count.

_WORKER: dict[str, Any] = {}


def _worker_init(net, init, audit, annotator_factory, reduce):
    _WORKER["engine"] = Engine(net, init, audit=audit)
    _WORKER["factory"] = annotator_factory
    _WORKER["reduce"] = reduce


def _worker_run(args):
    seed, horizon, collect = args
    factory = _WORKER["factory"]
    ann = factory() if factory is not None else None
    trace = _WORKER["engine"].run(horizon, seed, collect=collect, annotator=ann)
    reduce = _WORKER["reduce"]
    return trace if reduce is None else reduce(trace)


def run_many(
    net: Net,
    init: Marking,
    *,
    runs: int,
    horizon: float,
    base_seed: int = 0,
    jobs: int = 1,
    collect: bool = True,
    annotator_factory: Callable[[], Any] | None = None,
    audit: bool = False,
    reduce: Callable[[Trace], Any] | None = None,
) -> list:
    """Run ``runs`` seeded simulations.  With ``reduce`` each trace is mapped
    to a summary value right after its run and the trace is dropped, so large
    batches stay flat in memory; otherwise the traces themselves come back."""
    if runs < 1:
        raise SimError("runs must be >= 1")
    seeds = range(base_seed, base_seed + runs)
    if jobs <= 1:
        engine = Engine(net, init, audit=audit)
        out = []
        for s in seeds:
            ann = annotator_factory() if annotator_factory is not None else None
            trace = engine.run(horizon, s, collect=collect, annotator=ann)
            out.append(trace if reduce is None else reduce(trace))
        return out
    tasks = [(s, horizon, collect) for s in seeds]
    chunk = max(1, runs // (jobs * 4))
    with ProcessPoolExecutor(
        max_workers=jobs,
        initializer=_worker_init,
        initargs=(net, init, audit, annotator_factory, reduce),
    ) as ex:
        return list(ex.map(_worker_run, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# Parameter sweeps.

@dataclass
class SweepSpec:
    grid: dict[str, Sequence]
    runs: int
    horizon: float
    base_seed: int = 0
    metrics: tuple[str, ...] = ()


def sweep(
    builder: Callable[[dict], tuple],
    spec: SweepSpec,
    metric_fns: Mapping[str, Callable[[Trace], float]],
    *,
    jobs: int = 1,
) -> list[dict]:
    """Run the grid cell by cell and aggregate per-trace metrics.

    ``builder(cell)`` returns (net, init) or (net, init, annotator_factory).
    Cell j of the grid uses seeds base_seed + j*runs .. base_seed +
    (j+1)*runs - 1.  A failing cell contributes a row with an ``error``
    field instead of aborting the sweep; metric means skip NaN values.
    """
    for name in spec.metrics:
        if name not in metric_fns:
            raise SimError(f"unknown metric {name!r}")
    names = list(spec.grid)
    combos = list(itertools.product(*(spec.grid[n] for n in names)))
    if len(set(combos)) != len(combos):
        warnings.warn("sweep grid contains duplicate cells", stacklevel=2)
    rows: list[dict] = []
    for idx, combo in enumerate(combos):
        cell = dict(zip(names, combo))
        row: dict[str, Any] = dict(cell)
        row["runs"] = spec.runs
        base = spec.base_seed + idx * spec.runs
        try:
            built = builder(cell)
            if len(built) == 2:
                net, init = built
                factory = None
            else:
                net, init, factory = built
            traces = run_many(
                net,
                init,
                runs=spec.runs,
                horizon=spec.horizon,
                base_seed=base,
                jobs=jobs,
                collect=True,
                annotator_factory=factory,
            )
            for mname in spec.metrics:
                vals = np.array([metric_fns[mname](tr) for tr in traces], dtype=float)
                vals = vals[~np.isnan(vals)]
                row[mname] = float(vals.mean()) if vals.size else float("nan")
                row[f"{mname}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else float("nan")
        except Exception as e:  # noqa: BLE001 - cell isolation is the point
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Trace serialisation.

_TRACE_MAGIC = b"SPTR"
_TRACE_VERSION = 1


def _value_to_json(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_value_to_json(x) for x in v]
    return v


def _value_from_json(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_value_from_json(x) for x in v)
    return v


def _marking_to_json(m: Marking) -> dict:
    return {
        place: [[_value_to_json(v), k] for v, k in sorted(m.tokens(place).items(), key=lambda kv: repr(kv[0]))]
        for place in m.places()
    }


def _marking_from_json(doc: Mapping) -> Marking:
    m = Marking()
    for place, bag in doc.items():
        for v, k in bag:
            m.add(place, _value_from_json(v), k)
    return m


def _num_to_json(x: float) -> Any:
    if math.isinf(x):
        return "inf"
    return x


def _num_from_json(x: Any) -> float:
    if x == "inf":
        return math.inf
    return float(x)


def write_trace_csv(trace: Trace, path: str) -> None:
    meta = {
        "net_name": trace.net_name,
        "seed": trace.seed,
        "horizon": _num_to_json(trace.horizon),
        "final_time": trace.final_time,
        "stopped": trace.stopped,
        "n_events": trace.n_events,
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# spotnet-trace {_TRACE_VERSION}\n")
        fh.write(f"# meta {json.dumps(meta, sort_keys=True)}\n")
        fh.write(f"# initial {json.dumps(_marking_to_json(trace.initial_marking), sort_keys=True)}\n")
        fh.write(f"# final {json.dumps(_marking_to_json(trace.final_marking), sort_keys=True)}\n")
        w = csv.writer(fh)
        w.writerow(["time", "transition", "binding", "annotations"])
        for ev in trace.events:
            w.writerow(
                [
                    repr(ev.time),
                    ev.transition,
                    json.dumps(_value_to_json(ev.binding)),
                    json.dumps(_value_to_json(ev.annotations)),
                ]
            )


def read_trace_csv(path: str) -> Trace:
    headers: dict[str, Any] = {}
    events: list[TraceEvent] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# spotnet-trace"):
            raise SimError(f"{path}: not a trace file")
        version = int(first.rsplit(" ", 1)[1])
        if version != _TRACE_VERSION:
            raise SimError(f"{path}: unsupported trace version {version}")
        pos = fh.tell()
        line = fh.readline()
        while line.startswith("# "):
            kind, _, payload = line[2:].partition(" ")
            headers[kind] = json.loads(payload)
            pos = fh.tell()
            line = fh.readline()
        fh.seek(pos)
        reader = csv.reader(fh)
        next(reader)  # column header
        for row in reader:
            events.append(
                TraceEvent(
                    float(row[0]),
                    row[1],
                    _value_from_json(json.loads(row[2])),
                    _value_from_json(json.loads(row[3])),
                )
            )
    meta = headers["meta"]
    return Trace(
        net_name=meta["net_name"],
        seed=meta["seed"],
        horizon=_num_from_json(meta["horizon"]),
        events=events,
        n_events=meta["n_events"],
        final_time=meta["final_time"],
        stopped=meta["stopped"],
        initial_marking=_marking_from_json(headers["initial"]),
        final_marking=_marking_from_json(headers["final"]),
    )


def write_trace_bin(trace: Trace, path: str) -> None:
    tnames = sorted({ev.transition for ev in trace.events})
    tindex = {name: i for i, name in enumerate(tnames)}
    header = {
        "net_name": trace.net_name,
        "stopped": trace.stopped,
        "n_events": trace.n_events,
        "transitions": tnames,
        "initial": _marking_to_json(trace.initial_marking),
        "final": _marking_to_json(trace.final_marking),
        "recorded": len(trace.events),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHQddI", _TRACE_MAGIC, _TRACE_VERSION, trace.seed, trace.horizon, trace.final_time, len(hbytes)))
        fh.write(hbytes)
        for ev in trace.events:
            payload = json.dumps(
                [_value_to_json(ev.binding), _value_to_json(ev.annotations)]
            ).encode("utf-8")
            fh.write(struct.pack("<dHI", ev.time, tindex[ev.transition], len(payload)))
            fh.write(payload)


def read_trace_bin(path: str) -> Trace:
    fixed = struct.calcsize("<4sHQddI")
    with open(path, "rb") as fh:
        head = fh.read(fixed)
        if len(head) < fixed:
            raise SimError(f"{path}: truncated trace file")
        magic, version, seed, horizon, final_time, hlen = struct.unpack("<4sHQddI", head)
        if magic != _TRACE_MAGIC:
            raise SimError(f"{path}: not a binary trace file")
        if version != _TRACE_VERSION:
            raise SimError(f"{path}: unsupported trace version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tnames = header["transitions"]
        events = []
        evsize = struct.calcsize("<dHI")
        for _ in range(header["recorded"]):
            raw = fh.read(evsize)
            if len(raw) < evsize:
                raise SimError(f"{path}: truncated event record")
            time, ti, plen = struct.unpack("<dHI", raw)
            binding, annotations = json.loads(fh.read(plen).decode("utf-8"))
            events.append(
                TraceEvent(time, tnames[ti], _value_from_json(binding), _value_from_json(annotations))
            )
    return Trace(
        net_name=header["net_name"],
        seed=seed,
        horizon=horizon,
        events=events,
        n_events=header["n_events"],
        final_time=final_time,
        stopped=header["stopped"],
        initial_marking=_marking_from_json(header["initial"]),
        final_marking=_marking_from_json(header["final"]),
    )
