"""Spatio-temporal property checking.

Queries have the shape ``P>=0.2 [ F[t<=10] bubble(3) ]``: a probability
comparison (or ``P=?``) over one bounded path formula.  Path operators are
U (until), W (weak until), F (finally) and G (globally); the bound is
either elapsed time ``[t<=T]`` or a budget of spatial firings ``[s<=S]``,
optionally scoped to one tracked car with ``@car(N)``.  State formulas
combine token counts, per-car predicates, proximity bubbles and the
delivered fraction with boolean connectives.

Two checkers share the grammar: a statistical one over simulated
trajectories with a Wilson confidence interval, and an exact one over the
reachable continuous-time Markov chain (uniformization for time bounds, a
budget recursion over the embedded jump chain for spatial bounds).
"""
from __future__ import annotations

import math
import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from statistics import NormalDist
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import expr, semantics, sim
from .errors import FormulaError, ParseError
from .net import Marking, Net
from .semantics import Ctmc, ReachGraph

_CAR_VARS = ("f", "p", "t", "v", "m", "s")
_CMP_OPS = {"<", "<=", ">", ">=", "==", "!="}


# ---------------------------------------------------------------------------
# Syntax trees.

class SForm:
    """State formula."""


@dataclass(frozen=True)
class SBool(SForm):
    value: bool


@dataclass(frozen=True)
class SCount(SForm):
    place: str
    op: str
    value: float


@dataclass(frozen=True)
class SCar(SForm):
    """Some car token satisfies the predicate over (f, p, t, v, m[, s])."""

    pred: expr.Node


@dataclass(frozen=True)
class SBubble(SForm):
    k: int


@dataclass(frozen=True)
class SDeliveredFrac(SForm):
    op: str
    value: float


@dataclass(frozen=True)
class SNot(SForm):
    sub: SForm


@dataclass(frozen=True)
class SAnd(SForm):
    left: SForm
    right: SForm


@dataclass(frozen=True)
class SOr(SForm):
    left: SForm
    right: SForm


@dataclass(frozen=True)
class Bound:
    kind: str  # "t" | "s"
    limit: float
    car: int | None = None  # spatial budget scoped to one tracked car


class PathForm:
    pass


@dataclass(frozen=True)
class Until(PathForm):
    left: SForm
    right: SForm
    bound: Bound


@dataclass(frozen=True)
class WeakUntil(PathForm):
    left: SForm
    right: SForm
    bound: Bound


@dataclass(frozen=True)
class Finally(PathForm):
    sub: SForm
    bound: Bound


@dataclass(frozen=True)
class Globally(PathForm):
    sub: SForm
    bound: Bound


@dataclass(frozen=True)
class ProbQuery:
    op: str  # ">=" | ">" | "<=" | "<" | "=?"
    q: float | None
    path: PathForm


def _desugar(path: PathForm) -> tuple[SForm, SForm, bool, Bound]:
    """Reduce any path operator to (phi, psi, weak, bound) in the sense of
    phi U psi / phi W psi."""
    if isinstance(path, Until):
        return path.left, path.right, False, path.bound
    if isinstance(path, WeakUntil):
        return path.left, path.right, True, path.bound
    if isinstance(path, Finally):
        return SBool(True), path.sub, False, path.bound
    if isinstance(path, Globally):
        return path.sub, SBool(False), True, path.bound
    raise FormulaError(f"unknown path formula {path!r}")


# ---------------------------------------------------------------------------
# Parser.

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<op>>=|<=|==|!=|=\?|<|>)"
    r"|(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_']*)"
    r"|(?P<sym>[\[\]()@])"
    r")"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            at = len(text) - len(stripped)
            raise ParseError(f"unexpected character {text[at]!r}", at)
        for kind in ("op", "num", "name", "sym"):
            tok = m.group(kind)
            if tok is not None:
                out.append((kind, tok, m.start(kind)))
                break
        pos = m.end()
    return out


class _FormulaParser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def _peek(self) -> tuple[str, str, int] | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def _next(self) -> tuple[str, str, int]:
        tok = self._peek()
        if tok is None:
            raise ParseError("unexpected end of formula", len(self.text))
        self.i += 1
        return tok

    def _expect(self, text: str) -> tuple[str, str, int]:
        tok = self._next()
        if tok[1] != text:
            raise ParseError(f"expected {text!r}, got {tok[1]!r}", tok[2])
        return tok

    def _number(self) -> float:
        tok = self._next()
        if tok[0] != "num":
            raise ParseError(f"expected a number, got {tok[1]!r}", tok[2])
        if "." in tok[1] or "e" in tok[1] or "E" in tok[1]:
            return float(tok[1])
        return int(tok[1])

    def _int(self, what: str) -> int:
        tok = self._peek()
        value = self._number()
        if not isinstance(value, int):
            raise ParseError(f"{what} must be an integer", tok[2])
        return value

    # -- query ------------------------------------------------------------

    def parse_query(self) -> ProbQuery:
        tok = self._next()
        if tok[1] != "P":
            raise ParseError("a query starts with P", tok[2])
        op_tok = self._next()
        op = op_tok[1]
        if op == "=?":
            q = None
        elif op in (">=", "<=", "<", ">"):
            q_tok = self._peek()
            q = float(self._number())
            if not 0.0 <= q <= 1.0:
                raise ParseError("probability threshold must be in [0, 1]", q_tok[2])
        else:
            raise ParseError(f"expected a probability comparison, got {op!r}", op_tok[2])
        self._expect("[")
        path = self.parse_path()
        self._expect("]")
        tail = self._peek()
        if tail is not None:
            raise ParseError(f"trailing input {tail[1]!r}", tail[2])
        return ProbQuery(op, q, path)

    def parse_path(self) -> PathForm:
        tok = self._peek()
        if tok is not None and tok[0] == "name" and tok[1] in ("F", "G"):
            self._next()
            bound = self.parse_bound()
            sub = self.parse_sform()
            return Finally(sub, bound) if tok[1] == "F" else Globally(sub, bound)
        left = self.parse_sform()
        tok = self._next()
        if tok[0] != "name" or tok[1] not in ("U", "W"):
            raise ParseError(f"expected U or W, got {tok[1]!r}", tok[2])
        bound = self.parse_bound()
        right = self.parse_sform()
        return Until(left, right, bound) if tok[1] == "U" else WeakUntil(left, right, bound)

    def parse_bound(self) -> Bound:
        self._expect("[")
        kind_tok = self._next()
        if kind_tok[1] not in ("t", "s"):
            raise ParseError("bound must be on t (time) or s (spatial steps)", kind_tok[2])
        self._expect("<=")
        num_tok = self._peek()
        limit = self._number()
        if kind_tok[1] == "s":
            if not isinstance(limit, int):
                raise ParseError("a spatial budget must be an integer", num_tok[2])
            if limit < 0:
                raise ParseError("a spatial budget must be non-negative", num_tok[2])
        else:
            limit = float(limit)
            if limit < 0:
                raise ParseError("a time bound must be non-negative", num_tok[2])
        self._expect("]")
        car = None
        tok = self._peek()
        if tok is not None and tok[1] == "@":
            self._next()
            name = self._next()
            if name[1] != "car":
                raise ParseError("only @car(N) scopes are supported", name[2])
            if kind_tok[1] != "s":
                raise ParseError("@car scopes apply to spatial budgets only", name[2])
            self._expect("(")
            car = self._int("car id")
            if car < 0:
                raise ParseError("car id must be non-negative", name[2])
            self._expect(")")
        return Bound(kind_tok[1], limit, car)

    # -- state formulas ---------------------------------------------------

    def parse_sform(self) -> SForm:
        node = self.parse_and()
        while True:
            tok = self._peek()
            if tok is not None and tok[1] == "or":
                self._next()
                node = SOr(node, self.parse_and())
            else:
                return node

    def parse_and(self) -> SForm:
        node = self.parse_not()
        while True:
            tok = self._peek()
            if tok is not None and tok[1] == "and":
                self._next()
                node = SAnd(node, self.parse_not())
            else:
                return node

    def parse_not(self) -> SForm:
        tok = self._peek()
        if tok is not None and tok[1] == "not":
            self._next()
            return SNot(self.parse_not())
        return self.parse_atom()

    def _cmp(self) -> str:
        tok = self._next()
        if tok[0] != "op" or tok[1] not in _CMP_OPS:
            raise ParseError(f"expected a comparison, got {tok[1]!r}", tok[2])
        return tok[1]

    def parse_atom(self) -> SForm:
        tok = self._next()
        if tok[1] == "(":
            node = self.parse_sform()
            self._expect(")")
            return node
        if tok[0] != "name":
            raise ParseError(f"unexpected token {tok[1]!r}", tok[2])
        name = tok[1]
        if name == "true":
            return SBool(True)
        if name == "false":
            return SBool(False)
        if name == "count":
            self._expect("(")
            place = self._next()
            if place[0] != "name":
                raise ParseError("count() takes a place name", place[2])
            self._expect(")")
            return SCount(place[1], self._cmp(), self._number())
        if name == "bubble":
            self._expect("(")
            k_tok = self._peek()
            k = self._int("bubble size")
            if k < 2:
                raise ParseError("a bubble needs at least two cars", k_tok[2])
            self._expect(")")
            return SBubble(k)
        if name == "deliveredfrac":
            return SDeliveredFrac(self._cmp(), self._number())
        if name == "car":
            open_tok = self._expect("(")
            start = open_tok[2]
            depth = 0
            end = None
            for j in range(start, len(self.text)):
                ch = self.text[j]
                if ch == "(":
                    depth += 1
                elif ch == ")":
                    depth -= 1
                    if depth == 0:
                        end = j
                        break
            if end is None:
                raise ParseError("unbalanced parentheses in car()", start)
            raw = self.text[start + 1 : end]
            try:
                pred = expr.parse(raw)
            except ParseError as e:
                raise ParseError(f"in car(): {e.args[0]}", start + 1 + e.pos) from None
            bad = expr.free_vars(pred) - set(_CAR_VARS)
            if bad:
                raise ParseError(
                    f"car() predicate uses unknown variables {sorted(bad)}", start + 1
                )
            while self.i < len(self.tokens) and self.tokens[self.i][2] <= end:
                self.i += 1
            return SCar(pred)
        raise ParseError(f"unknown atom {name!r}", tok[2])


def parse_formula(text: str) -> ProbQuery:
    return _FormulaParser(text).parse_query()


# ---------------------------------------------------------------------------
# Printer.  parse(to_text(f)) reproduces f.

def _fmt_num(x: float) -> str:
    if isinstance(x, int):
        return str(x)
    return repr(x)


def _sform_text(node: SForm, parent_prec: int = 0) -> str:
    if isinstance(node, SBool):
        return "true" if node.value else "false"
    if isinstance(node, SCount):
        return f"count({node.place}) {node.op} {_fmt_num(node.value)}"
    if isinstance(node, SCar):
        return f"car({expr.to_text(node.pred)})"
    if isinstance(node, SBubble):
        return f"bubble({node.k})"
    if isinstance(node, SDeliveredFrac):
        return f"deliveredfrac {node.op} {_fmt_num(node.value)}"
    if isinstance(node, SNot):
        return f"not {_sform_text(node.sub, 3)}"
    if isinstance(node, (SAnd, SOr)):
        prec = 2 if isinstance(node, SAnd) else 1
        word = "and" if isinstance(node, SAnd) else "or"
        text = f"{_sform_text(node.left, prec)} {word} {_sform_text(node.right, prec + 1)}"
        return f"({text})" if prec < parent_prec else text
    raise FormulaError(f"cannot print {node!r}")


def _bound_text(b: Bound) -> str:
    text = f"[{b.kind}<={_fmt_num(b.limit)}]"
    if b.car is not None:
        text += f"@car({b.car})"
    return text


def _path_text(path: PathForm) -> str:
    if isinstance(path, Finally):
        return f"F{_bound_text(path.bound)} {_sform_text(path.sub)}"
    if isinstance(path, Globally):
        return f"G{_bound_text(path.bound)} {_sform_text(path.sub)}"
    if isinstance(path, Until):
        return f"{_sform_text(path.left)} U{_bound_text(path.bound)} {_sform_text(path.right)}"
    if isinstance(path, WeakUntil):
        return f"{_sform_text(path.left)} W{_bound_text(path.bound)} {_sform_text(path.right)}"
    raise FormulaError(f"cannot print {path!r}")


def formula_to_text(query: ProbQuery) -> str:
    head = "P=?" if query.op == "=?" else f"P{query.op}{_fmt_num(query.q)}"
    return f"{head} [ {_path_text(query.path)} ]"


# ---------------------------------------------------------------------------
# State formula evaluation.

def _compare(a: float, op: str, b: float) -> bool:
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    raise FormulaError(f"unknown comparison {op!r}")


def eval_atomic(node: SForm, state, rn=None, msg_stats: Sequence[int] | None = None) -> bool:
    """Evaluate a state formula against a marking-like object exposing
    ``count(place)`` and ``tokens(place)``.

    ``msg_stats`` is (created, delivered) so far on the trajectory; only
    the deliveredfrac atom needs it, and asking for it outside a
    trajectory is an error.  An empty history counts as fully delivered.
    """
    if isinstance(node, SBool):
        return node.value
    if isinstance(node, SCount):
        return _compare(state.count(node.place), node.op, node.value)
    if isinstance(node, SDeliveredFrac):
        if msg_stats is None:
            raise FormulaError(
                "deliveredfrac is a trajectory statistic; it has no meaning on a single marking"
            )
        created, delivered = msg_stats[0], msg_stats[1]
        frac = delivered / created if created else 1.0
        return _compare(frac, node.op, node.value)
    if isinstance(node, SCar):
        for colour in state.tokens("Z"):
            env = dict(zip(_CAR_VARS, colour))
            missing = expr.free_vars(node.pred) - set(env)
            if missing:
                raise FormulaError(f"car() predicate uses {sorted(missing)} but cars have no such field")
            if expr.evaluate(node.pred, env) is True:
                return True
        return False
    if isinstance(node, SBubble):
        if rn is None:
            raise FormulaError("bubble() needs a road network")
        cars = []
        for colour, k in state.tokens("Z").items():
            cars.extend([colour] * k)
        if len(cars) < node.k:
            return False
        from .spatial import bubbles, proximity_graph

        return bool(bubbles(proximity_graph(rn, cars), node.k))
    if isinstance(node, SNot):
        return not eval_atomic(node.sub, state, rn, msg_stats)
    if isinstance(node, SAnd):
        return eval_atomic(node.left, state, rn, msg_stats) and eval_atomic(
            node.right, state, rn, msg_stats
        )
    if isinstance(node, SOr):
        return eval_atomic(node.left, state, rn, msg_stats) or eval_atomic(
            node.right, state, rn, msg_stats
        )
    raise FormulaError(f"cannot evaluate {node!r}")


def _atoms(node) -> Iterable:
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, ProbQuery):
            stack.append(n.path)
        elif isinstance(n, (Until, WeakUntil)):
            stack.extend((n.left, n.right))
        elif isinstance(n, (Finally, Globally)):
            stack.append(n.sub)
        elif isinstance(n, SNot):
            stack.append(n.sub)
        elif isinstance(n, (SAnd, SOr)):
            stack.extend((n.left, n.right))
        else:
            yield n


def validate_formula(
    query: ProbQuery, net: Net, *, exact: bool = False, tracked: bool = False
) -> None:
    """Reject formulas the given net or checking mode cannot support."""
    _phi, _psi, _weak, bound = _desugar(query.path)
    if bound.car is not None:
        if exact:
            raise FormulaError("@car scopes need per-car identity; use the statistical checker")
        if not tracked:
            raise FormulaError("@car scopes need a tracked scenario (car identities)")
    for atom in _atoms(query):
        if isinstance(atom, SCount):
            if not net.has_place(atom.place):
                raise FormulaError(f"count() refers to unknown place {atom.place!r}")
        elif isinstance(atom, (SCar, SBubble)):
            if net.spatial is None:
                raise FormulaError("car() and bubble() need a net with a road network")
            if not net.has_place("Z"):
                raise FormulaError("car() and bubble() need a net with car place Z")
        elif isinstance(atom, SDeliveredFrac):
            if exact:
                raise FormulaError(
                    "deliveredfrac is a trajectory statistic; use the statistical checker"
                )
            if not tracked:
                raise FormulaError("deliveredfrac needs a tracked scenario (message identities)")


# ---------------------------------------------------------------------------
# Results.

@dataclass
class CheckResult:
    formula: str
    op: str
    q: float | None
    p_hat: float
    ci: tuple[float, float]
    gamma: float  # confidence level of the interval (1.0 for exact results)
    samples: int  # 0 for exact results
    successes: int
    censored: int
    verdict: str  # "satisfied" | "violated" | "undecided" | "estimate"


def wilson_interval(successes: int, n: int, gamma: float) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion at confidence gamma."""
    if not 0 < gamma < 1:
        raise FormulaError("confidence level must be in (0, 1)")
    if n == 0:
        return (0.0, 1.0)
    z = NormalDist().inv_cdf(0.5 + gamma / 2)
    phat = successes / n
    z2 = z * z
    denom = 1 + z2 / n
    centre = (phat + z2 / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z2 / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def _ci_verdict(op: str, q: float | None, lo: float, hi: float, p_hat: float) -> str:
    if op == "=?":
        return "estimate"
    if lo <= q <= hi:
        return "undecided"
    if op in (">=", ">"):
        return "satisfied" if lo > q else "violated"
    return "satisfied" if hi < q else "violated"


def _exact_verdict(op: str, q: float | None, p: float, tol: float = 1e-9) -> str:
    if op == "=?":
        return "estimate"
    if op == ">=":
        return "satisfied" if p >= q - tol else "violated"
    if op == ">":
        return "satisfied" if p > q + tol else "violated"
    if op == "<=":
        return "satisfied" if p <= q + tol else "violated"
    return "satisfied" if p < q - tol else "violated"


# ---------------------------------------------------------------------------
# Statistical checking.

class _PathRun:
    """Streams one trajectory through the bounded until automaton.

    Wraps an optional inner annotator (the tracker) so its annotations
    still reach the trace, and consumes them for spatial attribution and
    delivery statistics."""

    def __init__(
        self,
        phi: SForm,
        psi: SForm,
        weak: bool,
        bound: Bound,
        rn,
        spatial_names: frozenset[str],
        inner,
        needs_stats: bool,
    ):
        self.phi = phi
        self.psi = psi
        self.weak = weak
        self.bound = bound
        self.rn = rn
        self.spatial_names = spatial_names
        self.inner = inner
        self.stats = [0, 0] if needs_stats else None
        self.spent = 0
        self.decided: bool | None = None
        self.censored = False

    def keep_going(self, time: float, transition: str, binding: tuple):
        return None if self.decided is None else False

    def _eval_state(self, view) -> None:
        if eval_atomic(self.psi, view, self.rn, self.stats):
            self.decided = True
        elif not eval_atomic(self.phi, view, self.rn, self.stats):
            self.decided = False

    def begin(self, view) -> None:
        if self.inner is not None and hasattr(self.inner, "begin"):
            self.inner.begin(view)
        self._eval_state(view)

    def on_event(self, view, time: float, transition: str, binding: tuple) -> tuple:
        ann: tuple = ()
        if self.inner is not None:
            ann = self.inner.on_event(view, time, transition, binding) or ()
        if self.decided is not None:
            return ann
        if self.stats is not None:
            for entry in ann:
                if entry[0] == "created":
                    self.stats[0] += 1
                elif entry[0] == "delivered":
                    self.stats[1] += len(entry[1])
        b = self.bound
        if b.kind == "t":
            if time > b.limit:
                self.decided = self.weak
                return ann
        else:
            if b.car is not None:
                if any(e[0] == "moved" and e[1] == b.car for e in ann):
                    self.spent += 1
            elif transition in self.spatial_names:
                self.spent += 1
            if self.spent > b.limit:
                self.decided = self.weak
                return ann
        self._eval_state(view)
        return ann

    def finish(self, view, time: float, stopped: str) -> None:
        if self.inner is not None and hasattr(self.inner, "finish"):
            self.inner.finish(view, time, stopped)
        if self.decided is not None:
            return
        if self.bound.kind == "t":
            # the last state persists past the bound (deadlock) or the run
            # covered the whole bound (horizon >= T is enforced upfront)
            self.decided = self.weak
        elif stopped == "deadlock":
            # no further spatial firings can ever happen
            self.decided = self.weak
        else:
            self.censored = True
            self.decided = False


_SMC_WORKER: dict[str, Any] = {}


def _smc_init(net, init, phi, psi, weak, bound, spatial_names, factory, needs_stats, horizon):
    _SMC_WORKER.update(
        engine=sim.Engine(net, init),
        args=(phi, psi, weak, bound, net.spatial, spatial_names, factory, needs_stats),
        horizon=horizon,
    )


def _smc_sample(seed: int) -> tuple[bool, bool]:
    phi, psi, weak, bound, rn, spatial_names, factory, needs_stats = _SMC_WORKER["args"]
    inner = factory() if factory is not None else None
    run = _PathRun(phi, psi, weak, bound, rn, spatial_names, inner, needs_stats)
    _SMC_WORKER["engine"].run(
        _SMC_WORKER["horizon"], seed, collect=False, annotator=run, on_event=run.keep_going
    )
    return bool(run.decided), run.censored


def _uses_deliveredfrac(query: ProbQuery) -> bool:
    return any(isinstance(a, SDeliveredFrac) for a in _atoms(query))


def needs_tracking(query: str | ProbQuery) -> bool:
    """True when the query relies on per-car or per-message identity and
    therefore needs a tracking annotator during simulation."""
    if isinstance(query, str):
        query = parse_formula(query)
    return _desugar(query.path)[3].car is not None or _uses_deliveredfrac(query)


def smc_check(
    net: Net,
    init: Marking,
    formula: str | ProbQuery,
    *,
    samples: int,
    horizon: float,
    gamma: float = 0.99,
    seed: int = 0,
    jobs: int = 1,
    annotator_factory: Callable[[], Any] | None = None,
) -> CheckResult:
    """Estimate the path probability from ``samples`` independent runs
    seeded seed..seed+samples-1 and compare it against the threshold.

    The verdict is undecided when the threshold falls inside the Wilson
    interval.  Runs that end at the horizon with spatial budget left are
    censored: counted, reported, and treated as not satisfying the path
    formula.  Time bounds require horizon >= T so they never censor.
    """
    query = parse_formula(formula) if isinstance(formula, str) else formula
    if samples < 1:
        raise FormulaError("samples must be >= 1")
    validate_formula(query, net, exact=False, tracked=annotator_factory is not None)
    phi, psi, weak, bound = _desugar(query.path)
    if bound.kind == "t" and horizon < bound.limit:
        raise FormulaError(
            f"horizon {horizon} is shorter than the time bound {bound.limit}; "
            "runs could end undecided"
        )
    needs_stats = _uses_deliveredfrac(query)
    spatial_names = frozenset(t.name for t in net.transitions if "spatial" in t.tags)
    seeds = range(seed, seed + samples)
    if jobs <= 1:
        engine = sim.Engine(net, init)
        results = []
        for s in seeds:
            inner = annotator_factory() if annotator_factory is not None else None
            run = _PathRun(phi, psi, weak, bound, net.spatial, spatial_names, inner, needs_stats)
            engine.run(horizon, s, collect=False, annotator=run, on_event=run.keep_going)
            results.append((bool(run.decided), run.censored))
    else:
        chunk = max(1, samples // (jobs * 4))
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_smc_init,
            initargs=(net, init, phi, psi, weak, bound, spatial_names, annotator_factory, needs_stats, horizon),
        ) as ex:
            results = list(ex.map(_smc_sample, seeds, chunksize=chunk))
    successes = sum(1 for ok, _c in results if ok)
    censored = sum(1 for _ok, c in results if c)
    p_hat = successes / samples
    lo, hi = wilson_interval(successes, samples, gamma)
    return CheckResult(
        formula=formula_to_text(query),
        op=query.op,
        q=query.q,
        p_hat=p_hat,
        ci=(lo, hi),
        gamma=gamma,
        samples=samples,
        successes=successes,
        censored=censored,
        verdict=_ci_verdict(query.op, query.q, lo, hi, p_hat),
    )


# ---------------------------------------------------------------------------
# Exact checking.

def exact_bounded_until(
    ctmc: Ctmc, phi: np.ndarray, psi: np.ndarray, horizon: float, eps: float = 1e-6
) -> np.ndarray:
    """Per-state probability of (phi U[t<=horizon] psi) by uniformization.

    States satisfying psi, and states satisfying neither phi nor psi, are
    made absorbing; the result truncates the Poisson sum once its mass
    reaches 1 - eps."""
    if horizon < 0:
        raise FormulaError("time bound must be non-negative")
    n = ctmc.n
    phi = np.asarray(phi, dtype=bool)
    psi = np.asarray(psi, dtype=bool)
    bad = ~phi & ~psi
    transient = ~psi & ~bad
    res_now = psi.astype(float)
    if not transient.any() or horizon == 0.0:
        return res_now
    lam = float(ctmc.exit[transient].max()) if transient.any() else 0.0
    if lam == 0.0:
        return res_now
    keep = transient[ctmc.rows]
    rows = ctmc.rows[keep]
    cols = ctmc.cols[keep]
    vals = ctmc.vals[keep] / lam
    diag_idx = np.arange(n)
    diag = np.where(transient, 1.0 - ctmc.exit / lam, 1.0)
    P = sp.csr_matrix(
        (
            np.concatenate([vals, diag]),
            (np.concatenate([rows, diag_idx]), np.concatenate([cols, diag_idx])),
        ),
        shape=(n, n),
    )
    lam_t = lam * horizon
    y = psi.astype(float)
    acc = np.zeros(n)
    cum = 0.0
    k = 0
    k_max = int(lam_t + 10.0 * math.sqrt(lam_t + 1.0) + 100.0)
    log_lam_t = math.log(lam_t)
    while cum < 1.0 - eps and k <= k_max:
        logw = -lam_t + (k * log_lam_t if k else 0.0) - math.lgamma(k + 1)
        w = math.exp(logw)
        if w > 0.0:
            acc += w * y
            cum += w
        y = P @ y
        k += 1
    res = np.clip(acc, 0.0, 1.0)
    res[psi] = 1.0
    res[bad] = 0.0
    return res


def exact_bounded_unless(
    ctmc: Ctmc, phi: np.ndarray, psi: np.ndarray, horizon: float, eps: float = 1e-6
) -> np.ndarray:
    """phi W[t<=horizon] psi as the complement of an until: a weak-until
    path fails exactly when (phi and not psi) holds until a state with
    neither holds."""
    phi = np.asarray(phi, dtype=bool)
    psi = np.asarray(psi, dtype=bool)
    fail = exact_bounded_until(ctmc, phi & ~psi, ~phi & ~psi, horizon, eps)
    return np.clip(1.0 - fail, 0.0, 1.0)


def _solve_transient(A_iter: sp.spmatrix, lu, rhs: np.ndarray) -> np.ndarray:
    """Solve (I - P_ns) x = rhs; with a singular factorisation fall back
    to fixed-point iteration from zero, which converges to the minimal
    non-negative solution (the correct path probability)."""
    if lu is not None:
        return lu.solve(rhs)
    x = np.zeros_like(rhs)
    for _ in range(1_000_000):
        x2 = A_iter @ x + rhs
        if float(np.max(np.abs(x2 - x))) < 1e-13:
            return x2
        x = x2
    raise FormulaError("spatial budget recursion did not converge")


def exact_space_bounded(
    graph: ReachGraph,
    phi: np.ndarray,
    psi: np.ndarray,
    budget: int,
    spatial_names: frozenset[str],
    weak: bool = False,
) -> np.ndarray:
    """Per-state probability of phi U psi (or phi W psi) along the
    embedded jump chain using at most ``budget`` spatial firings.

    The recursion solves one linear system per budget level: non-spatial
    jumps stay on the same level, spatial jumps move down a level, and
    paths that would need a further spatial firing at level zero fail (or
    trivially hold, for the weak variant)."""
    if budget < 0:
        raise FormulaError("spatial budget must be non-negative")
    phi = np.asarray(phi, dtype=bool)
    psi = np.asarray(psi, dtype=bool)
    if weak:
        fail = exact_space_bounded(graph, phi & ~psi, ~phi & ~psi, budget, spatial_names, False)
        return np.clip(1.0 - fail, 0.0, 1.0)
    n = graph.n
    transient = phi & ~psi
    res = psi.astype(float)
    if not transient.any():
        return res
    exit_rate = np.zeros(n)
    for src, _dst, _t, _b, rate in graph.edges:
        exit_rate[src] += rate
    ns_r: list[int] = []
    ns_c: list[int] = []
    ns_v: list[float] = []
    sp_r: list[int] = []
    sp_c: list[int] = []
    sp_v: list[float] = []
    b_ns = np.zeros(n)
    b_sp = np.zeros(n)
    for src, dst, t, _b, rate in graph.edges:
        if not transient[src]:
            continue
        p = rate / exit_rate[src]
        spatial = t in spatial_names
        if psi[dst]:
            if spatial:
                b_sp[src] += p
            else:
                b_ns[src] += p
        elif transient[dst]:
            if spatial:
                sp_r.append(src)
                sp_c.append(dst)
                sp_v.append(p)
            else:
                ns_r.append(src)
                ns_c.append(dst)
                ns_v.append(p)
        # jumps into states with neither phi nor psi contribute nothing
    P_ns = sp.csr_matrix((ns_v, (ns_r, ns_c)), shape=(n, n))
    P_sp = sp.csr_matrix((sp_v, (sp_r, sp_c)), shape=(n, n))
    A = (sp.identity(n, format="csc") - P_ns).tocsc()
    try:
        lu = splu(A)
    except RuntimeError:
        lu = None
    x = _solve_transient(P_ns, lu, b_ns)
    for _level in range(1, budget + 1):
        rhs = b_ns + b_sp + P_sp @ x
        x = _solve_transient(P_ns, lu, rhs)
    res[transient] = np.clip(x[transient], 0.0, 1.0)
    return res


def exact_check(
    net: Net,
    init: Marking,
    formula: str | ProbQuery,
    *,
    limit: int | None = None,
    eps: float = 1e-6,
) -> CheckResult:
    """Check a query exactly on the reachable state space."""
    query = parse_formula(formula) if isinstance(formula, str) else formula
    validate_formula(query, net, exact=True)
    phi_f, psi_f, weak, bound = _desugar(query.path)
    graph = semantics.reachability(net, init, limit)
    rn = net.spatial
    phi = np.array([eval_atomic(phi_f, m, rn) for m in graph.states], dtype=bool)
    psi = np.array([eval_atomic(psi_f, m, rn) for m in graph.states], dtype=bool)
    if bound.kind == "t":
        ctmc = semantics.to_ctmc(graph)
        if weak:
            res = exact_bounded_unless(ctmc, phi, psi, bound.limit, eps)
        else:
            res = exact_bounded_until(ctmc, phi, psi, bound.limit, eps)
    else:
        spatial_names = frozenset(t.name for t in net.transitions if "spatial" in t.tags)
        res = exact_space_bounded(graph, phi, psi, int(bound.limit), spatial_names, weak)
    p = float(res[graph.initial])
    return CheckResult(
        formula=formula_to_text(query),
        op=query.op,
        q=query.q,
        p_hat=p,
        ci=(p, p),
        gamma=1.0,
        samples=0,
        successes=0,
        censored=0,
        verdict=_exact_verdict(query.op, query.q, p),
    )
