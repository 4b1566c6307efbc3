"""Small expression language used for guards, rates and arc expressions.

Supports boolean connectives (``and``, ``or``, ``not``), comparisons,
integer/float arithmetic (``+``, ``-``, ``*``), calls to registered
functions and tuple construction for output arcs.  Identifiers may carry
prime suffixes (``p'``), which is convenient for transitions whose guard
both tests input colours and pins the output colours.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping

from .errors import ExprError as EvalError
from .errors import ParseError


@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Const(Node):
    value: Any


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple[Node, ...]


@dataclass(frozen=True)
class TupleExpr(Node):
    items: tuple[Node, ...]


@dataclass(frozen=True)
class Unary(Node):
    op: str  # 'not' | 'neg'
    operand: Node


@dataclass(frozen=True)
class Binary(Node):
    op: str  # 'or' 'and' '==' '!=' '<' '<=' '>' '>=' '+' '-' '*'
    left: Node
    right: Node


TRUE = Const(True)
FALSE = Const(False)

_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+|\d+)
      | (?P<name>[A-Za-z_][A-Za-z0-9_']*)
      | (?P<op><=|>=|==|!=|<|>|\+|-|\*|\(|\)|,)
    """,
    re.X,
)

_KEYWORDS = {"and", "or", "not", "true", "false"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), pos))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.toks[self.i]

    def next(self) -> tuple[str, str, int]:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, value: str) -> None:
        kind, val, pos = self.next()
        if val != value:
            raise ParseError(f"expected {value!r}, found {val or 'end of input'!r}", pos)

    def at(self, value: str) -> bool:
        return self.peek()[1] == value

    def parse(self) -> Node:
        node = self.parse_or()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"trailing input {val!r}", pos)
        return node

    def parse_or(self) -> Node:
        node = self.parse_and()
        while self.at("or"):
            self.next()
            node = Binary("or", node, self.parse_and())
        return node

    def parse_and(self) -> Node:
        node = self.parse_not()
        while self.at("and"):
            self.next()
            node = Binary("and", node, self.parse_not())
        return node

    def parse_not(self) -> Node:
        if self.at("not"):
            self.next()
            return Unary("not", self.parse_not())
        return self.parse_cmp()

    def parse_cmp(self) -> Node:
        node = self.parse_add()
        if self.peek()[1] in ("==", "!=", "<", "<=", ">", ">="):
            op = self.next()[1]
            node = Binary(op, node, self.parse_add())
        return node

    def parse_add(self) -> Node:
        node = self.parse_mul()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            node = Binary(op, node, self.parse_mul())
        return node

    def parse_mul(self) -> Node:
        node = self.parse_unary()
        while self.at("*"):
            self.next()
            node = Binary("*", node, self.parse_unary())
        return node

    def parse_unary(self) -> Node:
        if self.at("-"):
            self.next()
            return Unary("neg", self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> Node:
        kind, val, pos = self.next()
        if kind == "num":
            if any(c in val for c in ".eE"):
                return Const(float(val))
            return Const(int(val))
        if kind == "name":
            if val == "true":
                return TRUE
            if val == "false":
                return FALSE
            if val in _KEYWORDS:
                raise ParseError(f"unexpected keyword {val!r}", pos)
            if self.at("("):
                self.next()
                args = []
                if not self.at(")"):
                    args.append(self.parse_or())
                    while self.at(","):
                        self.next()
                        args.append(self.parse_or())
                self.expect(")")
                return Call(val, tuple(args))
            return Var(val)
        if val == "(":
            first = self.parse_or()
            if self.at(","):
                items = [first]
                while self.at(","):
                    self.next()
                    if self.at(")"):  # allow trailing comma
                        break
                    items.append(self.parse_or())
                self.expect(")")
                return TupleExpr(tuple(items))
            self.expect(")")
            return first
        raise ParseError(f"unexpected token {val or 'end of input'!r}", pos)


def parse(text: str) -> Node:
    """Parse ``text`` into an expression tree."""
    return _Parser(text).parse()


_PREC = {
    "or": 1,
    "and": 2,
    "==": 4, "!=": 4, "<": 4, "<=": 4, ">": 4, ">=": 4,
    "+": 5, "-": 5,
    "*": 6,
}


def to_text(node: Node) -> str:
    """Render a tree back to parseable text (round-trips through parse)."""
    return _render(node, 0)


def _render(node: Node, parent_prec: int) -> str:
    if isinstance(node, Const):
        v = node.value
        if v is True:
            return "true"
        if v is False:
            return "false"
        return repr(v)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_render(a, 0) for a in node.args)})"
    if isinstance(node, TupleExpr):
        inner = ", ".join(_render(a, 0) for a in node.items)
        if len(node.items) == 1:
            inner += ","
        return f"({inner})"
    if isinstance(node, Unary):
        if node.op == "not":
            s = f"not {_render(node.operand, 3)}"
            return f"({s})" if parent_prec > 3 else s
        return f"-{_render(node.operand, 7)}"
    if isinstance(node, Binary):
        prec = _PREC[node.op]
        s = f"{_render(node.left, prec)} {node.op} {_render(node.right, prec + 1)}"
        return f"({s})" if parent_prec > prec else s
    raise EvalError(f"unknown node {node!r}")


def free_vars(node: Node) -> frozenset[str]:
    if isinstance(node, Var):
        return frozenset((node.name,))
    if isinstance(node, (Const,)):
        return frozenset()
    if isinstance(node, Call):
        out: frozenset[str] = frozenset()
        for a in node.args:
            out |= free_vars(a)
        return out
    if isinstance(node, TupleExpr):
        out = frozenset()
        for a in node.items:
            out |= free_vars(a)
        return out
    if isinstance(node, Unary):
        return free_vars(node.operand)
    if isinstance(node, Binary):
        return free_vars(node.left) | free_vars(node.right)
    raise EvalError(f"unknown node {node!r}")


def evaluate(node: Node, env: Mapping[str, Any], functions: Mapping[str, Callable] | None = None) -> Any:
    """Evaluate under ``env`` (variables and constants merged by the caller).

    Boolean connectives short-circuit and insist on boolean operands;
    ordering comparisons insist on numbers.  Registered functions are
    assumed total over the values the guard can feed them.
    """
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Call):
        if not functions or node.func not in functions:
            raise EvalError(f"unknown function {node.func!r}")
        args = [evaluate(a, env, functions) for a in node.args]
        return functions[node.func](*args)
    if isinstance(node, TupleExpr):
        return tuple(evaluate(a, env, functions) for a in node.items)
    if isinstance(node, Unary):
        if node.op == "not":
            v = evaluate(node.operand, env, functions)
            if not isinstance(v, bool):
                raise EvalError(f"'not' needs a boolean, got {v!r}")
            return not v
        v = evaluate(node.operand, env, functions)
        _need_number(v, "-")
        return -v
    if isinstance(node, Binary):
        op = node.op
        if op == "and":
            left = evaluate(node.left, env, functions)
            if not isinstance(left, bool):
                raise EvalError(f"'and' needs booleans, got {left!r}")
            if not left:
                return False
            right = evaluate(node.right, env, functions)
            if not isinstance(right, bool):
                raise EvalError(f"'and' needs booleans, got {right!r}")
            return right
        if op == "or":
            left = evaluate(node.left, env, functions)
            if not isinstance(left, bool):
                raise EvalError(f"'or' needs booleans, got {left!r}")
            if left:
                return True
            right = evaluate(node.right, env, functions)
            if not isinstance(right, bool):
                raise EvalError(f"'or' needs booleans, got {right!r}")
            return right
        a = evaluate(node.left, env, functions)
        b = evaluate(node.right, env, functions)
        if op == "==":
            return a == b
        if op == "!=":
            return a != b
        if op in ("<", "<=", ">", ">="):
            _need_number(a, op)
            _need_number(b, op)
            if op == "<":
                return a < b
            if op == "<=":
                return a <= b
            if op == ">":
                return a > b
            return a >= b
        _need_number(a, op)
        _need_number(b, op)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        return a * b
    raise EvalError(f"unknown node {node!r}")


def _need_number(v: Any, op: str) -> None:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise EvalError(f"operator {op!r} needs a number, got {v!r}")


def is_evaluable(node: Node, env: Mapping[str, Any]) -> bool:
    return all(name in env for name in free_vars(node))


def propagate(
    node: Node,
    env: dict[str, Any],
    base: Mapping[str, Any],
    functions: Mapping[str, Callable] | None,
    var_domains: Mapping[str, Any],
) -> list[dict[str, Any]]:
    """Narrow candidate bindings for the free variables of a guard.

    Walks the and/or structure of ``node`` extending ``env``: an equality
    conjunct ``x == e`` with ``x`` free and ``e`` already evaluable pins
    ``x``; a fully evaluable conjunct prunes the branch when false.
    Disjunctions branch.  The result over-approximates: every satisfying
    assignment extends one of the returned environments, and callers must
    still enumerate any variables left unbound and re-check the full guard.
    """
    merged = _Chain(env, base)
    if isinstance(node, Binary) and node.op == "and":
        branches = propagate(node.left, env, base, functions, var_domains)
        out: list[dict[str, Any]] = []
        for b in branches:
            out.extend(propagate(node.right, b, base, functions, var_domains))
        return out
    if isinstance(node, Binary) and node.op == "or":
        return propagate(node.left, env, base, functions, var_domains) + propagate(
            node.right, env, base, functions, var_domains
        )
    if isinstance(node, Binary) and node.op == "==":
        left, right = node.left, node.right
        for var_side, expr_side in ((left, right), (right, left)):
            if (
                isinstance(var_side, Var)
                and var_side.name not in merged
                and var_side.name in var_domains
                and is_evaluable(expr_side, merged)
            ):
                val = evaluate(expr_side, merged, functions)
                if val in var_domains[var_side.name]:
                    return [{**env, var_side.name: val}]
                return []
        # fall through to plain test below
    if is_evaluable(node, merged):
        val = evaluate(node, merged, functions)
        if val is True:
            return [env]
        if val is False:
            return []
        raise EvalError(f"guard fragment is not boolean: {to_text(node)}")
    return [env]


class _Chain(Mapping):
    """Two-level read-only mapping; first layer wins."""

    __slots__ = ("a", "b")

    def __init__(self, a: Mapping, b: Mapping):
        self.a = a
        self.b = b

    def __getitem__(self, k):
        try:
            return self.a[k]
        except KeyError:
            return self.b[k]

    def __contains__(self, k):
        return k in self.a or k in self.b

    def __iter__(self) -> Iterator:
        seen = set(self.a)
        yield from self.a
        for k in self.b:
            if k not in seen:
                yield k

    def __len__(self) -> int:
        return len(set(self.a) | set(self.b))


def chain_env(binding: Mapping, constants: Mapping) -> Mapping:
    return _Chain(binding, constants)
