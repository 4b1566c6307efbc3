import pytest

from spotnet import expr
from spotnet.errors import EvalError, ParseError


def ev(text, env=None, functions=None):
    return expr.evaluate(expr.parse(text), env or {}, functions)


def test_parse_arithmetic_precedence():
    assert ev("1 + 2 * 3") == 7
    assert ev("(1 + 2) * 3") == 9
    assert ev("2 - 3 - 4") == -5
    assert ev("-2 * 3") == -6


def test_parse_number_forms():
    assert ev("0.5") == 0.5
    assert ev(".25") == 0.25
    assert ev("1e2") == 100.0
    assert ev("2.5e-1") == 0.25


def test_comparisons():
    assert ev("1 < 2") is True
    assert ev("2 <= 2") is True
    assert ev("3 > 4") is False
    assert ev("1 == 1") is True
    assert ev("1 != 1") is False


def test_equality_on_non_numbers():
    assert ev("f == t", {"f": "A", "t": "A"}) is True
    assert ev("f != t", {"f": "A", "t": "B"}) is True


def test_boolean_connectives_and_precedence():
    assert ev("true and false") is False
    assert ev("true or false") is True
    assert ev("not false") is True
    # 'and' binds tighter than 'or'
    assert ev("true or false and false") is True
    assert ev("1 < 2 and 2 < 3") is True


def test_and_short_circuits():
    # the right operand would raise if evaluated
    assert ev("false and x < 1") is False
    assert ev("true or x < 1") is True


def test_boolean_operands_are_checked():
    with pytest.raises(EvalError):
        ev("1 and true")
    with pytest.raises(EvalError):
        ev("not 3")
    with pytest.raises(EvalError):
        ev("true < false")


def test_variables_and_unbound():
    assert ev("x + y", {"x": 2, "y": 3}) == 5
    with pytest.raises(EvalError):
        ev("x + 1")


def test_primed_variable_names():
    assert ev("p' - 1 == p", {"p": 3, "p'": 4}) is True


def test_function_calls():
    fns = {"double": lambda v: 2 * v, "max2": max}
    assert ev("double(21)", functions=fns) == 42
    assert ev("max2(3, 9)", functions=fns) == 9
    with pytest.raises(EvalError):
        ev("missing(1)", functions=fns)


def test_tuple_expressions():
    node = expr.parse("(f, p + 1)")
    assert expr.evaluate(node, {"f": "A", "p": 2}) == ("A", 3)


def test_parse_errors():
    for bad in ["1 +", "(1", "1 ?", "", "f =="]:
        with pytest.raises(ParseError):
            expr.parse(bad)


def test_free_vars():
    assert expr.free_vars(expr.parse("x + y * x")) == frozenset({"x", "y"})
    assert expr.free_vars(expr.parse("1 + 2")) == frozenset()
    assert expr.free_vars(expr.parse("F(a) and b == 1")) == frozenset({"a", "b"})


def test_to_text_round_trip():
    for text in [
        "x + y * z",
        "(x + y) * z",
        "not (a or b)",
        "f == t and p >= 1",
        "ETA(f, p, t, v) < ETA(f', p', t', v')",
        "-x + 2",
    ]:
        node = expr.parse(text)
        again = expr.parse(expr.to_text(node))
        assert expr.to_text(again) == expr.to_text(node)
        env = {n: 2 for n in expr.free_vars(node)}
        fns = {"ETA": lambda *a: float(sum(a))}
        try:
            v1 = expr.evaluate(node, env, fns)
            v2 = expr.evaluate(again, env, fns)
            assert v1 == v2
        except EvalError:
            pass


def test_is_evaluable():
    node = expr.parse("x + y")
    assert expr.is_evaluable(node, {"x": 1, "y": 2})
    assert not expr.is_evaluable(node, {"x": 1})


def test_propagate_pins_equality():
    node = expr.parse("p == 3 and v == w + 1")
    doms = {"p": {1, 2, 3}, "v": {4, 5}}
    envs = expr.propagate(node, {}, {"w": 3}, None, doms)
    assert envs == [{"p": 3, "v": 4}]


def test_propagate_prunes_off_domain():
    node = expr.parse("p == 9")
    assert expr.propagate(node, {}, {}, None, {"p": {1, 2}}) == []


def test_propagate_branches_on_or():
    node = expr.parse("p == 1 or p == 2")
    envs = expr.propagate(node, {}, {}, None, {"p": {1, 2, 3}})
    assert {e["p"] for e in envs} == {1, 2}


def test_propagate_keeps_unresolved_free_vars():
    # nothing pins q, so the env comes back untouched for later enumeration
    node = expr.parse("q > 1")
    assert expr.propagate(node, {}, {}, None, {"q": {1, 2, 3}}) == [{}]


def test_propagate_false_conjunct_prunes():
    node = expr.parse("1 == 2 and p == 1")
    assert expr.propagate(node, {}, {}, None, {"p": {1}}) == []


def test_chain_env_layering():
    env = expr.chain_env({"x": 1}, {"x": 2, "y": 3})
    assert env["x"] == 1
    assert env["y"] == 3
    assert set(env) == {"x", "y"}
    assert len(env) == 2
