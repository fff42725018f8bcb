import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subwalk import expr as ex


def test_parse_power():
    assert ex.parse("x1^2") == ex.Pow(ex.Var(0), 2)


def test_parse_periodic_coefficient():
    e = ex.parse("sin(2*pi*x1)^2", n_vars=1)
    x = np.array([[0.1], [1.1]])
    v = ex.evaluate(e, x)
    assert v[0] == pytest.approx(v[1])


@pytest.mark.parametrize("point, expected", [((3.0, 0.0), 9.0), ((0.0, 5.0), 0.0)])
def test_eval_grushin_coefficient(point, expected):
    assert ex.evaluate(ex.parse("x1^2"), np.array(point)) == expected


def test_eval_constant_without_variables():
    assert ex.evaluate(ex.parse("sin(pi/2)"), np.zeros(0)) == pytest.approx(1.0)


def test_precedence_and_unary_minus():
    x = np.array([2.0, 3.0])
    assert ex.evaluate(ex.parse("-x1^2 + x2*2 - 1/4"), x) == pytest.approx(-4 + 6 - 0.25)


def test_power_chains_left_to_right():
    # exponents are integer literals, so a chain applies them in order
    assert ex.evaluate(ex.parse("2^3^2"), np.zeros(1)) == 64.0


@pytest.mark.parametrize("text, offset", [("x1**2", 3), ("x1^1.5", 3), ("foo(x1)", 0), ("x3", 0), ("(x1", 3)])
def test_parse_errors_carry_offset(text, offset):
    with pytest.raises(ex.ExprError) as info:
        ex.parse(text, n_vars=2)
    assert info.value.offset == offset


def test_division_by_zero():
    with pytest.raises(ex.EvalError):
        ex.evaluate(ex.parse("1/x1"), np.array([0.0]))


def test_diff_closed_forms():
    pts = np.linspace(-2, 2, 9)[:, None]
    d = ex.diff(ex.parse("x1^2"), 0)
    assert np.allclose(ex.evaluate(d, pts), 2 * pts[:, 0])
    d = ex.diff(ex.parse("sin(x1)"), 0)
    assert np.allclose(ex.evaluate(d, pts), np.cos(pts[:, 0]))


def test_diff_other_variable_is_zero():
    assert ex.diff(ex.parse("x1^3*cos(x1)"), 1) == ex.Num(0.0)


SAMPLES = ["x1^2*sin(2*pi*x2)", "exp(-x1)*cos(x2)^3", "(x1+x2)/(2+sin(x1))", "sin(pi*x1)^4 - 3*x1*x2"]


@pytest.mark.parametrize("text", SAMPLES)
def test_diff_matches_central_differences(text):
    e = ex.parse(text, 2)
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (100, 2))
    step = 1e-4
    for j in range(2):
        dx = np.zeros(2)
        dx[j] = step
        fd = (ex.evaluate(e, x + dx) - ex.evaluate(e, x - dx)) / (2 * step)
        assert np.max(np.abs(ex.evaluate(ex.diff(e, j), x) - fd)) < 1e-6


atoms = st.sampled_from(["x1", "x2", "pi", "2", "0.5"])


def _join(children):
    return st.one_of(
        st.tuples(children, st.sampled_from("+-*"), children).map(lambda t: f"({t[0]}{t[1]}{t[2]})"),
        st.tuples(st.sampled_from(["sin", "cos"]), children).map(lambda t: f"{t[0]}({t[1]})"),
        st.tuples(children, st.integers(0, 3)).map(lambda t: f"({t[0]})^{t[1]}"),
    )


exprs = st.recursive(atoms, _join, max_leaves=8)


@settings(max_examples=100, deadline=None)
@given(exprs, st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_to_string_round_trip(text, point):
    e = ex.parse(text)
    again = ex.parse(ex.to_string(e))
    x = np.array(point)
    a, b = ex.evaluate(e, x), ex.evaluate(again, x)
    assert math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12)


@settings(max_examples=60, deadline=None)
@given(exprs)
def test_num_vars_bounds_usage(text):
    e = ex.parse(text)
    n = ex.num_vars(e)
    assert n <= 2
    ex.evaluate(e, np.zeros(max(n, 1)))
