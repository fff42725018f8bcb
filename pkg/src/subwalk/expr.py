"""Small symbolic expression language for operator coefficients.

Grammar (whitespace ignored)::

    expr     := term (('+' | '-') term)*
    term     := unary (('*' | '/') unary)*
    unary    := '-' unary | power
    power    := atom ('^' exponent)*
    exponent := '-'? atom            # must be a nonnegative integer literal
    atom     := NUMBER | 'pi' | VAR | FUNC '(' expr ')' | '(' expr ')'

VAR is ``x1 .. xn`` and FUNC is one of ``sin``, ``cos``, ``exp``.  Nodes are
frozen dataclasses so structural equality is ordinary ``==``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr", "Num", "Pi", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow", "Func",
    "ExprError", "ExprSyntaxError", "UnknownIdentifier", "NonIntegerExponent", "EvalError",
    "parse", "evaluate", "diff", "to_string", "num_vars", "const",
]

FUNCS = ("sin", "cos", "exp")


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifier(ExprError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class NonIntegerExponent(ExprError):
    def __init__(self, offset: int):
        super().__init__(f"exponent must be a nonnegative integer literal at offset {offset}")
        self.offset = offset


class EvalError(ArithmeticError):
    """Raised on division by zero during evaluation."""


# ---------------------------------------------------------------- nodes

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Pi:
    pass


@dataclass(frozen=True)
class Var:
    index: int  # zero based, printed as x{index+1}


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Expr"


Expr = Union[Num, Pi, Var, Neg, Add, Sub, Mul, Div, Pow, Func]


# ---------------------------------------------------------------- lexer

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n_vars: int | None):
        self.tokens = _tokenize(text)
        self.i = 0
        self.n_vars = n_vars

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.take()
        if val != value or kind == "end":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", off)

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = Add(e, rhs) if op == "+" else Sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            e = Mul(e, rhs) if op == "*" else Div(e, rhs)
        return e

    def unary(self) -> Expr:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return _neg_literal(self.unary())
        return self.power()

    def power(self) -> Expr:
        e = self.atom()
        while self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            off = self.peek()[2]
            if self.peek()[0] == "op" and self.peek()[1] == "-":
                self.take()
                ex = _neg_literal(self.atom())
            else:
                ex = self.atom()
            if not isinstance(ex, Num) or ex.value < 0 or ex.value != int(ex.value):
                raise NonIntegerExponent(off)
            e = Pow(e, int(ex.value))
        return e

    def atom(self) -> Expr:
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if val == "pi":
                return Pi()
            if val in FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(val, arg)
            m = re.fullmatch(r"x([1-9]\d*)", val)
            if m:
                k = int(m.group(1))
                if self.n_vars is None or k <= self.n_vars:
                    return Var(k - 1)
            raise UnknownIdentifier(val, off)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", off)


def _neg_literal(e: Expr) -> Expr:
    # a minus sign in front of a literal is folded so that printing round trips
    if isinstance(e, Num):
        return Num(-e.value)
    return Neg(e)


def parse(text: str, n_vars: int | None = None) -> Expr:
    """Parse ``text``; identifiers ``x<k>`` with ``k > n_vars`` are rejected."""
    return _Parser(text, n_vars).parse()


def const(value: float) -> Num:
    return Num(float(value))


# ---------------------------------------------------------------- evaluation

def evaluate(e: Expr, x) -> np.ndarray:
    """Evaluate at points ``x`` of shape ``(..., n)``; returns shape ``(...)``."""
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(_eval(e, x), x.shape[:-1]).astype(float, copy=True)


def _eval(e: Expr, x: np.ndarray):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Pi):
        return math.pi
    if isinstance(e, Var):
        if e.index >= x.shape[-1]:
            raise EvalError(f"x{e.index + 1} is out of range for {x.shape[-1]} variables")
        return x[..., e.index]
    if isinstance(e, Neg):
        return -_eval(e.arg, x)
    if isinstance(e, Add):
        return _eval(e.left, x) + _eval(e.right, x)
    if isinstance(e, Sub):
        return _eval(e.left, x) - _eval(e.right, x)
    if isinstance(e, Mul):
        return _eval(e.left, x) * _eval(e.right, x)
    if isinstance(e, Div):
        den = _eval(e.right, x)
        if np.any(np.asarray(den) == 0):
            raise EvalError("division by zero")
        return _eval(e.left, x) / den
    if isinstance(e, Pow):
        return _eval(e.base, x) ** e.exponent
    if isinstance(e, Func):
        return getattr(np, e.name)(_eval(e.arg, x))
    raise TypeError(f"not an expression: {e!r}")


def num_vars(e: Expr) -> int:
    """One plus the largest variable index used (0 for constants)."""
    if isinstance(e, Var):
        return e.index + 1
    if isinstance(e, (Num, Pi)):
        return 0
    if isinstance(e, (Neg, Func)):
        return num_vars(e.arg)
    if isinstance(e, Pow):
        return num_vars(e.base)
    return max(num_vars(e.left), num_vars(e.right))


# ---------------------------------------------------------------- simplifying constructors

def _is(e: Expr, v: float) -> bool:
    return isinstance(e, Num) and e.value == v


def neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is(b, 0):
        return a
    if _is(a, 0):
        return neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is(a, 0) or _is(b, 0):
        return Num(0.0)
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if _is(a, -1):
        return neg(b)
    if _is(b, -1):
        return neg(a)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is(b, 1):
        return a
    if _is(a, 0) and not _is(b, 0):
        return Num(0.0)
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0:
        return Num(a.value / b.value)
    return Div(a, b)


def power(a: Expr, k: int) -> Expr:
    if k == 0:
        return Num(1.0)
    if k == 1:
        return a
    if isinstance(a, Num):
        return Num(a.value ** k)
    return Pow(a, k)


# ---------------------------------------------------------------- differentiation

def diff(e: Expr, k: int) -> Expr:
    """Symbolic partial derivative with respect to ``x{k+1}``."""
    if isinstance(e, (Num, Pi)):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0 if e.index == k else 0.0)
    if isinstance(e, Neg):
        return neg(diff(e.arg, k))
    if isinstance(e, Add):
        return add(diff(e.left, k), diff(e.right, k))
    if isinstance(e, Sub):
        return sub(diff(e.left, k), diff(e.right, k))
    if isinstance(e, Mul):
        return add(mul(diff(e.left, k), e.right), mul(e.left, diff(e.right, k)))
    if isinstance(e, Div):
        da, db = diff(e.left, k), diff(e.right, k)
        if _is(db, 0):
            return div(da, e.right)
        return div(sub(mul(da, e.right), mul(e.left, db)), power(e.right, 2))
    if isinstance(e, Pow):
        return mul(mul(Num(float(e.exponent)), power(e.base, e.exponent - 1)), diff(e.base, k))
    if isinstance(e, Func):
        inner = diff(e.arg, k)
        if e.name == "sin":
            outer = Func("cos", e.arg)
        elif e.name == "cos":
            outer = neg(Func("sin", e.arg))
        else:
            outer = e
        return mul(outer, inner)
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------- printing

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _num_str(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        s = str(int(v))
    else:
        s = repr(float(v))
    return s


def _prec(e: Expr) -> int:
    if isinstance(e, Num) and e.value < 0:
        return 3
    return _PREC.get(type(e), 5)


def to_string(e: Expr) -> str:
    """Render ``e`` so that ``parse(to_string(e)) == e``."""
    if isinstance(e, Num):
        return _num_str(e.value)
    if isinstance(e, Pi):
        return "pi"
    if isinstance(e, Var):
        return f"x{e.index + 1}"
    if isinstance(e, Func):
        return f"{e.name}({to_string(e.arg)})"
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        # a literal or a unary minus under Neg would be folded by the parser
        if _prec(e.arg) <= 3 or isinstance(e.arg, Num):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Pow):
        base = to_string(e.base)
        if _prec(e.base) < 4 or isinstance(e.base, Num):
            base = f"({base})"
        return f"{base}^{e.exponent}"
    p = _PREC[type(e)]
    op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
    left = to_string(e.left)
    if _prec(e.left) < p:
        left = f"({left})"
    right = to_string(e.right)
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {op} {right}"
