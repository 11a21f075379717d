"""Scalar coefficient expressions in one variable ``x``.

Expressions are small immutable trees.  They can be parsed from text,
printed back, evaluated on floats or numpy arrays, and differentiated
exactly to any order.  Polynomials are recognised structurally so their
degree (and global extrema) can be computed exactly.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := base ('^' ['-'] integer)?
    base   := number | 'x' | func '(' expr ')' | '(' expr ')'
    func   := 'exp' | 'sin' | 'cos' | 'tanh'

Unary minus binds looser than ``^`` so ``-x^2`` is ``-(x^2)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np
from numpy.polynomial import polynomial as P

ArrayLike = Union[float, np.ndarray]

FUNCTIONS = ("exp", "sin", "cos", "tanh")


class ExprError(ValueError):
    pass


class ParseError(ExprError):
    """Syntax error; ``offset`` is the byte offset into the source."""

    def __init__(self, message: str, offset: int, source: str = ""):
        self.offset = offset
        self.source = source
        super().__init__(f"{message} at offset {offset}")


class DomainError(ArithmeticError):
    """Evaluation at a point where a denominator vanishes."""


class Expr:
    """Base class for expression nodes."""

    __slots__ = ()

    def __call__(self, x: ArrayLike) -> ArrayLike:
        return evaluate(self, x)

    def __str__(self) -> str:
        return to_text(self)

    # operator sugar, mostly for tests and building g(a) in the checkers
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, n: int):
        return power(self, n)


@dataclass(frozen=True, eq=True, repr=True)
class Const(Expr):
    value: float


@dataclass(frozen=True, eq=True, repr=True)
class Var(Expr):
    pass


@dataclass(frozen=True, eq=True, repr=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True, eq=True, repr=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True, repr=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True, repr=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True, repr=True)
class Div(Expr):
    # the denominator may vanish; evaluation there raises DomainError
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True, repr=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True, eq=True, repr=True)
class Func(Expr):
    name: str
    arg: Expr

    def __post_init__(self):
        if self.name not in FUNCTIONS:
            raise ExprError(f"unknown function {self.name!r}")


X = Var()
ZERO = Const(0.0)
ONE = Const(1.0)


def _lift(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float)):
        return Const(float(v))
    raise TypeError(f"cannot convert {type(v).__name__} to Expr")


# ---------------------------------------------------------------------------
# smart constructors: constant folding and zero/one elimination only


def _is_const(e: Expr, value: Optional[float] = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and isinstance(b, Const) and b.value != 0.0:
        return ZERO
    return Div(a, b)


def power(a: Expr, n: int) -> Expr:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const):
        if a.value == 0.0 and n < 0:
            return Pow(a, n)
        return Const(a.value ** n)
    return Pow(a, n)


def func(name: str, a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(float(_SCALAR_FUNCS[name](a.value)))
    return Func(name, a)


_SCALAR_FUNCS = {"exp": math.exp, "sin": math.sin, "cos": math.cos, "tanh": math.tanh}
_ARRAY_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "tanh": np.tanh}


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
)


class _Parser:
    def __init__(self, source: str):
        self.src = source
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(source):
            if source[pos:].strip() == "":
                break
            m = _TOKEN.match(source, pos)
            if m is None or m.end() == pos:
                off = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
                raise ParseError(f"unexpected character {source[off]!r}", _byte_offset(source, off), source)
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.i = 0

    def _peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def _offset(self) -> int:
        tok = self._peek()
        char_off = tok[2] if tok else len(self.src)
        return _byte_offset(self.src, char_off)

    def _fail(self, message: str):
        raise ParseError(message, self._offset(), self.src)

    def _take(self, value: Optional[str] = None):
        tok = self._peek()
        if tok is None:
            self._fail("unexpected end of input" if value is None else f"expected {value!r}")
        if value is not None and tok[1] != value:
            self._fail(f"expected {value!r}, found {tok[1]!r}")
        self.i += 1
        return tok

    def parse(self) -> Expr:
        if not self.tokens:
            self._fail("empty expression")
        e = self.expr()
        if self._peek() is not None:
            self._fail(f"unexpected token {self._peek()[1]!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while (tok := self._peek()) is not None and tok[1] in "+-" and tok[0] == "op":
            self.i += 1
            rhs = self.term()
            e = Add(e, rhs) if tok[1] == "+" else Sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.factor()
        while (tok := self._peek()) is not None and tok[0] == "op" and tok[1] in "*/":
            self.i += 1
            rhs = self.factor()
            e = Mul(e, rhs) if tok[1] == "*" else Div(e, rhs)
        return e

    def factor(self) -> Expr:
        tok = self._peek()
        if tok is not None and tok[0] == "op" and tok[1] == "-":
            self.i += 1
            return Neg(self.factor())
        return self.power()

    def power(self) -> Expr:
        b = self.base()
        tok = self._peek()
        if tok is not None and tok[0] == "op" and tok[1] == "^":
            self.i += 1
            sign = 1
            tok = self._peek()
            if tok is not None and tok[0] == "op" and tok[1] == "-":
                self.i += 1
                sign = -1
            tok = self._peek()
            if tok is None or tok[0] != "num" or not tok[1].isdigit():
                self._fail("exponent must be an integer")
            self.i += 1
            return Pow(b, sign * int(tok[1]))
        return b

    def base(self) -> Expr:
        tok = self._peek()
        if tok is None:
            self._fail("unexpected end of input")
        kind, text, _ = tok
        if kind == "num":
            self.i += 1
            return Const(float(text))
        if kind == "name":
            if text == "x":
                self.i += 1
                return X
            if text in FUNCTIONS:
                self.i += 1
                self._take("(")
                inner = self.expr()
                self._take(")")
                return Func(text, inner)
            self._fail(f"unknown name {text!r}")
        if text == "(":
            self.i += 1
            inner = self.expr()
            self._take(")")
            return inner
        self._fail(f"unexpected token {text!r}")


def _byte_offset(source: str, char_offset: int) -> int:
    return len(source[:char_offset].encode("utf-8"))


def parse(source: str) -> Expr:
    """Parse expression text into an :class:`Expr` tree (no simplification)."""
    return _Parser(source).parse()


# ---------------------------------------------------------------------------
# printing

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _prec(e: Expr) -> int:
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return 3
    return _PREC.get(type(e), 5)


def _fmt_const(v: float) -> str:
    if v < 0 or math.copysign(1.0, v) < 0:
        return "-" + _fmt_const(-v)
    s = repr(float(v))
    if "inf" in s or "nan" in s:
        raise ExprError(f"cannot print non-finite constant {v}")
    return s


def to_text(e: Expr) -> str:
    """Render ``e`` in the parse grammar; ``parse(to_text(e))`` evaluates like ``e``."""

    def wrap(child: Expr, min_prec: int) -> str:
        s = to_text(child)
        return f"({s})" if _prec(child) < min_prec else s

    if isinstance(e, Const):
        return _fmt_const(e.value)
    if isinstance(e, Var):
        return "x"
    if isinstance(e, Neg):
        return "-" + wrap(e.arg, 3)
    if isinstance(e, Add):
        return f"{wrap(e.left, 1)} + {wrap(e.right, 2)}"
    if isinstance(e, Sub):
        return f"{wrap(e.left, 1)} - {wrap(e.right, 2)}"
    if isinstance(e, Mul):
        return f"{wrap(e.left, 2)}*{wrap(e.right, 3)}"
    if isinstance(e, Div):
        return f"{wrap(e.left, 2)}/{wrap(e.right, 3)}"
    if isinstance(e, Pow):
        return f"{wrap(e.base, 5)}^{e.exponent}" if e.exponent >= 0 else f"{wrap(e.base, 5)}^-{-e.exponent}"
    if isinstance(e, Func):
        return f"{e.name}({to_text(e.arg)})"
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# evaluation


def compile_expr(e: Expr) -> Callable[[ArrayLike], ArrayLike]:
    """Build a closure evaluating ``e`` on floats or numpy arrays."""
    if isinstance(e, Const):
        v = e.value

        def f(x):
            if isinstance(x, np.ndarray):
                return np.full(x.shape, v)
            return v

        return f
    if isinstance(e, Var):
        return lambda x: x
    if isinstance(e, Neg):
        a = compile_expr(e.arg)
        return lambda x: -a(x)
    if isinstance(e, (Add, Sub, Mul)):
        a, b = compile_expr(e.left), compile_expr(e.right)
        if isinstance(e, Add):
            return lambda x: a(x) + b(x)
        if isinstance(e, Sub):
            return lambda x: a(x) - b(x)
        return lambda x: a(x) * b(x)
    if isinstance(e, Div):
        a, b = compile_expr(e.left), compile_expr(e.right)

        def f(x):
            den = b(x)
            if np.any(np.asarray(den) == 0.0):
                raise DomainError(f"denominator {to_text(e.right)} vanishes")
            return a(x) / den

        return f
    if isinstance(e, Pow):
        a, n = compile_expr(e.base), e.exponent

        def f(x):
            base = a(x)
            if n < 0:
                if np.any(np.asarray(base) == 0.0):
                    raise DomainError(f"{to_text(e.base)} vanishes under a negative power")
                return 1.0 / base ** (-n)
            return base ** n

        return f
    if isinstance(e, Func):
        a = compile_expr(e.arg)
        fa, fs = _ARRAY_FUNCS[e.name], _SCALAR_FUNCS[e.name]

        def f(x):
            v = a(x)
            if isinstance(v, np.ndarray):
                return fa(v)
            return fs(v)

        return f
    raise TypeError(type(e))


@lru_cache(maxsize=4096)
def _compiled(e: Expr):
    return compile_expr(e)


def evaluate(e: Expr, x: ArrayLike) -> ArrayLike:
    if isinstance(x, (int, np.integer)):
        x = float(x)
    with np.errstate(over="ignore", invalid="ignore"):
        return _compiled(e)(x)


# ---------------------------------------------------------------------------
# differentiation


def _d(e: Expr) -> Expr:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Neg):
        return neg(_d(e.arg))
    if isinstance(e, Add):
        return add(_d(e.left), _d(e.right))
    if isinstance(e, Sub):
        return sub(_d(e.left), _d(e.right))
    if isinstance(e, Mul):
        u, v = e.left, e.right
        return add(mul(_d(u), v), mul(u, _d(v)))
    if isinstance(e, Div):
        u, v = e.left, e.right
        return div(sub(mul(_d(u), v), mul(u, _d(v))), power(v, 2))
    if isinstance(e, Pow):
        n = e.exponent
        return mul(mul(Const(float(n)), power(e.base, n - 1)), _d(e.base))
    if isinstance(e, Func):
        inner = _d(e.arg)
        if e.name == "exp":
            outer = e
        elif e.name == "sin":
            outer = func("cos", e.arg)
        elif e.name == "cos":
            outer = neg(func("sin", e.arg))
        else:
            outer = sub(ONE, power(e, 2))
        return mul(outer, inner)
    raise TypeError(type(e))


@lru_cache(maxsize=4096)
def diff(e: Expr, order: int = 1) -> Expr:
    """Exact derivative of ``e`` of the given order."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    if order == 0:
        return e
    return _d(diff(e, order - 1))


# ---------------------------------------------------------------------------
# polynomials


def to_poly(e: Expr) -> Optional[np.ndarray]:
    """Coefficients (lowest degree first) if ``e`` is a polynomial, else None."""
    if isinstance(e, Const):
        return np.array([e.value])
    if isinstance(e, Var):
        return np.array([0.0, 1.0])
    if isinstance(e, Neg):
        a = to_poly(e.arg)
        return None if a is None else -a
    if isinstance(e, (Add, Sub, Mul)):
        a, b = to_poly(e.left), to_poly(e.right)
        if a is None or b is None:
            return None
        if isinstance(e, Add):
            return P.polyadd(a, b)
        if isinstance(e, Sub):
            return P.polysub(a, b)
        return P.polymul(a, b)
    if isinstance(e, Div):
        a, b = to_poly(e.left), to_poly(e.right)
        if a is None or b is None:
            return None
        b = _trim(b)
        if len(b) == 1 and b[0] != 0.0:
            return a / b[0]
        return None
    if isinstance(e, Pow):
        if e.exponent < 0:
            base = to_poly(e.base)
            if base is not None and len(_trim(base)) == 1 and base[0] != 0.0:
                return np.array([base[0] ** e.exponent])
            return None
        a = to_poly(e.base)
        return None if a is None else P.polypow(a, e.exponent)
    if isinstance(e, Func):
        a = to_poly(e.arg)
        if a is not None and len(_trim(a)) == 1:
            return np.array([_SCALAR_FUNCS[e.name](a[0])])
        return None
    raise TypeError(type(e))


def _trim(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    nz = np.flatnonzero(c != 0.0)
    return c[: nz[-1] + 1] if nz.size else np.array([0.0])


def poly_coeffs(e: Expr) -> Optional[np.ndarray]:
    c = to_poly(e)
    return None if c is None else _trim(c)


def poly_degree(e: Expr) -> Optional[int]:
    """Exact degree of a polynomial expression; None when non-polynomial."""
    c = poly_coeffs(e)
    return None if c is None else len(c) - 1
