"""Symbolic expressions over partial action-angle chart variables.

Expressions are immutable trees built from constants, chart variables
(I1.., z1.., phi1..), the unary operators neg/sin/cos/exp and the binary
operators + - * / ^, with ^ restricted to integer constant exponents so
that differentiation stays closed under the node set.  Hamiltonians,
bracket results and vector-field components are all values of this type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Callable, Iterable, Mapping

import numpy as np

if TYPE_CHECKING:
    from .geometry import ChartSpec

__all__ = [
    "Expr", "Constant", "Variable", "Unary", "Binary",
    "ExprError", "ParseError", "UnknownVariableError", "MissingBindingError",
    "parse", "evaluate", "diff", "simplify_fold", "free_vars", "to_source",
    "is_zero", "compile_evaluator", "py_source",
    "const", "var", "add", "sub", "mul", "div", "pow_", "neg", "sin", "cos", "exp",
]

UNARY_OPS = ("neg", "sin", "cos", "exp")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")
FUNCTIONS = ("sin", "cos", "exp")


class ExprError(Exception):
    pass


class ParseError(ExprError):
    """Syntax error with source position and the token class expected there."""

    def __init__(self, message: str, position: int, expected: str | None = None):
        super().__init__(f"{message} at position {position}"
                         + (f" (expected {expected})" if expected else ""))
        self.position = position
        self.expected = expected


class UnknownVariableError(ParseError):
    """Identifier not in the chart's symbol set."""

    def __init__(self, name: str, position: int = 0):
        ParseError.__init__(self, f"unknown variable {name!r}", position, None)
        self.name = name


class MissingBindingError(ExprError):
    def __init__(self, name: str):
        super().__init__(f"no value bound for variable {name!r}")
        self.name = name


@dataclass(frozen=True)
class Expr:
    """Base node; concrete nodes are Constant, Variable, Unary, Binary."""

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Constant(Expr):
    value: float


@dataclass(frozen=True)
class Variable(Expr):
    name: str


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    child: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


ZERO = Constant(0.0)
ONE = Constant(1.0)


# ---------------------------------------------------------------------------
# construction helpers

def const(v: float) -> Constant:
    return Constant(float(v))


def var(name: str) -> Variable:
    return Variable(name)


def add(a: Expr, b: Expr) -> Binary:
    return Binary("add", a, b)


def sub(a: Expr, b: Expr) -> Binary:
    return Binary("sub", a, b)


def mul(a: Expr, b: Expr) -> Binary:
    return Binary("mul", a, b)


def div(a: Expr, b: Expr) -> Binary:
    return Binary("div", a, b)


def pow_(base: Expr, exponent: int) -> Binary:
    if exponent != int(exponent):
        raise ExprError("power exponent must be an integer constant")
    return Binary("pow", base, Constant(float(int(exponent))))


def neg(a: Expr) -> Unary:
    return Unary("neg", a)


def sin(a: Expr) -> Unary:
    return Unary("sin", a)


def cos(a: Expr) -> Unary:
    return Unary("cos", a)


def exp(a: Expr) -> Unary:
    return Unary("exp", a)


# ---------------------------------------------------------------------------
# tokenizer / parser
#
# expr   := term (('+'|'-') term)*
# term   := factor (('*'|'/') factor)*
# factor := '-' factor | base ('^' integer)?
# base   := number | ident | func '(' expr ')' | '(' expr ')'
#
# Unary minus sits between '^' and '*'/'/' in binding strength, so
# "-I1^2" is -(I1^2) while "(-I1)^2" squares the negation.

_OPERATOR_CHARS = "+-*/^()"


def _tokenize(source: str) -> list[tuple[str, object, int]]:
    tokens: list[tuple[str, object, int]] = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c in _OPERATOR_CHARS:
            tokens.append(("op", c, i))
            i += 1
            continue
        if c.isdigit():
            j = i
            while j < n and source[j].isdigit():
                j += 1
            is_int = True
            if j < n and source[j] == ".":
                is_int = False
                j += 1
                while j < n and source[j].isdigit():
                    j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    is_int = False
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            tokens.append(("num", (float(source[i:j]), is_int), i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(("ident", source[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("eof", None, n))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, object, int]], symbols: frozenset[str]):
        self.tokens = tokens
        self.pos = 0
        self.symbols = symbols

    def peek(self) -> tuple[str, object, int]:
        return self.tokens[self.pos]

    def advance(self) -> tuple[str, object, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op: str) -> None:
        kind, value, position = self.peek()
        if kind != "op" or value != op:
            raise ParseError(f"unexpected token {value!r}", position, expected=repr(op))
        self.advance()

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.advance()
                rhs = self.parse_term()
                node = Binary("add" if value == "+" else "sub", node, rhs)
            else:
                return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.advance()
                rhs = self.parse_factor()
                node = Binary("mul" if value == "*" else "div", node, rhs)
            else:
                return node

    def parse_factor(self) -> Expr:
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.advance()
            return Unary("neg", self.parse_factor())
        node = self.parse_base()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            self.advance()
            node = Binary("pow", node, Constant(self.parse_integer()))
        return node

    def parse_integer(self) -> float:
        sign = 1.0
        kind, value, position = self.peek()
        if kind == "op" and value == "-":
            self.advance()
            sign = -1.0
            kind, value, position = self.peek()
        if kind != "num" or not value[1]:
            raise ParseError("power exponent must be an integer literal",
                             position, expected="integer")
        self.advance()
        return sign * value[0]

    def parse_base(self) -> Expr:
        kind, value, position = self.advance()
        if kind == "num":
            return Constant(value[0])
        if kind == "ident":
            if value in FUNCTIONS:
                self.expect_op("(")
                inner = self.parse_expr()
                self.expect_op(")")
                return Unary(value, inner)
            if value not in self.symbols:
                raise UnknownVariableError(value, position)
            return Variable(value)
        if kind == "op" and value == "(":
            inner = self.parse_expr()
            self.expect_op(")")
            return inner
        raise ParseError(f"unexpected token {value!r}", position,
                         expected="number, variable or '('")


def parse(source: str, chart: "ChartSpec") -> Expr:
    """Parse infix source text into an Expr, validating identifiers
    against the chart's symbol set."""
    parser = _Parser(_tokenize(source), chart.symbol_set)
    node = parser.parse_expr()
    kind, value, position = parser.peek()
    if kind != "eof":
        raise ParseError(f"trailing input {value!r}", position, expected="end of input")
    return node


# ---------------------------------------------------------------------------
# evaluation

def _apply_unary(op: str, x: float) -> float:
    if op == "neg":
        return -x
    if op == "sin":
        return math.sin(x)
    if op == "cos":
        return math.cos(x)
    if op == "exp":
        try:
            return math.exp(x)
        except OverflowError:
            return math.inf
    raise ExprError(f"unknown unary op {op!r}")


def _apply_binary(op: str, a: float, b: float) -> float:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b  # ZeroDivisionError propagates
    if op == "pow":
        return a ** int(b)  # ZeroDivisionError for 0^negative
    raise ExprError(f"unknown binary op {op!r}")


def evaluate(e: Expr, binding: Mapping[str, float]) -> float:
    """Evaluate in IEEE double precision under the given variable binding."""
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Variable):
        try:
            return float(binding[e.name])
        except KeyError:
            raise MissingBindingError(e.name) from None
    if isinstance(e, Unary):
        return _apply_unary(e.op, evaluate(e.child, binding))
    if isinstance(e, Binary):
        return _apply_binary(e.op, evaluate(e.left, binding), evaluate(e.right, binding))
    raise ExprError(f"not an Expr node: {e!r}")


# ---------------------------------------------------------------------------
# folding

def _is_const(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Constant) and (value is None or e.value == value)


def _exact_product(a: float, b: float) -> bool:
    return Fraction(a) * Fraction(b) == Fraction(a * b)


def _exact_quotient(a: float, b: float) -> bool:
    return Fraction(a) / Fraction(b) == Fraction(a / b)


def _strip_neg(e: Expr) -> tuple[Expr, bool]:
    flipped = False
    while isinstance(e, Unary) and e.op == "neg":
        e = e.child
        flipped = not flipped
    return e, flipped


def _mk_neg(e: Expr) -> Expr:
    if isinstance(e, Constant):
        return Constant(-e.value)
    inner, flipped = _strip_neg(e)
    return inner if flipped else Unary("neg", inner)


def _mk_add(l: Expr, r: Expr) -> Expr:
    if isinstance(l, Constant) and isinstance(r, Constant):
        return Constant(l.value + r.value)
    if _is_const(l, 0.0):
        return r
    if _is_const(r, 0.0):
        return l
    return Binary("add", l, r)


def _mk_sub(l: Expr, r: Expr) -> Expr:
    if isinstance(l, Constant) and isinstance(r, Constant):
        return Constant(l.value - r.value)
    if _is_const(r, 0.0):
        return l
    if _is_const(l, 0.0):
        return _mk_neg(r)
    return Binary("sub", l, r)


def _mk_mul(l: Expr, r: Expr) -> Expr:
    if _is_const(l, 0.0) or _is_const(r, 0.0):
        return ZERO
    if _is_const(l, 1.0):
        return r
    if _is_const(r, 1.0):
        return l
    l, lneg = _strip_neg(l)
    r, rneg = _strip_neg(r)
    flip = lneg != rneg
    if isinstance(l, Constant) and isinstance(r, Constant):
        out: Expr = Constant(l.value * r.value)
        return _mk_neg(out) if flip else out
    # normalize a single constant factor to the left; exact for IEEE mul
    if isinstance(r, Constant):
        l, r = r, l
    if isinstance(l, Constant):
        # merge with a nested constant coefficient only when the combined
        # constant is exactly representable (reassociation stays bit-exact
        # for the dyadic constants that occur in practice)
        if (isinstance(r, Binary) and r.op == "mul" and isinstance(r.left, Constant)
                and _exact_product(l.value, r.left.value)):
            merged = _mk_mul(Constant(l.value * r.left.value), r.right)
            return _mk_neg(merged) if flip else merged
        if _is_const(l, 1.0):
            return _mk_neg(r) if flip else r
    out = Binary("mul", l, r)
    return _mk_neg(out) if flip else out


def _mk_div(l: Expr, r: Expr) -> Expr:
    if _is_const(r, 0.0):
        raise ZeroDivisionError("constant zero denominator")
    if _is_const(r, 1.0):
        return l
    l, lneg = _strip_neg(l)
    r, rneg = _strip_neg(r)
    flip = lneg != rneg
    if isinstance(l, Constant) and isinstance(r, Constant):
        out: Expr = Constant(l.value / r.value)
        return _mk_neg(out) if flip else out
    if isinstance(r, Constant):
        if (isinstance(l, Binary) and l.op == "mul" and isinstance(l.left, Constant)
                and _exact_quotient(l.left.value, r.value)):
            merged = _mk_mul(Constant(l.left.value / r.value), l.right)
            return _mk_neg(merged) if flip else merged
        if isinstance(l, Constant) and _exact_quotient(l.value, r.value):
            out = Constant(l.value / r.value)
            return _mk_neg(out) if flip else out
    out = Binary("div", l, r)
    return _mk_neg(out) if flip else out


def _mk_pow(base: Expr, exponent: Constant) -> Expr:
    n = int(exponent.value)
    if n == 0:
        return ONE
    if n == 1:
        return base
    if isinstance(base, Constant):
        return Constant(_apply_binary("pow", base.value, float(n)))
    return Binary("pow", base, Constant(float(n)))


def simplify_fold(e: Expr) -> Expr:
    """Fold constant subtrees and apply the exact identities
    x+0, x-0, x*1, x*0, x/1, x^1, x^0 and double negation."""
    if isinstance(e, (Constant, Variable)):
        return e
    if isinstance(e, Unary):
        child = simplify_fold(e.child)
        if e.op == "neg":
            return _mk_neg(child)
        if isinstance(child, Constant):
            return Constant(_apply_unary(e.op, child.value))
        return Unary(e.op, child)
    if isinstance(e, Binary):
        left = simplify_fold(e.left)
        right = simplify_fold(e.right)
        if e.op == "add":
            return _mk_add(left, right)
        if e.op == "sub":
            return _mk_sub(left, right)
        if e.op == "mul":
            return _mk_mul(left, right)
        if e.op == "div":
            return _mk_div(left, right)
        if e.op == "pow":
            assert isinstance(right, Constant)
            return _mk_pow(left, right)
    raise ExprError(f"not an Expr node: {e!r}")


# ---------------------------------------------------------------------------
# differentiation

def diff(e: Expr, name: str) -> Expr:
    """Exact symbolic partial derivative with respect to a chart variable,
    constant-folded."""
    return simplify_fold(_diff(e, name))


def _diff(e: Expr, name: str) -> Expr:
    if isinstance(e, Constant):
        return ZERO
    if isinstance(e, Variable):
        return ONE if e.name == name else ZERO
    if isinstance(e, Unary):
        du = _diff(e.child, name)
        if e.op == "neg":
            return neg(du)
        if e.op == "sin":
            return mul(cos(e.child), du)
        if e.op == "cos":
            return neg(mul(sin(e.child), du))
        if e.op == "exp":
            return mul(e, du)
    if isinstance(e, Binary):
        if e.op == "add":
            return add(_diff(e.left, name), _diff(e.right, name))
        if e.op == "sub":
            return sub(_diff(e.left, name), _diff(e.right, name))
        if e.op == "mul":
            return add(mul(_diff(e.left, name), e.right),
                       mul(e.left, _diff(e.right, name)))
        if e.op == "div":
            if isinstance(e.right, Constant):
                return div(_diff(e.left, name), e.right)
            return div(sub(mul(_diff(e.left, name), e.right),
                           mul(e.left, _diff(e.right, name))),
                       Binary("pow", e.right, Constant(2.0)))
        if e.op == "pow":
            n = e.right
            assert isinstance(n, Constant)
            if n.value == 0.0:
                return ZERO
            return mul(mul(n, Binary("pow", e.left, Constant(n.value - 1.0))),
                       _diff(e.left, name))
    raise ExprError(f"not an Expr node: {e!r}")


# ---------------------------------------------------------------------------
# queries

def free_vars(e: Expr) -> frozenset[str]:
    """Variable names occurring in the folded tree."""
    names: set[str] = set()
    _collect_vars(simplify_fold(e), names)
    return frozenset(names)


def _collect_vars(e: Expr, out: set[str]) -> None:
    if isinstance(e, Variable):
        out.add(e.name)
    elif isinstance(e, Unary):
        _collect_vars(e.child, out)
    elif isinstance(e, Binary):
        _collect_vars(e.left, out)
        _collect_vars(e.right, out)


def is_zero(e: Expr, chart: "ChartSpec", n_samples: int = 100,
            seed: int = 0, tol: float = 1e-12) -> bool:
    """Identically-zero test: fold to the constant 0, or vanish within tol
    at uniform random chart points.  Full symbolic zero testing is out of
    reach, so this is deliberately a sampling decision."""
    folded = simplify_fold(e)
    if _is_const(folded, 0.0):
        return True
    names = free_vars(folded)
    if not names:
        return abs(evaluate(folded, {})) <= tol
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        binding = chart.sample_binding(rng)
        try:
            value = evaluate(folded, binding)
        except ZeroDivisionError:
            return False
        if not math.isfinite(value) or abs(value) > tol:
            return False
    return True


# ---------------------------------------------------------------------------
# printing

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _precedence(e: Expr) -> int:
    if isinstance(e, (Variable,)):
        return _PREC_ATOM
    if isinstance(e, Constant):
        return _PREC_ATOM if e.value >= 0 else _PREC_NEG
    if isinstance(e, Unary):
        return _PREC_NEG if e.op == "neg" else _PREC_ATOM
    assert isinstance(e, Binary)
    if e.op in ("add", "sub"):
        return _PREC_ADD
    if e.op in ("mul", "div"):
        return _PREC_MUL
    return _PREC_POW


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_source(e: Expr) -> str:
    """Render to grammar-compatible infix text; parse(to_source(e)) yields a
    tree evaluating identically."""
    return _print(e)


def _print(e: Expr) -> str:
    if isinstance(e, Constant):
        return _fmt_const(e.value)
    if isinstance(e, Variable):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            child = _print(e.child)
            if _precedence(e.child) < _PREC_NEG:
                child = f"({child})"
            return f"-{child}"
        return f"{e.op}({_print(e.child)})"
    assert isinstance(e, Binary)
    if e.op == "pow":
        base = _print(e.left)
        if _precedence(e.left) < _PREC_ATOM:
            base = f"({base})"
        return f"{base}^{_fmt_const(e.right.value)}"
    symbol = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}[e.op]
    own = _precedence(e)
    left = _print(e.left)
    if _precedence(e.left) < own:
        left = f"({left})"
    right = _print(e.right)
    # -, / are left associative: parenthesize right children at equal level
    if _precedence(e.right) < own or (
            _precedence(e.right) == own and e.op in ("sub", "div")):
        right = f"({right})"
    return f"{left}{symbol}{right}"


# ---------------------------------------------------------------------------
# code generation

_PY_UNARY = {"sin": "math.sin", "cos": "math.cos", "exp": "math.exp"}
_NP_UNARY = {"sin": "np.sin", "cos": "np.cos", "exp": "np.exp"}


def py_source(e: Expr, rename: Mapping[str, str] | None = None,
              numpy: bool = False) -> str:
    """Render to a Python arithmetic expression (math.* or np.* calls),
    optionally renaming variables."""
    table = _NP_UNARY if numpy else _PY_UNARY

    def go(node: Expr) -> str:
        if isinstance(node, Constant):
            return repr(node.value)
        if isinstance(node, Variable):
            return rename[node.name] if rename else node.name
        if isinstance(node, Unary):
            if node.op == "neg":
                return f"(-{go(node.child)})"
            return f"{table[node.op]}({go(node.child)})"
        assert isinstance(node, Binary)
        if node.op == "pow":
            return f"({go(node.left)})**{int(node.right.value)}"
        symbol = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[node.op]
        return f"({go(node.left)}{symbol}{go(node.right)})"

    return go(e)


def compile_evaluator(exprs: Iterable[Expr], names: Iterable[str]) -> Callable:
    """Compile expressions into one vectorized function of positional
    per-variable arrays, returning a list of results (scalars broadcast)."""
    names = list(names)
    bodies = [py_source(e, numpy=True) for e in exprs]
    args = ", ".join(names) if names else ""
    source = f"def _f({args}):\n    return [{', '.join(bodies)}]\n"
    namespace: dict = {"np": np, "math": math}
    exec(source, namespace)
    return namespace["_f"]
