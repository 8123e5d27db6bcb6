"""Expression language for target functions and a registry of built-ins.

Grammar::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := unary ('^' factor)?
    unary  := '-' unary | atom
    atom   := number | 'pi' | ident '(' args ')' | var | '(' expr ')'
    var    := 'x' digits

Outputs are separated by ``;``. Inside ``sqnorm`` a bare ``x`` denotes the
whole input vector.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "TargetError",
    "ParseError",
    "DomainError",
    "ExprNode",
    "TargetFunction",
    "parse_target",
    "eval_target",
    "format_expr",
    "builtin",
    "BUILTINS",
]


class TargetError(ValueError):
    """Base class for target-language errors."""


class ParseError(TargetError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at position {pos}")
        self.pos = pos


class DomainError(TargetError, ArithmeticError):
    """Division by zero or a non-finite intermediate during evaluation."""


# name -> (arity, numpy implementation)
_FUNCS: dict[str, tuple[int, Callable]] = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "tanh": (1, np.tanh),
    "abs": (1, np.abs),
    "sqnorm": (1, None),
}
_BINARY = {"+", "-", "*", "/", "^"}


@dataclass(frozen=True)
class ExprNode:
    """Expression tree node.

    ``op`` is one of ``const``, ``var``, ``vec`` (bare ``x``), ``neg``, a
    binary operator symbol, or a function name.  ``value`` holds the constant
    or the 1-based variable index.
    """

    op: str
    children: tuple["ExprNode", ...] = ()
    value: float | int | None = None

    def __post_init__(self):
        if self.op == "const":
            if not math.isfinite(self.value):
                raise TargetError("constants must be finite")
        elif self.op in _BINARY:
            if len(self.children) != 2:
                raise TargetError(f"operator {self.op!r} takes 2 operands")
        elif self.op == "neg" or self.op in _FUNCS:
            if len(self.children) != 1:
                raise TargetError(f"{self.op} takes 1 argument, got {len(self.children)}")

    def variables(self) -> set[int]:
        out = {self.value} if self.op == "var" else set()
        for c in self.children:
            out |= c.variables()
        return out


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^();,]))"
)


def _tokenize(src: str):
    pos, toks = 0, []
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None:
            start = pos + len(src[pos:]) - len(src[pos:].lstrip())
            raise ParseError(f"unexpected character {src[start]!r}", start)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), start))
        pos = m.end()
    toks.append(("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str, d_x: int):
        self.toks = _tokenize(src)
        self.i = 0
        self.d_x = d_x
        self.vec_ok = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, text=None):
        tok = self.toks[self.i]
        if text is not None and tok[1] != text:
            raise ParseError(f"expected {text!r}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def outputs(self):
        outs = [self.expr()]
        while self.peek()[1] == ";":
            self.take()
            outs.append(self.expr())
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected token {tok[1]!r}", tok[2])
        return outs

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = ExprNode(op, (node, self.term()))
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = ExprNode(op, (node, self.factor()))
        return node

    def factor(self):
        base = self.unary()
        if self.peek()[1] == "^":
            self.take()
            return ExprNode("^", (base, self.factor()))
        return base

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return ExprNode("neg", (self.unary(),))
        return self.atom()

    def atom(self):
        kind, text, pos = self.peek()
        if kind == "num":
            self.take()
            return ExprNode("const", value=float(text))
        if text == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if kind == "id":
            self.take()
            if text == "pi":
                return ExprNode("const", value=math.pi)
            m = re.fullmatch(r"x(\d+)", text)
            if m:
                idx = int(m.group(1))
                if not 1 <= idx <= self.d_x:
                    raise ParseError(f"variable {text} out of range 1..{self.d_x}", pos)
                return ExprNode("var", value=idx)
            if text == "x":
                if not self.vec_ok:
                    raise ParseError("bare 'x' is only allowed inside sqnorm", pos)
                return ExprNode("vec")
            if text not in _FUNCS:
                raise ParseError(f"unknown identifier {text!r}", pos)
            self.take("(")
            if text == "sqnorm":
                self.vec_ok += 1
            args = [self.expr()]
            while self.peek()[1] == ",":
                self.take()
                args.append(self.expr())
            if text == "sqnorm":
                self.vec_ok -= 1
            self.take(")")
            if len(args) != _FUNCS[text][0]:
                raise ParseError(f"{text} takes {_FUNCS[text][0]} argument(s), got {len(args)}", pos)
            return ExprNode(text, tuple(args))
        raise ParseError(f"unexpected token {text or 'end of input'!r}", pos)


@dataclass(frozen=True, eq=False)
class TargetFunction:
    """A map ``R^d_x -> R^d_y``, either parsed or backed by a Python callable."""

    d_x: int
    d_y: int
    exprs: tuple[ExprNode, ...] | None
    name: str
    func: Callable | None = None

    def __call__(self, x):
        return eval_target(self, x)

    def __str__(self):
        if self.exprs is None:
            return self.name
        return " ; ".join(format_expr(e) for e in self.exprs)


def parse_target(source: str, d_x: int, name: str | None = None) -> TargetFunction:
    """Parse ``source`` into a :class:`TargetFunction` of ``d_x`` inputs."""
    if d_x < 1:
        raise TargetError("d_x must be positive")
    outs = _Parser(source, d_x).outputs()
    return TargetFunction(d_x, len(outs), tuple(outs), name or source.strip())


def _eval(node: ExprNode, X: np.ndarray) -> np.ndarray:
    op = node.op
    if op == "const":
        return np.full(X.shape[0], float(node.value))
    if op == "var":
        return X[:, node.value - 1]
    if op == "vec":
        return X
    if op == "neg":
        return -_eval(node.children[0], X)
    if op == "sqnorm":
        v = _eval(node.children[0], X)
        return np.sum(v * v, axis=1) if v.ndim == 2 else v * v
    if op in _FUNCS:
        return _FUNCS[op][1](_eval(node.children[0], X))
    a = _eval(node.children[0], X)
    b = _eval(node.children[1], X)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if np.any(b == 0):
            raise DomainError("division by zero")
        return a / b
    return np.power(a, b)


def eval_target(f: TargetFunction, x) -> np.ndarray:
    """Evaluate ``f`` at one point (shape ``(d_x,)``) or a batch ``(n, d_x)``."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != f.d_x:
        raise TargetError(f"expected input dimension {f.d_x}, got {X.shape[1]}")
    with np.errstate(all="ignore"):
        if f.exprs is None:
            Y = np.asarray(f.func(X), dtype=float).reshape(X.shape[0], f.d_y)
        else:
            Y = np.stack([_eval(e, X) for e in f.exprs], axis=1)
    if not np.all(np.isfinite(Y)):
        raise DomainError("non-finite value in target evaluation")
    return Y[0] if single else Y


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def format_expr(node: ExprNode) -> str:
    """Render ``node`` so that reparsing yields the same tree."""
    op = node.op
    if op == "const":
        return repr(float(node.value))
    if op == "var":
        return f"x{node.value}"
    if op == "vec":
        return "x"
    if op in _FUNCS:
        return f"{op}({format_expr(node.children[0])})"
    if op == "neg":
        inner = node.children[0]
        s = format_expr(inner)
        # unary '-' binds tighter than every binary operator, '^' included
        if inner.op in _BINARY:
            s = f"({s})"
        return f"-{s}"
    a, b = node.children
    sa, sb = format_expr(a), format_expr(b)
    p = _PREC[op]
    if op == "^":
        if a.op in _PREC or (a.op == "const" and a.value < 0):
            sa = f"({sa})"
        if b.op in _PREC and _PREC[b.op] < 4:
            sb = f"({sb})"
        return f"{sa}^{sb}"
    if a.op in _PREC and _PREC[a.op] < p:
        sa = f"({sa})"
    # left associativity: same-precedence right operands need parentheses
    if b.op in _PREC and _PREC[b.op] <= p and b.op != "neg":
        sb = f"({sb})"
    elif b.op == "neg" and p >= 2:
        sb = f"({sb})"
    return f"{sa} {op} {sb}"


# --- built-ins ----------------------------------------------------------------

FOUR_VERTICES = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])


def _polyline_eval(vertices: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Uniform-parameter polyline through ``vertices`` evaluated at ``t`` in [0, 1]."""
    segs = len(vertices) - 1
    s = np.clip(t, 0.0, 1.0) * segs
    idx = np.minimum(np.floor(s).astype(int), segs - 1)
    frac = (s - idx)[:, None]
    return vertices[idx] * (1.0 - frac) + vertices[idx + 1] * frac


def four_vertices(dim: int = 2, z_lift: float = 0.1) -> np.ndarray:
    if dim == 2:
        return FOUR_VERTICES.copy()
    if dim == 3:
        v = np.zeros((4, 3))
        v[:, :2] = FOUR_VERTICES
        v[0, 2] = z_lift
        return v
    raise ValueError("dim must be 2 or 3")


def builtin(name: str, d: int = 2) -> TargetFunction:
    """Return a registered target.

    ``d`` is the input dimension for ``sqnorm`` and ``identity_d``; the other
    built-ins have fixed dimensions.
    """
    if name == "sqnorm":
        return TargetFunction(d, 1, (ExprNode("sqnorm", (ExprNode("vec"),)),), "sqnorm")
    if name == "identity_d":
        return TargetFunction(d, d, tuple(ExprNode("var", value=k) for k in range(1, d + 1)), "identity_d")
    if name == "swap2":
        return TargetFunction(2, 2, (ExprNode("var", value=2), ExprNode("var", value=1)), "swap2")
    if name == "four_curve":
        v = four_vertices(2)
        return TargetFunction(1, 2, None, "four_curve", lambda X: _polyline_eval(v, X[:, 0]))
    if name == "four_curve_3d":
        v = four_vertices(3)
        return TargetFunction(1, 3, None, "four_curve_3d", lambda X: _polyline_eval(v, X[:, 0]))
    raise TargetError(f"unknown builtin {name!r}; choose from {', '.join(BUILTINS)}")


BUILTINS = ("sqnorm", "four_curve", "four_curve_3d", "identity_d", "swap2")
